use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blocktraj::config::RunConfig;
use blocktraj::error::{Error, Result};
use blocktraj::pipeline;
use blocktraj::sampler::Decoder;

#[derive(Parser)]
#[command(name = "blocktraj", version, about = "Block discrete diffusion for road-segment trajectories")]
struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for independent requests in sample, eval and bench.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Record wall-clock times in outputs (breaks byte-identical reruns).
    #[arg(long, global = true)]
    nondeterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a grid-city road network.
    GenCity(GenCity),
    /// Synthesize a trajectory corpus with train/val/test splits and bin edges.
    GenData(GenData),
    /// Train the denoiser, writing checkpoints and a metrics log.
    Train(Train),
    /// Generate one trajectory per conditioning request.
    Sample(Sample),
    /// Compare generated trajectories with the test split.
    Eval(Eval),
    /// Count forward calls and time all three decoders.
    Bench(Bench),
    /// Finite-difference check of the tiny denoiser and encoder.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenCity {
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    block_len_m: Option<f64>,
    #[arg(long)]
    edge_drop: Option<f64>,
    #[arg(long)]
    cell_size: Option<f64>,
    /// Network file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    network: Option<PathBuf>,
    /// Corpus prefix; splits get `.train`, `.val`, `.test`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Replace the road-network encoder with a plain embedding table.
    #[arg(long)]
    no_rne: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct SamplerFlags {
    #[arg(long)]
    decoder: Option<Decoder>,
    /// Topology-constrained sampling.
    #[arg(long, value_enum)]
    tcs: Option<Switch>,
    #[arg(long)]
    cfg_w: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Request file of trip records or conditioning tuples; defaults to the test split.
    #[arg(long)]
    requests: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    edr_eps: Option<f64>,
}

#[derive(Args)]
struct Bench {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    requests: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of requests per decoder.
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long)]
    no_rne: bool,
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn apply_sampler(cfg: &mut RunConfig, f: SamplerFlags) -> Result<()> {
    let s = &mut cfg.sampler;
    set(&mut s.decoder, f.decoder);
    if s.decoder == Decoder::Ar && (f.block_len.is_some() || f.steps.is_some()) {
        return Err(Error::Usage("--block-len and --steps do not apply to the ar decoder".into()));
    }
    set(&mut s.tcs, f.tcs.map(|t| matches!(t, Switch::On)));
    set(&mut s.cfg_w, f.cfg_w);
    set(&mut s.temperature, f.temp);
    set(&mut s.block_len, f.block_len);
    set(&mut s.num_blocks, f.num_blocks);
    set(&mut s.steps, f.steps);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);
    if cli.nondeterministic {
        cfg.deterministic = false;
    }
    let p = &mut cfg.paths;
    match cli.command {
        Command::GenCity(a) => {
            set(&mut cfg.city.rows, a.rows);
            set(&mut cfg.city.cols, a.cols);
            set(&mut cfg.city.block_len_m, a.block_len_m);
            set(&mut cfg.city.edge_drop_prob, a.edge_drop);
            set(&mut cfg.city.cell_size, a.cell_size);
            set(&mut p.network, a.out);
            pipeline::gen_city(&cfg)?;
        }
        Command::GenData(a) => {
            set(&mut p.network, a.network);
            set(&mut p.corpus, a.out);
            set(&mut cfg.data.n, a.n);
            set(&mut cfg.data.min_len, a.min_len);
            set(&mut cfg.data.max_len, a.max_len);
            pipeline::gen_data(&cfg)?;
        }
        Command::Train(a) => {
            set(&mut p.network, a.network);
            set(&mut p.corpus, a.corpus);
            set(&mut p.run_dir, a.run_dir);
            let t = &mut cfg.train;
            set(&mut t.block_len, a.block_len);
            set(&mut t.epochs, a.epochs);
            if a.max_steps.is_some() {
                t.max_steps = a.max_steps;
            }
            set(&mut t.lr, a.lr);
            set(&mut t.batch_size, a.batch_size);
            set(&mut cfg.model.denoiser.d_model, a.d_model);
            set(&mut cfg.model.denoiser.n_layers, a.layers);
            if a.no_rne {
                cfg.model.use_rne = false;
            }
            let r = pipeline::train(&cfg)?;
            println!("{} steps, best validation loss {:.4} at step {}", r.steps, r.best_val, r.best_step);
        }
        Command::Sample(a) => {
            set(&mut p.network, a.network);
            p.checkpoint = a.checkpoint.or(p.checkpoint.take());
            p.requests = a.requests.or(p.requests.take());
            set(&mut p.corpus, a.corpus);
            set(&mut p.generated, a.out);
            apply_sampler(&mut cfg, a.sampler)?;
            let s = pipeline::sample(&cfg)?;
            println!(
                "{} trajectories, nfe {} (mean {:.2}), destination reached {:.1}%, dead ends {}",
                s.requests,
                s.nfe_total,
                s.nfe_mean,
                100.0 * s.dest_reached_rate,
                s.dead_ends
            );
        }
        Command::Eval(a) => {
            set(&mut p.network, a.network);
            set(&mut p.corpus, a.corpus);
            set(&mut p.generated, a.generated);
            set(&mut p.report, a.out);
            if a.edr_eps.is_some() {
                cfg.eval.edr_eps = a.edr_eps;
            }
            let r = pipeline::eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Bench(a) => {
            set(&mut p.network, a.network);
            p.checkpoint = a.checkpoint.or(p.checkpoint.take());
            p.requests = a.requests.or(p.requests.take());
            set(&mut p.corpus, a.corpus);
            set(&mut p.bench, a.out);
            set(&mut cfg.bench.requests, a.n);
            apply_sampler(&mut cfg, a.sampler)?;
            println!("{}", pipeline::BenchRow::HEADER);
            for r in pipeline::bench(&cfg)? {
                println!("{}", r.to_csv());
            }
        }
        Command::GradCheck(a) => {
            if a.no_rne {
                cfg.model.use_rne = false;
            }
            let r = pipeline::grad_check(&cfg)?;
            for (name, err) in &r.groups {
                println!("{name:<24} {err:.3e}");
            }
            println!("max relative error {:.3e} (tolerance {:.0e}) over {} elements", r.max_error(), r.tolerance, r.checked);
            if !r.passes() {
                eprintln!("gradient check failed for: {}", r.failures().join(", "));
                return Ok(ExitCode::from(Error::Numerical(String::new()).exit_code() as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
