//! File-to-file stages behind the command-line subcommands. Every stage is
//! re-runnable from its inputs alone.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig};
use crate::denoiser::{DenoiserConfig, Model, ModelConfig};
use crate::diffusion::{self, DiffusionSchedule, LogRow, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::nn::{checkpoint, grad_check as run_grad_check, GradCheckOptions, GradCheckReport};
use crate::rne::RneConfig;
use crate::road_graph::{build_penalty, RoadNetwork, NEG_BIG};
use crate::rng;
use crate::sampler::{Decoder, Generated, Sampler, SamplerConfig};
use crate::synth_world::{generate_city, read_records, split_corpus, split_path, synthesize_corpus, write_records, Splits, TripRecord};
use crate::token_model::{BinTable, Conditioning, Vocabulary};

pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_LOG: &str = "metrics.csv";
pub const RUN_BINS: &str = "bins.json";

/// Vocabulary of the tiny grad-check denoiser.
pub const GRAD_CHECK_VOCAB: usize = 32;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn gen_city(cfg: &RunConfig) -> Result<RoadNetwork> {
    let spec = crate::synth_world::GridCitySpec { seed: cfg.seed, ..cfg.city.clone() };
    let net = generate_city(&spec)?;
    ensure_parent(&cfg.paths.network)?;
    net.save(&cfg.paths.network)?;
    info!("wrote {} segments, {} edges to {}", net.len(), net.edges().len(), cfg.paths.network.display());
    Ok(net)
}

pub fn gen_data(cfg: &RunConfig) -> Result<Splits> {
    let net = RoadNetwork::load(&cfg.paths.network)?;
    let d = &cfg.data;
    let corpus = synthesize_corpus(&net, d.n, cfg.seed, d.min_len, d.max_len)?;
    let splits = split_corpus(corpus, cfg.seed);
    ensure_parent(&cfg.paths.corpus)?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_records(&split_path(&cfg.paths.corpus, name), part)?;
    }
    BinTable::fit(&splits.train)?.save(&cfg.paths.corpus_bins())?;
    info!(
        "wrote {}/{}/{} train/val/test records under {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.paths.corpus.display()
    );
    Ok(splits)
}

/// Configuration stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionSchedule,
    pub train: TrainConfig,
}

/// Model configuration with the vocabulary size resolved for `network`.
pub fn resolve_model_config(model: &ModelConfig, network: &RoadNetwork) -> Result<ModelConfig> {
    let size = Vocabulary::new(network.len()).size();
    let mut m = model.clone();
    match m.denoiser.vocab_size {
        0 => m.denoiser.vocab_size = size,
        v if v != size => {
            return Err(Error::Contract(format!("vocab_size {v} does not match the network's vocabulary of {size}")))
        }
        _ => {}
    }
    Ok(m)
}

pub fn save_model(path: &Path, model: &Model, network: &RoadNetwork, config: &CheckpointConfig, step: u64) -> Result<()> {
    let meta = checkpoint::CheckpointMeta {
        config_hash: config_hash(config)?,
        network_hash: network.identity_hash(),
        vocab_size: model.config.denoiser.vocab_size,
        step,
        config: serde_json::to_value(config)?,
    };
    checkpoint::save(path, &model.params, &meta)
}

/// Load a checkpoint, verifying that it was trained on `network`.
pub fn load_model(path: &Path, network: &RoadNetwork) -> Result<(Model, CheckpointConfig)> {
    let (header, arrays) = checkpoint::load(path)?;
    if header.network_hash != network.identity_hash() {
        return Err(Error::Integrity(format!(
            "{} was trained on network {}, not {}",
            path.display(),
            header.network_hash,
            network.identity_hash()
        )));
    }
    let size = Vocabulary::new(network.len()).size();
    if header.vocab_size != size {
        return Err(Error::Integrity(format!("{}: vocabulary {} vs network's {size}", path.display(), header.vocab_size)));
    }
    let config: CheckpointConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Integrity(format!("{}: unreadable config: {e}", path.display())))?;
    if config_hash(&config)? != header.config_hash {
        return Err(Error::Integrity(format!("{}: config hash mismatch", path.display())));
    }
    let mut model = Model::new(config.model.clone(), network, 0)?;
    checkpoint::restore(&mut model.params, arrays)?;
    Ok((model, config))
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    let net = RoadNetwork::load(&cfg.paths.network)?;
    let vocab = Vocabulary::new(net.len());
    let bins = BinTable::load(&cfg.paths.corpus_bins())?;
    let read = |s: &str| read_records::<TripRecord>(&split_path(&cfg.paths.corpus, s));
    let (train_rec, val_rec) = (read("train")?, read("val")?);
    let bl = cfg.train.block_len;
    let train_set = diffusion::prepare(&train_rec, &bins, &vocab, bl)?;
    let val_set = diffusion::prepare(&val_rec, &bins, &vocab, bl)?;

    let ck = CheckpointConfig {
        model: resolve_model_config(&cfg.model, &net)?,
        diffusion: cfg.diffusion.clone(),
        train: TrainConfig { seed: cfg.seed, deterministic: cfg.deterministic, ..cfg.train.clone() },
    };
    let longest = train_set.iter().chain(&val_set).map(|e| e.target.len()).max().unwrap_or(0);
    let need = crate::token_model::PROMPT_LEN + longest;
    if need > ck.model.denoiser.max_positions {
        return Err(Error::Contract(format!(
            "training windows need {need} positions, max_positions is {}",
            ck.model.denoiser.max_positions
        )));
    }
    let mut model = Model::new(ck.model.clone(), &net, cfg.seed)?;
    let dir = &cfg.paths.run_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bins.save(&dir.join(RUN_BINS))?;
    let log_path = dir.join(METRICS_LOG);
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", LogRow::HEADER).map_err(|e| Error::io(&log_path, e))?;
    info!("training {} parameters on {} examples", model.params.num_scalars(), train_set.len());

    let best_path = dir.join(BEST_CHECKPOINT);
    let report = diffusion::train(&mut model, &train_set, &val_set, &vocab, &ck.diffusion, &ck.train, &mut |row, m, best| {
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        info!("step {} train {:.4} val {:.4}", row.step, row.train_loss, row.val_loss);
        if best {
            save_model(&best_path, m, &net, &ck, row.step as u64)?;
        }
        Ok(())
    })?;
    save_model(&dir.join(LAST_CHECKPOINT), &model, &net, &ck, report.steps as u64)?;
    Ok(report)
}

/// Request lines may be full trip records or bare conditioning tuples.
#[derive(Deserialize)]
#[serde(untagged)]
enum RequestLine {
    Trip(TripRecord),
    Cond(Conditioning),
}

pub fn read_requests(path: &Path) -> Result<Vec<Conditioning>> {
    let lines: Vec<RequestLine> = read_records(path)?;
    Ok(lines
        .into_iter()
        .map(|l| match l {
            RequestLine::Trip(r) => Conditioning::from_record(&r),
            RequestLine::Cond(c) => c,
        })
        .collect())
}

/// One line of the generated-trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub segments: Vec<usize>,
    pub nfe: u64,
    pub dead_ends: u64,
    pub dest_reached: bool,
    pub raw_len: usize,
}

impl From<&Generated> for GeneratedRecord {
    fn from(g: &Generated) -> Self {
        Self {
            segments: g.segments.clone(),
            nfe: g.stats.nfe,
            dead_ends: g.stats.dead_ends,
            dest_reached: g.stats.dest_reached,
            raw_len: g.stats.raw_len,
        }
    }
}

/// Sidecar summary of a `sample` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub config_hash: String,
    pub decoder: Decoder,
    pub requests: usize,
    pub nfe_total: u64,
    pub nfe_mean: f64,
    pub dead_ends: u64,
    pub dest_reached_rate: f64,
}

impl SampleStats {
    pub fn from_generated(config_hash: String, decoder: Decoder, out: &[Generated]) -> Self {
        let n = out.len().max(1) as f64;
        let nfe_total = out.iter().map(|g| g.stats.nfe).sum();
        Self {
            config_hash,
            decoder,
            requests: out.len(),
            nfe_total,
            nfe_mean: nfe_total as f64 / n,
            dead_ends: out.iter().map(|g| g.stats.dead_ends).sum(),
            dest_reached_rate: out.iter().filter(|g| g.stats.dest_reached).count() as f64 / n,
        }
    }
}

/// Sampler configuration of a run, with the run seed applied.
pub fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig { seed: cfg.seed, ..cfg.sampler.clone() }
}

/// Generate one trajectory per conditioning tuple with a loaded model.
pub fn generate(
    model: &Model,
    network: &RoadNetwork,
    bins: &BinTable,
    schedule: &DiffusionSchedule,
    conds: &[Conditioning],
    scfg: &SamplerConfig,
    workers: usize,
) -> Result<Vec<Generated>> {
    scfg.validate(model.config.denoiser.max_positions)?;
    let frozen = model.frozen()?;
    let penalty = build_penalty(network, NEG_BIG)?;
    let sampler = Sampler { frozen: &frozen, vocab: Vocabulary::new(network.len()), bins, penalty: &penalty, schedule: schedule.clone() };
    sampler.generate_all(conds, scfg, workers)
}

struct Loaded {
    net: RoadNetwork,
    model: Model,
    schedule: DiffusionSchedule,
    bins: BinTable,
}

fn load_for_sampling(cfg: &RunConfig) -> Result<Loaded> {
    let net = RoadNetwork::load(&cfg.paths.network)?;
    let ckpt = cfg.paths.checkpoint();
    let (model, ck) = load_model(&ckpt, &net)?;
    let bins_path = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_BINS);
    let bins = BinTable::load(&bins_path)?;
    Ok(Loaded { net, model, schedule: ck.diffusion, bins })
}

pub fn sample(cfg: &RunConfig) -> Result<SampleStats> {
    let l = load_for_sampling(cfg)?;
    let conds = read_requests(&cfg.paths.requests())?;
    let scfg = sampler_config(cfg);
    let out = generate(&l.model, &l.net, &l.bins, &l.schedule, &conds, &scfg, cfg.workers)?;
    let records: Vec<GeneratedRecord> = out.iter().map(GeneratedRecord::from).collect();
    ensure_parent(&cfg.paths.generated)?;
    write_records(&cfg.paths.generated, &records)?;
    let stats = SampleStats::from_generated(config_hash(cfg)?, scfg.decoder, &out);
    write_json(&cfg.paths.stats(), &stats)?;
    info!(
        "{} trajectories, {} forward calls, destination reached in {:.1}%",
        stats.requests,
        stats.nfe_total,
        100.0 * stats.dest_reached_rate
    );
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: MetricReport,
    pub config_hash: String,
}

pub fn eval(cfg: &RunConfig) -> Result<MetricReport> {
    let net = RoadNetwork::load(&cfg.paths.network)?;
    let real: Vec<Vec<usize>> =
        read_records::<TripRecord>(&split_path(&cfg.paths.corpus, "test"))?.into_iter().map(|r| r.segments).collect();
    let generated: Vec<Vec<usize>> =
        read_records::<GeneratedRecord>(&cfg.paths.generated)?.into_iter().map(|g| g.segments).collect();
    let eps = cfg.eval.edr_eps.unwrap_or_else(|| net.median_segment_length());
    let report = metrics::evaluate(&real, &generated, &net, eps, cfg.workers)?;
    ensure_parent(&cfg.paths.report)?;
    write_json(&cfg.paths.report, &ReportFile { report: report.clone(), config_hash: config_hash(cfg)? })?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub decoder: Decoder,
    pub requests: usize,
    pub nfe_total: u64,
    pub nfe_mean: f64,
    pub raw_len_mean: f64,
    /// Zero in deterministic mode so that the table is reproducible.
    pub wall_ms: u64,
    pub config_hash: String,
}

impl BenchRow {
    pub const HEADER: &'static str = "decoder,requests,nfe_total,nfe_mean,raw_len_mean,wall_ms,config_hash";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{},{}",
            self.decoder.name(),
            self.requests,
            self.nfe_total,
            self.nfe_mean,
            self.raw_len_mean,
            self.wall_ms,
            self.config_hash
        )
    }
}

pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let l = load_for_sampling(cfg)?;
    let mut conds = read_requests(&cfg.paths.requests())?;
    conds.truncate(cfg.bench.requests);
    let hash = config_hash(cfg)?;
    let mut rows = Vec::new();
    for decoder in [Decoder::Block, Decoder::Ar, Decoder::Mdlm] {
        let scfg = SamplerConfig { decoder, ..sampler_config(cfg) };
        let start = Instant::now();
        let out = generate(&l.model, &l.net, &l.bins, &l.schedule, &conds, &scfg, cfg.workers)?;
        let ms = start.elapsed().as_millis() as u64;
        let n = out.len().max(1) as f64;
        let nfe_total: u64 = out.iter().map(|g| g.stats.nfe).sum();
        info!("{}: {} forward calls in {} ms", decoder.name(), nfe_total, ms);
        rows.push(BenchRow {
            decoder,
            requests: out.len(),
            nfe_total,
            nfe_mean: nfe_total as f64 / n,
            raw_len_mean: out.iter().map(|g| g.stats.raw_len as f64).sum::<f64>() / n,
            wall_ms: if cfg.deterministic { 0 } else { ms },
            config_hash: hash.clone(),
        });
    }
    let mut text = format!("{}\n", BenchRow::HEADER);
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    ensure_parent(&cfg.paths.bench)?;
    write_text(&cfg.paths.bench, &text)?;
    Ok(rows)
}

/// Model configuration of the grad check: width 16, one layer, 32 tokens,
/// keeping the run's encoder choice.
pub fn grad_check_model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_positions: 20,
            vocab_size: GRAD_CHECK_VOCAB,
            tie_embeddings: false,
        },
        rne: RneConfig { sub_dim: 8, edge_dim: 4, hidden: 16, inject_hidden: 16, out_gain: 1.0, ..cfg.model.rne.clone() },
        use_rne: cfg.model.use_rne,
    }
}

/// Finite-difference check of the full denoiser and encoder on a 2x2 city.
pub fn grad_check(cfg: &RunConfig) -> Result<GradCheckReport> {
    let net = generate_city(&crate::synth_world::GridCitySpec { rows: 2, cols: 2, seed: cfg.seed, ..Default::default() })?;
    let mut model = Model::new(grad_check_model_config(cfg), &net, cfg.seed)?;
    let mut r = rng::stream(cfg.seed, "grad-check");
    let n_out = 4;
    let window: Vec<usize> = (0..12).map(|_| r.random_range(0..GRAD_CHECK_VOCAB)).collect();
    let targets: Vec<usize> = (0..n_out).map(|_| r.random_range(0..GRAD_CHECK_VOCAB)).collect();
    let mut mask: Vec<bool> = (0..n_out).map(|_| r.random::<bool>()).collect();
    mask[0] = true;
    let weights = vec![2.0; n_out];
    let mut store = std::mem::take(&mut model.params);
    let report = run_grad_check(
        &mut store,
        |t| {
            let table = model.token_table(t)?;
            let logits = model.window_logits(t, table, &window, n_out)?;
            t.cross_entropy(logits, &targets, &mask, &weights)
        },
        &GradCheckOptions::default(),
    )?;
    model.params = store;
    Ok(report)
}
