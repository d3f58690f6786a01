//! Sweep the guidance scale and block length for one trained model and compare metrics.
//!
//! cargo run --release --example guidance_sweep -- [steps]

use blocktraj::denoiser::{Model, ModelConfig};
use blocktraj::diffusion::{self, DiffusionSchedule, TrainConfig};
use blocktraj::metrics;
use blocktraj::pipeline;
use blocktraj::sampler::SamplerConfig;
use blocktraj::synth_world::{generate_city, split_corpus, synthesize_corpus, GridCitySpec};
use blocktraj::token_model::{BinTable, Conditioning, Vocabulary};

fn main() -> blocktraj::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let net = generate_city(&GridCitySpec { rows: 6, cols: 6, ..Default::default() })?;
    let splits = split_corpus(synthesize_corpus(&net, 6000, 9, 3, 24)?, 9);
    let vocab = Vocabulary::new(net.len());
    let bins = BinTable::fit(&splits.train)?;
    let train = diffusion::prepare(&splits.train, &bins, &vocab, 16)?;
    let val = diffusion::prepare(&splits.val, &bins, &vocab, 16)?;
    let mut cfg = ModelConfig::default();
    cfg.denoiser.vocab_size = vocab.size();
    cfg.denoiser.n_layers = 2;
    let mut model = Model::new(cfg, &net, 9)?;
    let sched = DiffusionSchedule::default();
    let tc = TrainConfig { max_steps: Some(steps), eval_interval: steps, deterministic: false, ..Default::default() };
    diffusion::train(&mut model, &train, &val, &vocab, &sched, &tc, &mut |_, _, _| Ok(()))?;

    let conds: Vec<Conditioning> = splits.test.iter().map(Conditioning::from_record).collect();
    let real: Vec<Vec<usize>> = splits.test.iter().map(|r| r.segments.clone()).collect();
    let eps = net.median_segment_length();
    println!("{:>4} {:>5} {:>10} {:>10} {:>8} {:>6} {:>8}", "L'", "w", "JSD(dist)", "JSD(rad)", "DTW", "EDR", "NFE");
    for block_len in [8, 16] {
        for cfg_w in [0.0, 0.25, 0.5, 1.0] {
            let scfg = SamplerConfig { block_len, num_blocks: 32 / block_len, cfg_w, ..Default::default() };
            let out = pipeline::generate(&model, &net, &bins, &sched, &conds, &scfg, 1)?;
            let nfe = out.iter().map(|g| g.stats.nfe).sum::<u64>() as f64 / out.len() as f64;
            let gen: Vec<Vec<usize>> = out.into_iter().map(|g| g.segments).collect();
            let r = metrics::evaluate(&real, &gen, &net, eps, 1)?;
            println!(
                "{block_len:>4} {cfg_w:>5} {:>10.4} {:>10.4} {:>8.1} {:>6.3} {nfe:>8.2}",
                r.jsd_distance, r.jsd_radius, r.dtw_mean, r.edr_mean
            );
        }
    }
    Ok(())
}
