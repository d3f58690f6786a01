//! Train a small model briefly, then sample with and without topology-constrained decoding.
//!
//! cargo run --release --example constrained_sampling -- [steps]

use blocktraj::denoiser::{Model, ModelConfig};
use blocktraj::diffusion::{self, DiffusionSchedule, TrainConfig};
use blocktraj::pipeline;
use blocktraj::sampler::SamplerConfig;
use blocktraj::synth_world::{generate_city, split_corpus, synthesize_corpus, GridCitySpec};
use blocktraj::token_model::{BinTable, Conditioning, Vocabulary};

fn main() -> blocktraj::error::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let net = generate_city(&GridCitySpec { rows: 5, cols: 5, ..Default::default() })?;
    let splits = split_corpus(synthesize_corpus(&net, 4000, 5, 2, 20)?, 5);
    let vocab = Vocabulary::new(net.len());
    let bins = BinTable::fit(&splits.train)?;
    let train = diffusion::prepare(&splits.train, &bins, &vocab, 16)?;
    let val = diffusion::prepare(&splits.val, &bins, &vocab, 16)?;
    let mut cfg = ModelConfig::default();
    cfg.denoiser.vocab_size = vocab.size();
    cfg.denoiser.d_model = 32;
    cfg.denoiser.n_layers = 2;
    let mut model = Model::new(cfg, &net, 5)?;
    let sched = DiffusionSchedule::default();
    let tc = TrainConfig { max_steps: Some(steps), eval_interval: steps, deterministic: false, ..Default::default() };
    diffusion::train(&mut model, &train, &val, &vocab, &sched, &tc, &mut |_, _, _| Ok(()))?;

    let conds: Vec<Conditioning> = splits.test.iter().take(300).map(Conditioning::from_record).collect();
    for tcs in [true, false] {
        let scfg = SamplerConfig { tcs, ..Default::default() };
        let out = pipeline::generate(&model, &net, &bins, &sched, &conds, &scfg, 1)?;
        let (mut bad, mut total) = (0, 0);
        for g in &out {
            for w in g.segments.windows(2) {
                total += 1;
                bad += usize::from(!net.has_edge(w[0], w[1]));
            }
        }
        let reached = out.iter().filter(|g| g.stats.dest_reached).count();
        println!(
            "tcs {:<5} invalid transitions {bad}/{total}, destination reached {reached}/{}, dead ends {}",
            tcs,
            out.len(),
            out.iter().map(|g| g.stats.dead_ends).sum::<u64>()
        );
    }
    let g = pipeline::generate(&model, &net, &bins, &sched, &conds[..1], &SamplerConfig::default(), 1)?;
    println!("\nrequest {} -> {}: {:?}", conds[0].r_org, conds[0].r_dest, g[0].segments);
    Ok(())
}
