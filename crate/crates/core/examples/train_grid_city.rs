//! Train a denoiser on a generated 8x8 grid city and report held-out masked cross-entropy.
//!
//! cargo run --release --example train_grid_city -- [steps]

use blocktraj::denoiser::{Model, ModelConfig};
use blocktraj::diffusion::{self, DiffusionSchedule, TrainConfig};
use blocktraj::synth_world::{generate_city, split_corpus, synthesize_corpus, GridCitySpec};
use blocktraj::token_model::{BinTable, Vocabulary};

fn main() -> blocktraj::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let net = generate_city(&GridCitySpec::default())?;
    let corpus = synthesize_corpus(&net, 20_000, 7, 4, 31)?;
    let splits = split_corpus(corpus, 7);
    let vocab = Vocabulary::new(net.len());
    let bins = BinTable::fit(&splits.train)?;
    let block_len = 16;
    let train = diffusion::prepare(&splits.train, &bins, &vocab, block_len)?;
    let val = diffusion::prepare(&splits.val, &bins, &vocab, block_len)?;
    let mean_len = splits.train.iter().map(|r| r.segments.len()).sum::<usize>() as f64 / splits.train.len() as f64;
    println!("segments {}  mean out-degree {:.3}  mean route length {:.2}", net.len(), net.mean_out_degree(), mean_len);

    let mut cfg = ModelConfig::default();
    cfg.denoiser.vocab_size = vocab.size();
    let mut model = Model::new(cfg, &net, 1)?;
    println!("parameters {}", model.params.num_scalars());
    let sched = DiffusionSchedule::default();
    let tc = TrainConfig { max_steps: Some(steps), eval_interval: 100, deterministic: false, ..Default::default() };
    let report = diffusion::train(&mut model, &train, &val, &vocab, &sched, &tc, &mut |row, _, _| {
        println!("{}", row.to_csv());
        Ok(())
    })?;
    let set = diffusion::validation_set(&val, 512, &sched, &vocab, 99)?;
    let ce = diffusion::evaluate_loss(&model, &val, &set, &sched, false)?;
    println!(
        "steps {}  held-out masked CE {:.4}  bound ln(deg+1) {:.4}",
        report.steps,
        ce,
        (net.mean_out_degree() + 1.0).ln()
    );
    Ok(())
}
