//! Count denoiser forward calls for the block, autoregressive and one-shot decoders.
//!
//! cargo run --release --example decoder_nfe

use blocktraj::denoiser::{Model, ModelConfig};
use blocktraj::diffusion::DiffusionSchedule;
use blocktraj::pipeline;
use blocktraj::sampler::{Decoder, SamplerConfig};
use blocktraj::synth_world::{generate_city, synthesize_corpus, GridCitySpec};
use blocktraj::token_model::{BinTable, Conditioning, Vocabulary};

fn main() -> blocktraj::error::Result<()> {
    let net = generate_city(&GridCitySpec::default())?;
    let corpus = synthesize_corpus(&net, 400, 4, 4, 31)?;
    let bins = BinTable::fit(&corpus)?;
    let mut cfg = ModelConfig::default();
    cfg.denoiser.vocab_size = Vocabulary::new(net.len()).size();
    // Forward-call counts do not depend on the weights, so an untrained model will do.
    let model = Model::new(cfg, &net, 4)?;
    let conds: Vec<Conditioning> = corpus.iter().take(100).map(Conditioning::from_record).collect();
    println!("{:>3} {:>2} {:>4} {:>6} {:>9} {:>8}", "L'", "T", "w", "dec", "NFE/req", "raw len");
    for (block_len, steps) in [(16, 8), (8, 4), (4, 2)] {
        for cfg_w in [0.0, 0.5] {
            for decoder in [Decoder::Block, Decoder::Ar, Decoder::Mdlm] {
                let scfg = SamplerConfig { decoder, block_len, num_blocks: 32 / block_len, steps, cfg_w, ..Default::default() };
                let out = pipeline::generate(&model, &net, &bins, &DiffusionSchedule::default(), &conds, &scfg, 1)?;
                let n = out.len() as f64;
                println!(
                    "{block_len:>3} {steps:>2} {cfg_w:>4} {:>6} {:>9.2} {:>8.2}",
                    decoder.name(),
                    out.iter().map(|g| g.stats.nfe).sum::<u64>() as f64 / n,
                    out.iter().map(|g| g.stats.raw_len).sum::<usize>() as f64 / n
                );
            }
        }
    }
    Ok(())
}
