//! Synthesize a trajectory corpus, fit the attribute bins and show one tokenized example.
//!
//! cargo run --release --example synth_corpus -- [n]

use blocktraj::synth_world::{generate_city, split_corpus, synthesize_corpus, GridCitySpec};
use blocktraj::token_model::{encode, Attribute, BinTable, Vocabulary};

fn main() -> blocktraj::error::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let net = generate_city(&GridCitySpec::default())?;
    let splits = split_corpus(synthesize_corpus(&net, n, 3, 4, 31)?, 3);
    println!("train {} / val {} / test {}", splits.train.len(), splits.val.len(), splits.test.len());

    let bins = BinTable::fit(&splits.train)?;
    for a in Attribute::ALL {
        let e = &bins.edges[a.index()];
        println!("{:<10} {} edges, equal-width fallback {}", a.name(), e.edges.len(), e.fallback);
    }

    let vocab = Vocabulary::new(net.len());
    let r = &splits.train[0];
    let (prompt, target) = encode(r, &bins, &vocab, 16)?;
    println!("\ntrip {:?}", r.segments);
    println!("d_trip {:.0} m, t_trip {:.0} s, v_avg {:.2} m/s", r.d_trip, r.t_trip, r.v_avg);
    let show = |t: &[usize]| t.iter().map(|&x| vocab.describe(x)).collect::<Vec<_>>().join(" ");
    println!("prompt  {}", show(&prompt.tokens));
    println!("nulled  {}", show(&prompt.nulled(&vocab).tokens));
    println!("target  {}", show(&target.tokens));
    Ok(())
}
