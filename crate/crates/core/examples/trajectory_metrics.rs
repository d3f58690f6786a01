//! Score a random-walk baseline and a held-out real split against real trajectories.
//!
//! cargo run --release --example trajectory_metrics

use blocktraj::metrics::{self, dtw, edr, hausdorff, polyline};
use blocktraj::rng;
use blocktraj::sampler::random_walk;
use blocktraj::synth_world::{generate_city, split_corpus, synthesize_corpus, GridCitySpec};

fn main() -> blocktraj::error::Result<()> {
    let net = generate_city(&GridCitySpec::default())?;
    let splits = split_corpus(synthesize_corpus(&net, 5000, 2, 4, 31)?, 2);
    let seg = |set: &[blocktraj::synth_world::TripRecord]| set.iter().map(|r| r.segments.clone()).collect::<Vec<_>>();
    let (real, other) = (seg(&splits.test), seg(&splits.val));
    let walks: Vec<Vec<usize>> = splits
        .test
        .iter()
        .enumerate()
        .map(|(i, r)| random_walk(&net, r.origin(), r.destination(), 32, &mut rng::indexed_stream(2, "walk", i as u64)))
        .collect();
    let eps = net.median_segment_length();

    let a = polyline(&real[0], &net)?;
    let b = polyline(&walks[0], &net)?;
    println!("one pair: hausdorff {:.1} m, dtw {:.1} m, edr {:.3}", hausdorff(&a, &b)?, dtw(&a, &b)?, edr(&a, &b, eps)?);

    println!("\n{:<12} {:>10} {:>10} {:>10} {:>8} {:>6} {:>9}", "set", "JSD(dist)", "JSD(rad)", "Hausdorff", "DTW", "EDR", "coverage");
    for (name, gen) in [("held-out", &other), ("random walk", &walks)] {
        let r = metrics::evaluate(&real, gen, &net, eps, 1)?;
        println!(
            "{name:<12} {:>10.4} {:>10.4} {:>10.1} {:>8.1} {:>6.3} {:>9.3}",
            r.jsd_distance, r.jsd_radius, r.hausdorff_mean, r.dtw_mean, r.edr_mean, r.coverage
        );
    }
    Ok(())
}
