use proptest::prelude::*;

use blocktraj::diffusion::corrupt_block;
use blocktraj::metrics::{dtw, edr, hausdorff, Point};
use blocktraj::rng;
use blocktraj::sampler::terminate;
use blocktraj::token_model::{decode, encode_target, partition_blocks, Vocabulary};

const ROADS: usize = 40;

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..max)
}

proptest! {
    #[test]
    fn target_encoding_round_trips(segs in prop::collection::vec(0..ROADS, 0..40), bl in 1usize..20) {
        let v = Vocabulary::new(ROADS);
        let seq = encode_target(&segs, &v, bl).unwrap();
        prop_assert_eq!(seq.tokens.len() % bl, 0);
        prop_assert!(seq.tokens.len() < segs.len() + 1 + bl);
        prop_assert_eq!(decode(&seq.tokens, &v), segs.clone());
        prop_assert_eq!(seq.tokens[segs.len()], v.eos());
        prop_assert!(seq.tokens[segs.len() + 1..].iter().all(|&t| t == v.pad()));
        prop_assert_eq!(partition_blocks(&seq.tokens, bl).unwrap().len(), seq.tokens.len() / bl);
    }

    #[test]
    fn termination_cuts_at_destination_or_first_non_road(
        tokens in prop::collection::vec(0..ROADS + 3, 0..40),
        dest in 0..ROADS,
    ) {
        let v = Vocabulary::new(ROADS);
        // Indices past the roads land on MASK, EOS and PAD.
        let tokens: Vec<usize> = tokens.into_iter().map(|t| if t < ROADS { v.road(t).unwrap() } else { t }).collect();
        let (out, reached) = terminate(&tokens, dest, &v);
        let roads = decode(&tokens, &v);
        prop_assert!(roads.starts_with(&out));
        prop_assert_eq!(reached, roads.contains(&dest));
        if reached {
            prop_assert_eq!(out.last(), Some(&dest));
            prop_assert_eq!(out.iter().filter(|&&s| s == dest).count(), 1);
        } else {
            prop_assert_eq!(out, roads);
        }
    }

    #[test]
    fn pad_positions_survive_corruption(
        block in prop::collection::vec(0usize..12, 1..64),
        t in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let (mask, pad) = (100, 11);
        let (noisy, masked) = corrupt_block(&block, t, mask, pad, &mut rng::stream(seed, "pad"));
        for ((&x, &y), &m) in block.iter().zip(&noisy).zip(&masked) {
            if x == pad {
                prop_assert!(!m);
                prop_assert_eq!(y, pad);
            } else {
                prop_assert_eq!(y, if m { mask } else { x });
            }
        }
    }

    #[test]
    fn trajectory_distances_are_metric_like(a in points(12), b in points(12), eps in 0.0..30.0f64) {
        let d = dtw(&a, &b).unwrap();
        prop_assert!((d - dtw(&b, &a).unwrap()).abs() <= 1e-9 * d.max(1.0));
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        prop_assert!(d >= hausdorff(&a, &b).unwrap() - 1e-9);
        let e = edr(&a, &b, eps).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, edr(&b, &a, eps).unwrap());
        prop_assert_eq!(edr(&a, &a, eps).unwrap(), 0.0);
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
    }
}
