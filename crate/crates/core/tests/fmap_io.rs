mod common;

use partaog::fmap::{
    corpus_stats, normalize_activations, read_fmap, unit_to_image_region, write_fmap, FeatureLayer, FeatureMapSet,
    LayerMeta, NormStatistic,
};
use partaog::Error;
use proptest::prelude::*;

fn arb_meta(name: &'static str) -> impl Strategy<Value = LayerMeta> {
    (1usize..5, 1usize..6, prop::sample::select(vec![4.0f32, 8.0, 16.0, 32.0]))
        .prop_map(move |(c, s, stride)| common::layer(name, c, s, stride))
}

fn arb_set() -> impl Strategy<Value = FeatureMapSet> {
    (arb_meta("a"), arb_meta("b"), "[a-z0-9_]{1,12}", 1u32..1000, 1u32..1000)
        .prop_flat_map(|(ma, mb, id, w, h)| {
            let la = prop::collection::vec(-5.0f32..5.0, ma.len());
            let lb = prop::collection::vec(-5.0f32..5.0, mb.len());
            (Just(ma), Just(mb), Just(id), Just((w, h)), la, lb)
        })
        .prop_map(|(ma, mb, id, size, ra, rb)| {
            let layers = vec![FeatureLayer::new(ma, ra).unwrap(), FeatureLayer::new(mb, rb).unwrap()];
            FeatureMapSet::new(id, size, layers).unwrap()
        })
}

/// `X = max(a,0)/mean of the positive activations of the channel`, written out longhand.
#[allow(clippy::needless_range_loop)]
fn oracle_normalize(maps: &[FeatureMapSet]) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = maps.iter().map(|m| m.layers.iter().map(|_| Vec::new()).collect()).collect();
    for li in 0..maps[0].layers.len() {
        let meta = &maps[0].layers[li].meta;
        let mut mu = vec![0.0f64; meta.channels];
        for (c, mu_c) in mu.iter_mut().enumerate() {
            let mut pos = Vec::new();
            for m in maps {
                for r in 0..meta.height {
                    for col in 0..meta.width {
                        let a = m.layers[li].raw_at(c, r, col) as f64;
                        if a > 0.0 {
                            pos.push(a);
                        }
                    }
                }
            }
            if !pos.is_empty() {
                *mu_c = pos.iter().sum::<f64>() / pos.len() as f64;
            }
        }
        for (mi, m) in maps.iter().enumerate() {
            let mut x = vec![0.0; meta.len()];
            for c in 0..meta.channels {
                for r in 0..meta.height {
                    for col in 0..meta.width {
                        let a = m.layers[li].raw_at(c, r, col) as f64;
                        x[(c * meta.height + r) * meta.width + col] = if a > 0.0 { a / mu[c] } else { 0.0 };
                    }
                }
            }
            out[mi][li] = x;
        }
    }
    out
}

proptest! {
    #[test]
    fn fmap_round_trip(set in arb_set()) {
        let bytes = write_fmap(&set).unwrap();
        let back = read_fmap(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(write_fmap(&back).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(set in arb_set(), cut in 0.0f64..1.0) {
        let bytes = write_fmap(&set).unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(read_fmap(&bytes[..n.min(bytes.len() - 1)]).is_err());
    }

    #[test]
    fn normalization_matches_oracle(
        seed_sets in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 2 * 3 * 3), 1..6)
    ) {
        let meta = common::layer("l", 2, 3, 8.0);
        let maps: Vec<FeatureMapSet> = seed_sets
            .into_iter()
            .enumerate()
            .map(|(i, raw)| FeatureMapSet::new(format!("i{i}"), (24, 24), vec![FeatureLayer::new(meta.clone(), raw).unwrap()]).unwrap())
            .collect();
        let (normalized, _) = normalize_activations(&maps, NormStatistic::MeanPositive).unwrap();
        let expected = oracle_normalize(&maps);
        for (m, e) in normalized.iter().zip(&expected) {
            let x = m.layers[0].normalized.as_ref().unwrap();
            for (a, b) in x.iter().zip(&e[0]) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
        // Mean of the activated normalized values is one on every channel that fires.
        for c in 0..meta.channels {
            let vals: Vec<f64> = normalized
                .iter()
                .flat_map(|m| {
                    let x = m.layers[0].normalized.as_ref().unwrap();
                    x[c * 9..(c + 1) * 9].to_vec()
                })
                .filter(|&v| v > 0.0)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn projection_is_monotone(meta in arb_meta("m"), a in 0usize..6, b in 0usize..6) {
        let (a, b) = (a.min(meta.width - 1), b.min(meta.width - 1));
        let ra = unit_to_image_region(&meta, a, a).unwrap();
        let rb = unit_to_image_region(&meta, b, b).unwrap();
        if a < b {
            prop_assert!(ra.center.x < rb.center.x && ra.center.y < rb.center.y);
        }
        prop_assert_eq!(ra.side, rb.side);
    }
}

#[test]
fn out_of_grid_unit_is_rejected() {
    let meta = common::layer("m", 1, 3, 8.0);
    assert!(unit_to_image_region(&meta, 3, 0).is_err());
    assert!(unit_to_image_region(&meta, 0, 3).is_err());
}

#[test]
fn bad_magic_is_named() {
    let set = FeatureMapSet::new("x", (8, 8), vec![FeatureLayer::new(common::layer("l", 1, 1, 8.0), vec![1.0]).unwrap()]).unwrap();
    let mut bytes = write_fmap(&set).unwrap();
    bytes[0] = b'G';
    assert!(matches!(read_fmap(&bytes), Err(Error::BadMagic(_))));
}

#[test]
fn stats_reject_mismatched_layouts() {
    let a = FeatureMapSet::new("a", (8, 8), vec![FeatureLayer::new(common::layer("l", 1, 1, 8.0), vec![1.0]).unwrap()]).unwrap();
    let b = FeatureMapSet::new("b", (8, 8), vec![FeatureLayer::new(common::layer("l", 2, 1, 8.0), vec![1.0, 2.0]).unwrap()]).unwrap();
    assert!(matches!(corpus_stats(&[a, b], NormStatistic::MeanPositive), Err(Error::LayerMismatch(_))));
}
