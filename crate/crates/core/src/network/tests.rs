use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::counters;

fn small(scale: usize) -> NetConfig {
    NetConfig {
        num_fau: 3,
        channels: 8,
        embed: 8,
        scale,
        clusters: 4,
        window_size: 16,
        decay: 0.999,
    }
}

fn image(h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
}

fn bits(m: &FeatureMap) -> Vec<u32> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn output_shape_follows_scale() {
    for scale in [2, 3, 4] {
        let cfg = small(scale);
        let w = ModelWeights::synthesize(&cfg, 1).unwrap();
        for (h, wd) in [(8, 8), (9, 13)] {
            let out = lcoan_forward(&image(h, wd, 2), &w, &cfg, SrMode::Inference).unwrap();
            assert_eq!(
                (out.image.height(), out.image.width(), out.image.channels()),
                (h * scale, wd * scale, 3)
            );
            assert!(out.image.is_finite());
            assert!(out.calibrated.is_none());
        }
    }
}

#[test]
fn zero_beta_reduces_to_conv_path() {
    for scale in [2, 4] {
        let cfg = small(scale);
        let mut w = ModelWeights::synthesize(&cfg, 3).unwrap();
        w.set_beta(0.0);
        let lr = image(10, 11, 4);
        let sr = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
        let conv = conv_path_forward(&lr, &w, &cfg, Exec::Sequential).unwrap();
        assert_eq!(bits(&sr.image), bits(&conv));
    }
}

#[test]
fn inert_blocks_give_tail_of_head() {
    let cfg = small(3);
    let mut w = ModelWeights::synthesize(&cfg, 5).unwrap();
    w.set_beta(0.0);
    for f in &mut w.faus {
        f.conv1 = Conv3x3::identity(cfg.channels);
        f.conv2 = Conv3x3::zeros(cfg.channels, cfg.channels);
    }
    let lr = image(8, 9, 6);
    let sr = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
    let head = conv2d_3x3(&lr, &w.head).unwrap();
    let expected = pixel_shuffle(&conv2d_3x3(&head, &w.tail).unwrap(), 3).unwrap();
    assert_eq!(bits(&sr.image), bits(&expected));
}

#[test]
fn attention_changes_the_output() {
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 7).unwrap();
    let lr = image(8, 8, 8);
    let sr = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
    let conv = conv_path_forward(&lr, &w, &cfg, Exec::Sequential).unwrap();
    assert_ne!(bits(&sr.image), bits(&conv));
}

#[test]
fn deterministic_across_runs_and_threads() {
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 9).unwrap();
    let lr = image(24, 24, 10);
    let a = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
    let b = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
    let c = lcoan_forward_with(&lr, &w, &cfg, SrMode::Inference, Exec::Parallel).unwrap();
    assert_eq!(bits(&a.image), bits(&b.image));
    assert_eq!(bits(&a.image), bits(&c.image));
    assert_eq!(w, ModelWeights::synthesize(&cfg, 9).unwrap());
}

#[test]
fn one_plan_per_forward() {
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 11).unwrap();
    let before = counters::snapshot();
    lcoan_forward(&image(12, 12, 12), &w, &cfg, SrMode::Inference).unwrap();
    let d = counters::snapshot().since(&before);
    assert_eq!(
        (d.plan_builds, d.weight_builds, d.qk_projections),
        (1, 1, 1)
    );
    assert_eq!(
        (d.gathers, d.scatters),
        (2 + cfg.num_fau as u64, cfg.num_fau as u64)
    );
}

#[test]
fn calibrate_moves_centroids() {
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 13).unwrap();
    let lr = image(12, 12, 14);
    let out = lcoan_forward(&lr, &w, &cfg, SrMode::Calibrate).unwrap();
    let state = out.calibrated.unwrap();
    assert_ne!(state.centroids(), w.kmeans.centroids());
    assert_eq!(state.assignment_counts().iter().sum::<u64>(), 2 * 144);
    let inference = lcoan_forward(&lr, &w, &cfg, SrMode::Inference).unwrap();
    assert_eq!(bits(&inference.image), bits(&out.image));
}

#[test]
fn nla_variant_has_more_parameters() {
    for cfg in [small(2), small(4), NetConfig::default()] {
        let w = ModelWeights::synthesize(&cfg, 15).unwrap();
        assert!(w.nla_variant_param_count() > w.param_count());
    }
}

#[test]
fn seeded_centroids_are_unit_rows_of_queries() {
    let cfg = small(2);
    let mut w = ModelWeights::synthesize(&cfg, 16).unwrap();
    w.seed_centroids(&image(8, 8, 17), 18).unwrap();
    assert_eq!(w.kmeans.k(), cfg.clusters);
    assert!(lcoan_forward(&image(8, 8, 17), &w, &cfg, SrMode::Inference).is_ok());
}

#[test]
fn config_mismatch_names_the_tensor() {
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 19).unwrap();
    let lr = image(8, 8, 20);
    let name = |cfg: NetConfig| match lcoan_forward(&lr, &w, &cfg, SrMode::Inference) {
        Err(Error::ConfigMismatch { tensor, .. }) => tensor,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(name(NetConfig { scale: 3, ..cfg }), "tail.weight");
    assert_eq!(name(NetConfig { scale: 4, ..cfg }), "up.weight");
    assert_eq!(
        name(NetConfig {
            channels: 6,
            embed: 6,
            ..cfg
        }),
        "head.weight"
    );
    assert_eq!(name(NetConfig { clusters: 5, ..cfg }), "lsp.centroids");
    assert_eq!(
        name(NetConfig {
            window_size: 17,
            ..cfg
        }),
        "lsp.window_size"
    );
    assert_eq!(name(NetConfig { embed: 4, ..cfg }), "fau.0.coa.w_m");
}

#[test]
fn rejects_bad_configs_and_inputs() {
    assert!(small(5).validate().is_err());
    assert!(NetConfig {
        num_fau: 0,
        ..small(2)
    }
    .validate()
    .is_err());
    assert!(NetConfig {
        decay: 1.0,
        ..small(2)
    }
    .validate()
    .is_err());
    let cfg = small(2);
    let w = ModelWeights::synthesize(&cfg, 22).unwrap();
    let gray = FeatureMap::zeros(8, 8, 1);
    assert!(lcoan_forward(&gray, &w, &cfg, SrMode::Inference).is_err());
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempdir().unwrap();
    for (scale, embed) in [(2, 8), (4, 8), (3, 5)] {
        let cfg = NetConfig {
            embed,
            ..small(scale)
        };
        let mut w = ModelWeights::synthesize(&cfg, 23).unwrap();
        w.faus[1].coa.beta = 0.375;
        let path = dir.path().join(format!("w{scale}.lcoa"));
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bundle().to_bytes(), w.to_bundle().to_bytes());
        assert_eq!(NetConfig::from_weights(&back, scale), cfg);
    }
}

#[test]
fn load_errors_are_distinct() {
    let w = ModelWeights::synthesize(&small(2), 24).unwrap();
    let bytes = w.to_bundle().to_bytes();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"LCOB");
    assert!(matches!(
        TensorBundle::from_bytes(&bad),
        Err(Error::BadMagic { .. })
    ));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        TensorBundle::from_bytes(&bad),
        Err(Error::VersionMismatch { .. })
    ));

    // Cut inside the data of the first tensor.
    match TensorBundle::from_bytes(&bytes[..100]) {
        Err(Error::Truncated { context }) => assert!(context.contains("head.weight"), "{context}"),
        other => panic!("unexpected {other:?}"),
    }

    let mut b = TensorBundle::new();
    for (name, t) in w.to_bundle().iter() {
        let t = if name == "tail.bias" {
            Tensor::new(vec![5], vec![0.0; 5]).unwrap()
        } else {
            t.clone()
        };
        b.insert(name, t).unwrap();
    }
    assert!(matches!(
        ModelWeights::from_bundle(&b),
        Err(Error::DimensionMismatch { tensor, .. }) if tensor == "tail.bias"
    ));

    let mut b = w.to_bundle();
    b.insert("extra", Tensor::scalar(1.0)).unwrap();
    assert!(
        matches!(ModelWeights::from_bundle(&b), Err(Error::ConfigMismatch { tensor, .. }) if tensor == "extra")
    );
}
