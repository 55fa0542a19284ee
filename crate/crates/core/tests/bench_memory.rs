//! Peak tracking is process-wide, so this binary holds a single test.

use lcoa::bench::{run_benchmark, BenchConfig, BenchMode};

#[test]
fn tracked_peak_is_ordered_lcoa_lsp_nla() {
    for layers in [2, 4] {
        let cfg = BenchConfig {
            height: 32,
            width: 40,
            channels: 32,
            layers,
            clusters: 16,
            window_size: 64,
            warmup: 0,
            repeats: 1,
            seed: 5,
            ..BenchConfig::default()
        };
        let recs = run_benchmark(&cfg, &BenchMode::ALL).unwrap();
        let peak: Vec<usize> = recs.iter().map(|r| r.peak_alloc_bytes.unwrap()).collect();
        assert!(
            peak[2] < peak[1] && peak[1] < peak[0],
            "layers {layers}: {peak:?}"
        );
        assert_eq!(
            recs.iter().map(|r| r.plan_builds).collect::<Vec<_>>(),
            vec![0, layers as u64, 1]
        );
    }
}
