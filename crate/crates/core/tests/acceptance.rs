//! Acceptance criteria, one test per criterion. Each prints a single
//! `AC<k> ... PASS|FAIL` line; run with `--nocapture` to see them.

use std::process::Command;
use std::time::Instant;

use blockprefill::criticality::Horizon;
use blockprefill::flops::{count_flops, estimation_overhead};
use blockprefill::harness::locality::{self, LocalityParams, QuerySource};
use blockprefill::harness::{bench, needle, verify, CheckResult};
use blockprefill::{select_blocks, HeadGeometry, Mode, PrunedAttnConfig, Tiling};

const SEED: u64 = 0;

fn report(id: u32, title: &str, pass: bool, detail: String) {
    println!("AC{id} {title}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "AC{id} {title} failed: {detail}");
}

fn report_check(id: u32, title: &str, c: &CheckResult) {
    report(
        id,
        title,
        c.pass,
        format!("{} observed {:e}, tolerance {:e}", c.name, c.observed, c.tolerance),
    );
}

#[test]
fn ac1_full_budget_equivalence() {
    let start = Instant::now();
    let c = verify::check_full_budget(SEED, 1024, 64, 4, 4).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report_check(1, "full-budget pruned prefill equals dense at every layer", &c);
    report(1, "full-budget runtime under 10 s", secs < 10.0, format!("{secs:.2} s"));
}

#[test]
fn ac2_estimator_transcription() {
    let c = verify::check_estimator_transcription(SEED, 50).unwrap();
    report_check(2, "estimator matches line-by-line 64-bit oracle over 50 seeds", &c);
}

#[test]
fn ac3_gather_oracle() {
    let c = verify::check_gather_oracle(SEED, 50, false).unwrap();
    report_check(3, "pruned attention matches gather-then-dense oracle over 50 seeds", &c);
}

#[test]
fn ac4_causality() {
    for mode in [Mode::Dense, Mode::Pruned] {
        let out = verify::check_causality(SEED, 20, mode, false).unwrap();
        report_check(4, "rows before a perturbed token are unchanged (20 trials)", &out.check);
    }
}

#[test]
fn ac5_planted_block_recall() {
    let r = needle::run(&needle::NeedleParams {
        seq_lens: vec![8192, 32768, 65536],
        depths: vec![0.1, 0.5, 0.9],
        head_dim: 16,
        magnitude: 10.0,
        cfg: PrunedAttnConfig::default(),
        seed: SEED,
    })
    .unwrap();
    report(
        5,
        "planted block selected for the final segment",
        r.found == 9 && r.total == 9,
        format!("{}/{} cells", r.found, r.total),
    );
}

#[test]
fn ac6_locality() {
    let run = |source| {
        locality::run(&LocalityParams {
            n: 4096,
            head_dim: 16,
            top_k: 512,
            stride: 32,
            horizon: Horizon::Full,
            source,
            seed: SEED,
        })
        .unwrap()
        .summary
    };
    let drift = run(QuerySource::Drift { sigma: 0.1 });
    report(
        6,
        "drifting queries: adjacent overlap exceeds distant by >= 0.1",
        drift.gap >= 0.1,
        format!("adjacent {:.4}, distant {:.4}, gap {:.4}", drift.adjacent_mean, drift.distant_mean, drift.gap),
    );
    let iid = run(QuerySource::Iid);
    report(
        6,
        "i.i.d. control: gap within 0.05",
        iid.gap.abs() <= 0.05,
        format!("adjacent {:.4}, distant {:.4}, gap {:.4}", iid.adjacent_mean, iid.distant_mean, iid.gap),
    );
}

#[test]
fn ac7_fusion_recurrence() {
    report_check(7, "layer-2 scores follow the unrolled recurrence", &verify::check_fusion_recurrence(SEED).unwrap());
    report_check(7, "alpha = 1 is entry-identical to no fusion", &verify::check_fusion_identity(SEED).unwrap());
}

/// Scored pairs by walking every query token over an actual block selection.
fn enumerated_pairs(n: usize, cfg: &PrunedAttnConfig) -> u64 {
    let tiling = Tiling::new(n, cfg.segment_size, cfg.block_size).unwrap();
    let flat = vec![0.0f32; tiling.n_blocks()];
    let mut pairs = 0u64;
    for s in 0..tiling.n_segments() {
        let sel = select_blocks(&flat, s, &tiling, cfg);
        for i in tiling.segment_range(s) {
            for &b in &sel.blocks {
                let r = tiling.block_range(b);
                if r.start <= i {
                    pairs += (r.end.min(i + 1) - r.start) as u64;
                }
            }
        }
    }
    pairs
}

#[test]
fn ac8_flop_accounting() {
    let cfg = PrunedAttnConfig::default();
    let geometry = HeadGeometry::new(32, 128).unwrap();
    let layers = 32;
    let d = geometry.head_dim as u64;
    let hl = (geometry.n_heads * layers) as u64;
    let mut last = 0.0;
    for n in [16384usize, 32768, 65536, 131072] {
        let r = count_flops(n, layers, geometry, &cfg, Mode::Pruned);
        let dense: u64 = hl * 4 * d * (1..=n as u64).sum::<u64>();
        let pruned = hl * 4 * d * enumerated_pairs(n, &cfg);
        let (n1, n2) = (n.div_ceil(512) as u64, n.div_ceil(32) as u64);
        let overhead = hl * (2 * n as u64 * d + 8 * d * n1 * n2 + 5 * n1 * n2);
        assert_eq!(overhead, hl * estimation_overhead(n, geometry.head_dim, &cfg));
        let ratio = dense as f64 / (pruned + overhead) as f64;
        let exact = r.dense == dense && r.pruned == pruned && r.overhead == overhead && r.ratio == ratio;
        report(
            8,
            "FLOP tallies match independent enumeration",
            exact,
            format!("n={n} ratio {:.6} vs {ratio:.6}", r.ratio),
        );
        report(8, "ratio strictly increasing in n", r.ratio > last, format!("n={n} {:.4} > {last:.4}", r.ratio));
        last = r.ratio;
    }
}

#[test]
fn ac9_verify_is_deterministic() {
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_blockprefill"))
            .args(["verify", "--seed", "7"])
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    report(9, "verify exits 0", a.status.success() && b.status.success(), format!("{:?}", a.status.code()));
    report(
        9,
        "verify report byte-identical across runs",
        a.stdout == b.stdout && !a.stdout.is_empty(),
        format!("{} bytes", a.stdout.len()),
    );
}

/// Informational desk benchmark. Slow (dense prefill at n = 32768 takes
/// minutes on one core), so it only runs with `--ignored` and never gates.
#[test]
#[ignore]
fn ac10_soft_benchmark() {
    let params = bench::BenchParams {
        seq_lens: vec![32768],
        layers: 2,
        geometry: HeadGeometry::from_model_dim(512, 8).unwrap(),
        cfg: PrunedAttnConfig::default(),
        modes: vec![Mode::Dense, Mode::Pruned],
        repeats: 1,
        warmup: 0,
        seed: SEED,
        verify: false,
        max_elements: usize::MAX,
        model: None,
        residual: false,
    };
    let results = bench::run(&params, |r| {
        println!("{}", serde_json::to_string(r).unwrap());
        Ok(())
    })
    .unwrap();
    let speedup = results[0].wall_clock_s / results[1].wall_clock_s;
    println!(
        "AC10 soft benchmark (informational): pruned {speedup:.2}x faster than dense ({})",
        if speedup >= 2.0 { "meets 2x" } else { "below 2x" }
    );
}
