//! Wall-clock and FLOP sweep over sequence lengths.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flops::FlopReport;
use crate::matrix::{HeadGeometry, Matrix};
use crate::model_io::load_model;
use crate::pipeline::{gen_synthetic_model, prefill, synthetic_input, ModelBundle, Mode, PrefillOptions};
use crate::pruned::PrunedAttnConfig;
use crate::rng::RngSpec;

#[derive(Debug, Clone)]
pub struct BenchParams {
    pub seq_lens: Vec<usize>,
    pub layers: usize,
    pub geometry: HeadGeometry,
    pub cfg: PrunedAttnConfig,
    pub modes: Vec<Mode>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Report max-abs deviation of pruned output from dense output.
    pub verify: bool,
    /// Refuse runs whose `n · model_dim` exceeds this.
    pub max_elements: usize,
    pub model: Option<PathBuf>,
    pub residual: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub schema_version: u32,
    pub mode: Mode,
    pub n: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub config: PrunedAttnConfig,
    pub seed: u64,
    pub repeats: usize,
    /// Median total prefill time in seconds.
    pub wall_clock_s: f64,
    /// Median per-layer time in seconds.
    pub per_layer_s: Vec<f64>,
    pub flops: FlopReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_deviation: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        (xs[m / 2 - 1] + xs[m / 2]) / 2.0
    }
}

fn timed_runs(
    model: &ModelBundle<f32>,
    x: &Matrix<f32>,
    cfg: &PrunedAttnConfig,
    opts: &PrefillOptions,
    warmup: usize,
    repeats: usize,
) -> Result<(Matrix<f32>, FlopReport, f64, Vec<f64>)> {
    for _ in 0..warmup {
        prefill(model, x, cfg, opts)?;
    }
    let mut totals = Vec::with_capacity(repeats);
    let mut per_layer = vec![Vec::with_capacity(repeats); model.n_layers()];
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let r = prefill(model, x, cfg, opts)?;
        totals.push(start.elapsed().as_secs_f64());
        for (l, t) in r.layers.iter().enumerate() {
            per_layer[l].push(t.elapsed.as_secs_f64());
        }
        last = Some(r);
    }
    let r = last.expect("at least one repeat");
    Ok((r.hidden, r.flops, median(totals), per_layer.into_iter().map(median).collect()))
}

/// Runs the sweep, handing each result to `sink` as soon as it is ready.
pub fn run(params: &BenchParams, mut sink: impl FnMut(&BenchResult) -> Result<()>) -> Result<Vec<BenchResult>> {
    params.cfg.validate()?;
    let rng = RngSpec::new(params.seed);
    let model = match &params.model {
        Some(path) => load_model::<f32>(path)?,
        None => gen_synthetic_model(params.geometry, params.layers, rng.fork(0)),
    };
    let geometry = model.geometry;
    let mut results = Vec::new();
    for &n in &params.seq_lens {
        let elements = n.saturating_mul(geometry.model_dim());
        if elements > params.max_elements {
            return Err(Error::InvalidArgument(format!(
                "n·model_dim = {elements} exceeds the element budget {}",
                params.max_elements
            )));
        }
        let x = synthetic_input::<f32>(n, geometry.model_dim(), rng.fork(n as u64));
        let mut dense_hidden: Option<Matrix<f32>> = None;
        let mut modes = params.modes.clone();
        if params.verify && modes.contains(&Mode::Pruned) && !modes.contains(&Mode::Dense) {
            modes.insert(0, Mode::Dense);
        }
        modes.sort_by_key(|m| *m != Mode::Dense);
        for mode in modes {
            let mut opts = PrefillOptions::new(mode);
            opts.residual = params.residual;
            let (hidden, flops, total, per_layer) =
                timed_runs(&model, &x, &params.cfg, &opts, params.warmup, params.repeats)?;
            let deviation = match mode {
                Mode::Dense => {
                    dense_hidden = Some(hidden);
                    None
                }
                Mode::Pruned if params.verify => dense_hidden.as_ref().and_then(|d| d.max_abs_diff(&hidden)),
                Mode::Pruned => None,
            };
            let result = BenchResult {
                schema_version: super::SCHEMA_VERSION,
                mode,
                n,
                layers: model.n_layers(),
                n_heads: geometry.n_heads,
                head_dim: geometry.head_dim,
                config: params.cfg,
                seed: params.seed,
                repeats: params.repeats.max(1),
                wall_clock_s: total,
                per_layer_s: per_layer,
                flops,
                max_abs_deviation: deviation,
            };
            sink(&result)?;
            results.push(result);
        }
    }
    Ok(results)
}
