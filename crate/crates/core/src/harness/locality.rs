//! Critical-set locality over synthetic or model-derived queries.

use std::path::PathBuf;

use serde::Serialize;

use crate::attention::project;
use crate::criticality::{locality_matrix, Horizon, LocalityGrid, LocalitySummary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model_io::load_model;
use crate::pipeline::synthetic_input;
use crate::rng::RngSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum QuerySource {
    /// Random walk: each query is the previous one plus `N(0, sigma²)` noise.
    Drift { sigma: f64 },
    /// Independent standard normal queries.
    Iid,
    /// First layer, given head, of a saved model over standard normal inputs.
    Model { path: PathBuf, head: usize },
}

#[derive(Debug, Clone)]
pub struct LocalityParams {
    pub n: usize,
    pub head_dim: usize,
    pub top_k: usize,
    pub stride: usize,
    pub horizon: Horizon,
    pub source: QuerySource,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalityReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub source: QuerySource,
    pub n: usize,
    pub k: usize,
    pub stride: usize,
    pub horizon: Horizon,
    pub seed: u64,
    pub summary: LocalitySummary,
    #[serde(skip)]
    pub grid: LocalityGrid,
}

/// Drifting queries and i.i.d. keys.
pub fn drifting_queries(n: usize, d: usize, sigma: f64, rng: RngSpec) -> (Matrix<f32>, Matrix<f32>) {
    let mut g = rng.generator();
    let keys: Matrix<f32> = g.normal_matrix(n, d, 1.0);
    let mut walk: Vec<f64> = (0..d).map(|_| g.next_normal()).collect();
    let mut q = Matrix::zeros(n, d);
    for i in 0..n {
        if i > 0 {
            walk.iter_mut().for_each(|x| *x += sigma * g.next_normal());
        }
        for (c, &x) in walk.iter().enumerate() {
            q.set(i, c, x as f32);
        }
    }
    (q, keys)
}

pub fn iid_queries(n: usize, d: usize, rng: RngSpec) -> (Matrix<f32>, Matrix<f32>) {
    let mut g = rng.generator();
    let keys = g.normal_matrix(n, d, 1.0);
    (g.normal_matrix(n, d, 1.0), keys)
}

pub fn run(params: &LocalityParams) -> Result<LocalityReport> {
    let (n, d) = (params.n, params.head_dim);
    if params.top_k > n {
        return Err(Error::InvalidArgument(format!("k = {} exceeds n = {n}", params.top_k)));
    }
    let rng = RngSpec::new(params.seed);
    let (q, k) = match &params.source {
        QuerySource::Drift { sigma } => drifting_queries(n, d, *sigma, rng),
        QuerySource::Iid => iid_queries(n, d, rng),
        QuerySource::Model { path, head } => {
            let model = load_model::<f32>(path)?;
            let layer = model
                .layers
                .first()
                .ok_or_else(|| Error::InvalidArgument("model has no layers".into()))?;
            let x = synthetic_input(n, model.geometry.model_dim(), rng);
            let p = project(&x, &layer.w_q, &layer.w_k, &layer.w_v)?;
            let hd = model.geometry.head_dim;
            (p.q.head(*head, hd)?.to_matrix(), p.k.head(*head, hd)?.to_matrix())
        }
    };
    let grid = locality_matrix(q.view(), k.view(), params.top_k, params.stride, params.horizon)?;
    Ok(LocalityReport {
        schema_version: super::SCHEMA_VERSION,
        command: "locality",
        source: params.source.clone(),
        n,
        k: params.top_k,
        stride: params.stride,
        horizon: params.horizon,
        seed: params.seed,
        summary: grid.summary(),
        grid,
    })
}
