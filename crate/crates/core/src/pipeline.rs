//! Multi-layer attention-only prefill.
//!
//! Every layer projects the hidden states, runs attention per head (dense or
//! block-sparse) and concatenates the heads into the next hidden states. In
//! the sparse path, head `h` of layer `ℓ` fuses its criticality scores with
//! head `h` of layer `ℓ − 1`.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{dense_causal_attention, project};
use crate::criticality::{fuse, raw_criticality, segment_representatives, CriticalityMatrix};
use crate::error::{Error, Result};
use crate::flops::{layer_flops, FlopReport};
use crate::matrix::{Element, ElementWidth, HeadGeometry, Matrix};
use crate::pruned::{dense_fallback_policy, pruned_attention, PrunedAttnConfig};
use crate::rng::RngSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Pruned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// Per-layer projection weights plus head layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub geometry: HeadGeometry,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Element> ModelBundle<T> {
    pub fn new(geometry: HeadGeometry, layers: Vec<LayerWeights<T>>) -> Result<Self> {
        let d = geometry.model_dim();
        for (i, l) in layers.iter().enumerate() {
            for (name, w) in [("w_q", &l.w_q), ("w_k", &l.w_k), ("w_v", &l.w_v)] {
                if w.shape() != (d, d) {
                    return Err(Error::config(format!(
                        "layer {i} {name} is {}x{}, expected {d}x{d}",
                        w.rows(),
                        w.cols()
                    )));
                }
            }
        }
        Ok(Self { geometry, layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn element_width(&self) -> ElementWidth {
        T::WIDTH
    }
}

/// I.i.d. normal weights scaled by `1/√model_dim`, drawn layer by layer in
/// `w_q, w_k, w_v` order.
pub fn gen_synthetic_model<T: Element>(geometry: HeadGeometry, layers: usize, rng: RngSpec) -> ModelBundle<T> {
    let d = geometry.model_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut g = rng.generator();
    let layers = (0..layers)
        .map(|_| LayerWeights {
            w_q: g.normal_matrix(d, d, scale),
            w_k: g.normal_matrix(d, d, scale),
            w_v: g.normal_matrix(d, d, scale),
        })
        .collect();
    ModelBundle { geometry, layers }
}

/// Standard normal `n × model_dim` hidden states.
pub fn synthetic_input<T: Element>(n: usize, model_dim: usize, rng: RngSpec) -> Matrix<T> {
    rng.generator().normal_matrix(n, model_dim, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillOptions {
    pub mode: Mode,
    /// Add each layer's attention output to its input.
    pub residual: bool,
    /// Run dense attention when the budget already covers the sequence.
    pub allow_fallback: bool,
    /// Layers exempt from pruning in pruned mode.
    pub dense_layers: Vec<usize>,
    /// Blend each layer's scores with the previous layer's.
    pub fusion: bool,
    /// Keep per-layer hidden states and fusion inputs in the trace.
    pub record: bool,
}

impl PrefillOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            residual: false,
            allow_fallback: true,
            dense_layers: Vec::new(),
            fusion: true,
            record: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub sparse: bool,
    /// Output hidden states of this layer (recorded runs only).
    pub hidden: Option<Matrix<T>>,
    /// Per-head scores before fusion.
    pub raw_scores: Vec<CriticalityMatrix<T>>,
    /// Per-head scores after fusion, as consumed by pruned attention.
    pub scores: Vec<CriticalityMatrix<T>>,
    /// The previous-layer scores handed to fusion (recorded runs only).
    pub fusion_input: Option<Vec<CriticalityMatrix<T>>>,
    /// Scored (query, key) pairs summed over heads.
    pub pairs: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct PrefillResult<T> {
    pub hidden: Matrix<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub flops: FlopReport,
}

struct HeadResult<T> {
    output: Matrix<T>,
    raw: Option<CriticalityMatrix<T>>,
    fused: Option<CriticalityMatrix<T>>,
    pairs: u64,
}

pub fn prefill<T: Element>(
    model: &ModelBundle<T>,
    x0: &Matrix<T>,
    cfg: &PrunedAttnConfig,
    opts: &PrefillOptions,
) -> Result<PrefillResult<T>> {
    let geometry = model.geometry;
    let (n, md) = x0.shape();
    if md != geometry.model_dim() {
        return Err(Error::config(format!(
            "input has {md} columns, model_dim is {}",
            geometry.model_dim()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("prefill over zero tokens"));
    }
    cfg.validate()?;
    let pruning = opts.mode == Mode::Pruned && !(opts.allow_fallback && dense_fallback_policy(n, cfg));
    let head_dim = geometry.head_dim;
    let scale = T::one() / T::from_f64(head_dim as f64).sqrt();

    let mut x = x0.clone();
    let mut prev: Option<Vec<CriticalityMatrix<T>>> = None;
    let mut traces = Vec::with_capacity(model.n_layers());
    let mut per_layer_flops = Vec::with_capacity(model.n_layers());

    for (layer, w) in model.layers.iter().enumerate() {
        let started = Instant::now();
        let sparse = pruning && !opts.dense_layers.contains(&layer);
        let p = project(&x, &w.w_q, &w.w_k, &w.w_v)?;
        let prev_scores = if sparse && opts.fusion { prev.take() } else { None };

        let heads: Vec<HeadResult<T>> = (0..geometry.n_heads)
            .into_par_iter()
            .map(|h| {
                let (q, k, v) = (p.q.head(h, head_dim)?, p.k.head(h, head_dim)?, p.v.head(h, head_dim)?);
                if !sparse {
                    let o = dense_causal_attention(q, k, v, scale, false)?;
                    return Ok(HeadResult {
                        output: o.output,
                        raw: None,
                        fused: None,
                        pairs: o.pairs,
                    });
                }
                let reps = segment_representatives(q, cfg.segment_size, k, cfg.block_size)?;
                let raw = raw_criticality(&reps, cfg.scale_logits)?;
                let fused = match prev_scores.as_ref() {
                    Some(prev) => fuse(&raw, &prev[h], cfg.alpha)?,
                    None => raw.clone(),
                };
                let o = pruned_attention(q, k, v, &fused, cfg, false)?;
                Ok(HeadResult {
                    output: o.output,
                    raw: Some(raw),
                    fused: Some(fused),
                    pairs: o.pairs,
                })
            })
            .collect::<Result<_>>()?;

        let mut next = Matrix::zeros(n, md);
        for (h, head) in heads.iter().enumerate() {
            for i in 0..n {
                next.row_mut(i)[h * head_dim..(h + 1) * head_dim].copy_from_slice(head.output.row(i));
            }
        }
        if opts.residual {
            for (o, &r) in next.data_mut().iter_mut().zip(x.data()) {
                *o = *o + r;
            }
        }
        x = next;

        let pairs = heads.iter().map(|h| h.pairs).sum();
        let (raw_scores, scores): (Vec<_>, Vec<_>) = heads
            .into_iter()
            .filter_map(|h| Some((h.raw?, h.fused?)))
            .unzip();
        per_layer_flops.push(layer_flops(n, geometry, cfg, sparse));
        traces.push(LayerTrace {
            sparse,
            hidden: opts.record.then(|| x.clone()),
            raw_scores,
            scores: scores.clone(),
            fusion_input: if opts.record { prev_scores } else { None },
            pairs,
            elapsed: started.elapsed(),
        });
        prev = sparse.then_some(scores);
    }

    Ok(PrefillResult {
        hidden: x,
        layers: traces,
        flops: FlopReport::from_layers(opts.mode, n, geometry, per_layer_flops),
    })
}
