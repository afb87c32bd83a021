//! Seeded splitmix64 generator with Box–Muller normals.
//!
//! The stream is fully specified so that other implementations can reproduce
//! synthetic data bit for bit:
//!
//! * state advances by `0x9E3779B97F4A7C15`, output is the standard splitmix64 mix;
//! * a uniform is `((x >> 11) + 1) * 2^-53`, which lies in `(0, 1]`;
//! * each normal consumes two uniforms `u1, u2` and returns
//!   `sqrt(-2 ln u1) * cos(2π u2)`; the sine branch is discarded.

use serde::{Deserialize, Serialize};

use crate::matrix::{Element, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn generator(&self) -> SplitMix64 {
        SplitMix64::new(self.seed)
    }

    /// Derives an independent stream for a labelled sub-task.
    pub fn fork(&self, stream: u64) -> RngSpec {
        let mut g = SplitMix64::new(self.seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
        RngSpec { seed: g.next_u64() }
    }
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `(0, 1]`.
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..bound`. `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        self.next_u64() % bound
    }

    /// Matrix of i.i.d. `N(0, scale²)` entries filled in row-major order.
    pub fn normal_matrix<T: Element>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64(self.next_normal() * scale))
    }

    pub fn uniform_matrix<T: Element>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from_f64(lo + (hi - lo) * self.next_uniform()))
    }
}
