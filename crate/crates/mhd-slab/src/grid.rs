//! Grid planning: wavenumber tables, vertical basis matrices, dealias masks.
//!
//! The domain is the slab `[0, L1) x [0, L2) x [0, L3]`, periodic in the two
//! horizontal directions and wall-bounded vertically. Collocation points are
//! `x_i = n L_i / N_i` horizontally and `x3 = n L3 / (N3 - 1)` vertically, so
//! the vertical grid contains both walls.
//!
//! Vertical expansions live on the shared mode ladder `j = 0 .. N3-1`:
//! cosine fields carry all `N3` modes, sine fields carry `j = 1 .. N3-2`
//! (the endpoint slots of a sine coefficient array are structurally zero).
//! The top cosine mode `j = N3-1` differentiates onto a sine mode that is
//! identically zero on this grid, so every operator that couples the two
//! ladders uses an effective wavenumber that vanishes in that slot.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::MhdError;
use crate::Result;

/// Immutable description of the discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Fraction of the mode range kept when dealiasing products (2/3 rule by default).
    pub dealias_fraction: f64,
}

impl GridSpec {
    pub fn new(n1: usize, n2: usize, n3: usize, l1: f64, l2: f64, l3: f64) -> Self {
        GridSpec {
            n1,
            n2,
            n3,
            l1,
            l2,
            l3,
            dealias_fraction: 2.0 / 3.0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.n3)
    }

    fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n1 % 2 != 0 {
            return Err(MhdError::InvalidSpec(format!(
                "n1 = {} must be even and >= 2",
                self.n1
            )));
        }
        if self.n2 < 2 || self.n2 % 2 != 0 {
            return Err(MhdError::InvalidSpec(format!(
                "n2 = {} must be even and >= 2",
                self.n2
            )));
        }
        if self.n3 < 4 {
            return Err(MhdError::InvalidSpec(format!("n3 = {} must be >= 4", self.n3)));
        }
        for (name, l) in [("l1", self.l1), ("l2", self.l2), ("l3", self.l3)] {
            if !(l.is_finite() && l > 0.0) {
                return Err(MhdError::InvalidSpec(format!("{name} = {l} must be positive")));
            }
        }
        if !(self.dealias_fraction > 0.0 && self.dealias_fraction <= 1.0) {
            return Err(MhdError::InvalidSpec(format!(
                "dealias_fraction = {} must lie in (0, 1]",
                self.dealias_fraction
            )));
        }
        Ok(())
    }
}

/// Planned grid: wavenumbers, vertical transform matrices, FFT plans.
///
/// Shared immutably (`Arc`) by every field living on it.
pub struct Grid {
    pub spec: GridSpec,
    /// Scaled horizontal wavenumbers `2 pi n / L1` in FFT storage order.
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    /// Integer horizontal mode numbers in FFT storage order (`0..N/2, -N/2..-1`).
    pub n1_modes: Vec<i64>,
    pub n2_modes: Vec<i64>,
    /// Effective vertical wavenumber coupling cosine mode `j` to sine mode `j`.
    /// Equals `j pi / L3` for `1 <= j <= N3-2` and zero in the endpoint slots.
    pub kappa: Vec<f64>,
    /// Collocation points.
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    /// Dealias keep-masks per direction.
    pub keep1: Vec<bool>,
    pub keep2: Vec<bool>,
    pub keep3: Vec<bool>,
    /// `int_0^L3 phi_j^2 dx3` for cosine modes (`L3` at j = 0, else `L3/2`).
    pub mode_weight_cos: Vec<f64>,
    /// Same for sine modes (zero in the structurally empty endpoint slots).
    pub mode_weight_sin: Vec<f64>,
    /// Trapezoid quadrature weights on the vertical grid (wall points halved).
    pub quad_w3: Vec<f64>,
    /// Vertical synthesis matrices, `samples = S * coeffs`.
    pub cos_syn: Array2<f64>,
    pub sin_syn: Array2<f64>,
    /// Vertical analysis matrices, `coeffs = A * samples`.
    pub cos_ana: Array2<f64>,
    pub sin_ana: Array2<f64>,
    pub(crate) fft1_fwd: Arc<dyn Fft<f64>>,
    pub(crate) fft1_inv: Arc<dyn Fft<f64>>,
    pub(crate) fft2_fwd: Arc<dyn Fft<f64>>,
    pub(crate) fft2_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("spec", &self.spec).finish()
    }
}

/// Validate a spec and precompute every table the transforms need.
pub fn plan_grid(spec: GridSpec) -> Result<Arc<Grid>> {
    spec.validate()?;
    let (n1, n2, n3) = spec.shape();

    let fft_modes = |n: usize| -> Vec<i64> {
        (0..n)
            .map(|i| if i <= n / 2 - 1 { i as i64 } else { i as i64 - n as i64 })
            .collect()
    };
    let n1_modes = fft_modes(n1);
    let n2_modes = fft_modes(n2);
    let k1: Vec<f64> = n1_modes
        .iter()
        .map(|&n| 2.0 * std::f64::consts::PI * n as f64 / spec.l1)
        .collect();
    let k2: Vec<f64> = n2_modes
        .iter()
        .map(|&n| 2.0 * std::f64::consts::PI * n as f64 / spec.l2)
        .collect();

    // Effective vertical wavenumber. The endpoint slots are zero: mode 0 has no
    // sine partner and the derivative of cosine mode N3-1 aliases to the null
    // function on this collocation grid.
    let m = n3 - 1;
    let kappa: Vec<f64> = (0..n3)
        .map(|j| {
            if j >= 1 && j <= n3 - 2 {
                j as f64 * std::f64::consts::PI / spec.l3
            } else {
                0.0
            }
        })
        .collect();

    let x1: Vec<f64> = (0..n1).map(|i| i as f64 * spec.l1 / n1 as f64).collect();
    let x2: Vec<f64> = (0..n2).map(|i| i as f64 * spec.l2 / n2 as f64).collect();
    let x3: Vec<f64> = (0..n3).map(|i| i as f64 * spec.l3 / m as f64).collect();

    let keep_h = |modes: &[i64], n: usize| -> Vec<bool> {
        let cut = spec.dealias_fraction * (n as f64 / 2.0) + 1e-12;
        modes.iter().map(|&nm| (nm.unsigned_abs() as f64) <= cut).collect()
    };
    let keep1 = keep_h(&n1_modes, n1);
    let keep2 = keep_h(&n2_modes, n2);
    let cut3 = spec.dealias_fraction * m as f64 + 1e-12;
    let keep3: Vec<bool> = (0..n3).map(|j| (j as f64) <= cut3).collect();

    let mode_weight_cos: Vec<f64> = (0..n3)
        .map(|j| if j == 0 { spec.l3 } else { spec.l3 / 2.0 })
        .collect();
    let mode_weight_sin: Vec<f64> = (0..n3)
        .map(|j| if j >= 1 && j <= n3 - 2 { spec.l3 / 2.0 } else { 0.0 })
        .collect();

    let h3 = spec.l3 / m as f64;
    let quad_w3: Vec<f64> = (0..n3)
        .map(|i| if i == 0 || i == n3 - 1 { 0.5 * h3 } else { h3 })
        .collect();

    // Discrete cosine/sine bases on the wall-inclusive grid. Analysis uses the
    // discrete orthogonality of DCT-I / DST-I, with the wall samples half
    // weighted on the cosine side.
    let mut cos_syn = Array2::<f64>::zeros((n3, n3));
    let mut sin_syn = Array2::<f64>::zeros((n3, n3));
    let mut cos_ana = Array2::<f64>::zeros((n3, n3));
    let mut sin_ana = Array2::<f64>::zeros((n3, n3));
    let mf = m as f64;
    for n in 0..n3 {
        for j in 0..n3 {
            let angle = std::f64::consts::PI * (j * n) as f64 / mf;
            cos_syn[[n, j]] = angle.cos();
            if j >= 1 && j <= n3 - 2 {
                sin_syn[[n, j]] = angle.sin();
            }
        }
    }
    for j in 0..n3 {
        let scale = if j == 0 || j == n3 - 1 { 1.0 / mf } else { 2.0 / mf };
        for n in 0..n3 {
            let endpoint = n == 0 || n == n3 - 1;
            let w = if endpoint { 0.5 } else { 1.0 };
            cos_ana[[j, n]] = scale * w * cos_syn[[n, j]];
            if j >= 1 && j <= n3 - 2 && !endpoint {
                sin_ana[[j, n]] = (2.0 / mf) * sin_syn[[n, j]];
            }
        }
    }

    let mut planner = FftPlanner::<f64>::new();
    let grid = Grid {
        spec,
        k1,
        k2,
        n1_modes,
        n2_modes,
        kappa,
        x1,
        x2,
        x3,
        keep1,
        keep2,
        keep3,
        mode_weight_cos,
        mode_weight_sin,
        quad_w3,
        cos_syn,
        sin_syn,
        cos_ana,
        sin_ana,
        fft1_fwd: planner.plan_fft_forward(n1),
        fft1_inv: planner.plan_fft_inverse(n1),
        fft2_fwd: planner.plan_fft_forward(n2),
        fft2_inv: planner.plan_fft_inverse(n2),
    };
    Ok(Arc::new(grid))
}

impl Grid {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.spec.shape()
    }

    /// Volume of the slab.
    pub fn volume(&self) -> f64 {
        self.spec.l1 * self.spec.l2 * self.spec.l3
    }

    /// Smallest collocation spacing, the advective CFL length.
    pub fn min_dx(&self) -> f64 {
        let d1 = self.spec.l1 / self.spec.n1 as f64;
        let d2 = self.spec.l2 / self.spec.n2 as f64;
        let d3 = self.spec.l3 / (self.spec.n3 - 1) as f64;
        d1.min(d2).min(d3)
    }

    /// Largest kept integer mode per direction `(|n1|, |n2|, j)`.
    pub fn dealias_cutoffs(&self) -> (usize, usize, usize) {
        let c1 = self
            .n1_modes
            .iter()
            .zip(&self.keep1)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n.unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        let c2 = self
            .n2_modes
            .iter()
            .zip(&self.keep2)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n.unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        let c3 = (0..self.spec.n3).filter(|&j| self.keep3[j]).max().unwrap_or(0);
        (c1, c2, c3)
    }
}
