//! Spectral fields: complex coefficient arrays tagged with a vertical basis.

use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;

/// Vertical expansion family of a scalar field.
///
/// `Cosine` fields have vanishing normal derivative on the walls, `Sine`
/// fields vanish there. Vertical differentiation flips the tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerticalBasis {
    Cosine,
    Sine,
}

impl VerticalBasis {
    pub fn flip(self) -> Self {
        match self {
            VerticalBasis::Cosine => VerticalBasis::Sine,
            VerticalBasis::Sine => VerticalBasis::Cosine,
        }
    }
}

/// Scalar field in coefficient space.
///
/// `coeff[[i1, i2, j]]` multiplies `exp(i k1 x1) exp(i k2 x2) phi_j(x3)` with
/// `phi_j` a cosine or sine mode depending on the tag. Real fields keep the
/// horizontal conjugate symmetry `coeff(k) = conj(coeff(-k))`. Sine-tagged
/// arrays have structurally zero endpoint slots `j = 0` and `j = N3-1`.
#[derive(Debug, Clone)]
pub struct SpectralField {
    grid: Arc<Grid>,
    basis: VerticalBasis,
    pub coeff: Array3<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: &Arc<Grid>, basis: VerticalBasis) -> Self {
        let (n1, n2, n3) = grid.shape();
        SpectralField {
            grid: Arc::clone(grid),
            basis,
            coeff: Array3::zeros((n1, n2, n3)),
        }
    }

    pub fn from_coeff(grid: &Arc<Grid>, basis: VerticalBasis, coeff: Array3<Complex64>) -> Self {
        assert_eq!(coeff.dim(), grid.shape(), "coefficient array shape");
        SpectralField {
            grid: Arc::clone(grid),
            basis,
            coeff,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn basis(&self) -> VerticalBasis {
        self.basis
    }

    pub fn scale(&mut self, a: f64) {
        self.coeff.mapv_inplace(|c| c * a);
    }

    /// `self += a * other`; bases and grids must agree.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) {
        assert!(Arc::ptr_eq(&self.grid, &other.grid), "fields on different grids");
        assert_eq!(self.basis, other.basis, "axpy across bases");
        ndarray::Zip::from(&mut self.coeff)
            .and(&other.coeff)
            .for_each(|s, &o| *s += o * a);
    }

    pub fn is_finite(&self) -> bool {
        self.coeff.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Largest coefficient magnitude.
    pub fn max_coeff(&self) -> f64 {
        self.coeff.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Three-component field with per-component vertical tags.
///
/// Velocity-like fields are `(Cosine, Cosine, Sine)`; curls come out as
/// `(Sine, Sine, Cosine)`.
#[derive(Debug, Clone)]
pub struct SpectralVectorField {
    pub c: [SpectralField; 3],
}

impl SpectralVectorField {
    /// Zero field with the slip-compatible `(Cosine, Cosine, Sine)` layout.
    pub fn zeros_velocity(grid: &Arc<Grid>) -> Self {
        SpectralVectorField {
            c: [
                SpectralField::zeros(grid, VerticalBasis::Cosine),
                SpectralField::zeros(grid, VerticalBasis::Cosine),
                SpectralField::zeros(grid, VerticalBasis::Sine),
            ],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.c[0].grid()
    }

    pub fn bases(&self) -> [VerticalBasis; 3] {
        [self.c[0].basis(), self.c[1].basis(), self.c[2].basis()]
    }

    pub fn is_velocity_like(&self) -> bool {
        self.bases()
            == [
                VerticalBasis::Cosine,
                VerticalBasis::Cosine,
                VerticalBasis::Sine,
            ]
    }

    pub fn scale(&mut self, a: f64) {
        for f in &mut self.c {
            f.scale(a);
        }
    }

    pub fn axpy(&mut self, a: f64, other: &SpectralVectorField) {
        for i in 0..3 {
            self.c[i].axpy(a, &other.c[i]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(SpectralField::is_finite)
    }

    pub fn max_coeff(&self) -> f64 {
        self.c.iter().map(SpectralField::max_coeff).fold(0.0, f64::max)
    }
}
