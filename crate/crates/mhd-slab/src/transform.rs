//! Transforms between coefficient space and collocation samples.
//!
//! Horizontal directions: unnormalized complex FFTs, with the `1/(N1 N2)`
//! factor folded into analysis so stored coefficients are series amplitudes.
//! Vertical direction: exact DCT-I / DST-I expressed as dense matrix products
//! against the basis matrices planned on the grid. For sine-tagged data the
//! wall samples are identically zero and the analysis reproduces any such
//! sample set exactly; cosine analysis is exact for arbitrary samples.

use std::sync::Arc;

use ndarray::{Array3, Axis, Zip};
use num_complex::Complex64;
use rustfft::Fft;

use crate::field::{SpectralField, VerticalBasis};
use crate::grid::Grid;

fn fft_along(data: &mut Array3<Complex64>, axis: Axis, fft: &Arc<dyn Fft<f64>>) {
    let n = data.len_of(axis);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    Zip::from(data.lanes_mut(axis)).for_each(|mut lane| {
        for (dst, src) in buf.iter_mut().zip(lane.iter()) {
            *dst = *src;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, src) in lane.iter_mut().zip(&buf) {
            *dst = *src;
        }
    });
}

fn vertical_apply(data: &mut Array3<Complex64>, matrix: &ndarray::Array2<f64>) {
    let n3 = data.len_of(Axis(2));
    let mut buf = vec![Complex64::new(0.0, 0.0); n3];
    Zip::from(data.lanes_mut(Axis(2))).for_each(|mut lane| {
        for (dst, src) in buf.iter_mut().zip(lane.iter()) {
            *dst = *src;
        }
        for (r, dst) in lane.iter_mut().enumerate() {
            let row = matrix.row(r);
            let mut re = 0.0;
            let mut im = 0.0;
            for (m, v) in row.iter().zip(buf.iter()) {
                re += m * v.re;
                im += m * v.im;
            }
            *dst = Complex64::new(re, im);
        }
    });
}

/// Evaluate a coefficient field on the collocation grid.
pub fn to_physical(field: &SpectralField) -> Array3<f64> {
    let grid = field.grid();
    let mut work = field.coeff.clone();
    let syn = match field.basis() {
        VerticalBasis::Cosine => &grid.cos_syn,
        VerticalBasis::Sine => &grid.sin_syn,
    };
    vertical_apply(&mut work, syn);
    fft_along(&mut work, Axis(1), &grid.fft2_inv);
    fft_along(&mut work, Axis(0), &grid.fft1_inv);
    work.mapv(|c| c.re)
}

/// Analyze collocation samples into the given vertical basis.
///
/// Sine analysis ignores the wall samples; it is an exact inverse of
/// `to_physical` on fields whose wall samples vanish.
pub fn to_spectral(grid: &Arc<Grid>, samples: &Array3<f64>, basis: VerticalBasis) -> SpectralField {
    assert_eq!(samples.dim(), grid.shape(), "sample array shape");
    let mut work = samples.mapv(|v| Complex64::new(v, 0.0));
    fft_along(&mut work, Axis(0), &grid.fft1_fwd);
    fft_along(&mut work, Axis(1), &grid.fft2_fwd);
    let norm = 1.0 / (grid.spec.n1 * grid.spec.n2) as f64;
    work.mapv_inplace(|c| c * norm);
    let ana = match basis {
        VerticalBasis::Cosine => &grid.cos_ana,
        VerticalBasis::Sine => &grid.sin_ana,
    };
    vertical_apply(&mut work, ana);
    SpectralField::from_coeff(grid, basis, work)
}

/// Physical samples of all three components.
pub fn to_physical_vector(v: &crate::field::SpectralVectorField) -> [Array3<f64>; 3] {
    [
        to_physical(&v.c[0]),
        to_physical(&v.c[1]),
        to_physical(&v.c[2]),
    ]
}
