//! Coefficient-space operators: derivatives, Leray projection, horizontal
//! fractional multipliers, dealiasing, and exact L2 pairings.

use ndarray::Zip;
use num_complex::Complex64;

use crate::field::{SpectralField, SpectralVectorField, VerticalBasis};

/// Partial derivative along `axis` (1, 2 or 3).
///
/// Horizontal derivatives multiply by `i k`. The vertical derivative maps
/// between the cosine and sine ladders with the effective wavenumber, so the
/// result's basis tag is flipped; content in the top cosine slot differentiates
/// onto a sine mode invisible on the grid and is dropped.
pub fn derivative(f: &SpectralField, axis: usize) -> SpectralField {
    let grid = f.grid().clone();
    match axis {
        1 => {
            let mut out = f.clone();
            for (i1, &k) in grid.k1.iter().enumerate() {
                let ik = Complex64::new(0.0, k);
                out.coeff.index_axis_mut(ndarray::Axis(0), i1).mapv_inplace(|c| c * ik);
            }
            out
        }
        2 => {
            let mut out = f.clone();
            for (i2, &k) in grid.k2.iter().enumerate() {
                let ik = Complex64::new(0.0, k);
                out.coeff.index_axis_mut(ndarray::Axis(1), i2).mapv_inplace(|c| c * ik);
            }
            out
        }
        3 => {
            let mut out = SpectralField::zeros(&grid, f.basis().flip());
            let n3 = grid.spec.n3;
            match f.basis() {
                // d3 cos(j pi x/L) = -kappa_j sin(j pi x/L)
                VerticalBasis::Cosine => {
                    for j in 1..n3 - 1 {
                        let k = grid.kappa[j];
                        Zip::from(out.coeff.index_axis_mut(ndarray::Axis(2), j))
                            .and(f.coeff.index_axis(ndarray::Axis(2), j))
                            .for_each(|o, &c| *o = c * (-k));
                    }
                }
                // d3 sin(j pi x/L) = +kappa_j cos(j pi x/L)
                VerticalBasis::Sine => {
                    for j in 1..n3 - 1 {
                        let k = grid.kappa[j];
                        Zip::from(out.coeff.index_axis_mut(ndarray::Axis(2), j))
                            .and(f.coeff.index_axis(ndarray::Axis(2), j))
                            .for_each(|o, &c| *o = c * k);
                    }
                }
            }
            out
        }
        _ => panic!("derivative axis must be 1, 2 or 3"),
    }
}

/// Divergence of a velocity-like `(Cosine, Cosine, Sine)` field; cosine tagged.
pub fn divergence(v: &SpectralVectorField) -> SpectralField {
    assert!(v.is_velocity_like(), "divergence expects (Cosine, Cosine, Sine) components");
    let grid = v.grid().clone();
    let mut out = SpectralField::zeros(&grid, VerticalBasis::Cosine);
    Zip::indexed(&mut out.coeff)
        .and(&v.c[0].coeff)
        .and(&v.c[1].coeff)
        .and(&v.c[2].coeff)
        .for_each(|(i1, i2, j), o, &a, &b, &c| {
            let ik1 = Complex64::new(0.0, grid.k1[i1]);
            let ik2 = Complex64::new(0.0, grid.k2[i2]);
            *o = a * ik1 + b * ik2 + c * grid.kappa[j];
        });
    out
}

/// Gradient of a cosine-tagged scalar; velocity-like layout.
pub fn gradient(p: &SpectralField) -> SpectralVectorField {
    assert_eq!(p.basis(), VerticalBasis::Cosine, "gradient expects a cosine scalar");
    let grid = p.grid().clone();
    let mut out = SpectralVectorField::zeros_velocity(&grid);
    Zip::indexed(&p.coeff).for_each(|(i1, i2, j), &c| {
        out.c[0].coeff[[i1, i2, j]] = c * Complex64::new(0.0, grid.k1[i1]);
        out.c[1].coeff[[i1, i2, j]] = c * Complex64::new(0.0, grid.k2[i2]);
        out.c[2].coeff[[i1, i2, j]] = c * (-grid.kappa[j]);
    });
    out
}

/// Remove the gradient part so the result is exactly divergence free.
///
/// Per mode the map subtracts `grad q` where `q` solves the Poisson problem
/// with the mode's effective wavenumber `(k1, k2, kappa_j)`; the mean mode is
/// untouched. Idempotent, and the identity on divergence-free fields.
pub fn leray_project(v: &SpectralVectorField) -> SpectralVectorField {
    assert!(v.is_velocity_like(), "projection expects (Cosine, Cosine, Sine) components");
    let grid = v.grid().clone();
    let mut out = v.clone();
    let (n1, n2, n3) = grid.shape();
    for i1 in 0..n1 {
        let k1 = grid.k1[i1];
        for i2 in 0..n2 {
            let k2 = grid.k2[i2];
            for j in 0..n3 {
                let kap = grid.kappa[j];
                let kk = k1 * k1 + k2 * k2 + kap * kap;
                if kk == 0.0 {
                    continue;
                }
                let d = out.c[0].coeff[[i1, i2, j]] * Complex64::new(0.0, k1)
                    + out.c[1].coeff[[i1, i2, j]] * Complex64::new(0.0, k2)
                    + out.c[2].coeff[[i1, i2, j]] * kap;
                let q = -d / kk;
                out.c[0].coeff[[i1, i2, j]] -= q * Complex64::new(0.0, k1);
                out.c[1].coeff[[i1, i2, j]] -= q * Complex64::new(0.0, k2);
                out.c[2].coeff[[i1, i2, j]] += q * kap;
            }
        }
    }
    out
}

/// Horizontal fractional Laplacian `|k_h|^s`, acting mode-wise.
///
/// The horizontal-mean column `k_h = 0` is zeroed for every `s < 0` (and for
/// `s > 0` the factor vanishes there anyway), so negative powers are always
/// well defined on the complement of the horizontal mean.
pub fn lambda_h_pow(f: &SpectralField, s: f64) -> SpectralField {
    let grid = f.grid().clone();
    let mut out = f.clone();
    Zip::indexed(&mut out.coeff).for_each(|(i1, i2, _), c| {
        let kh2 = grid.k1[i1] * grid.k1[i1] + grid.k2[i2] * grid.k2[i2];
        if kh2 == 0.0 {
            if s != 0.0 {
                *c = Complex64::new(0.0, 0.0);
            }
        } else {
            *c *= kh2.powf(0.5 * s);
        }
    });
    out
}

/// Zero every mode outside the grid's dealias mask (2/3 rule by default).
pub fn dealias(f: &mut SpectralField) {
    let grid = f.grid().clone();
    Zip::indexed(&mut f.coeff).for_each(|(i1, i2, j), c| {
        if !(grid.keep1[i1] && grid.keep2[i2] && grid.keep3[j]) {
            *c = Complex64::new(0.0, 0.0);
        }
    });
}

pub fn dealias_vector(v: &mut SpectralVectorField) {
    for f in &mut v.c {
        dealias(f);
    }
}

/// Zero the horizontal-mean column `k_h = 0`.
pub fn zero_horizontal_mean(f: &mut SpectralField) {
    let n3 = f.grid().spec.n3;
    for j in 0..n3 {
        f.coeff[[0, 0, j]] = Complex64::new(0.0, 0.0);
    }
}

pub fn zero_horizontal_mean_vector(v: &mut SpectralVectorField) {
    for f in &mut v.c {
        zero_horizontal_mean(f);
    }
}

/// Exact L2 inner product of two real fields sharing grid and basis.
pub fn l2_inner(f: &SpectralField, g: &SpectralField) -> f64 {
    assert_eq!(f.basis(), g.basis(), "inner product across bases");
    let grid = f.grid();
    let weights = match f.basis() {
        VerticalBasis::Cosine => &grid.mode_weight_cos,
        VerticalBasis::Sine => &grid.mode_weight_sin,
    };
    let mut acc = 0.0;
    Zip::indexed(&f.coeff).and(&g.coeff).for_each(|(_, _, j), &a, &b| {
        acc += (a * b.conj()).re * weights[j];
    });
    acc * grid.spec.l1 * grid.spec.l2
}

/// Squared L2 norm via the coefficient-space Parseval identity.
pub fn l2_norm_sq(f: &SpectralField) -> f64 {
    let grid = f.grid();
    let weights = match f.basis() {
        VerticalBasis::Cosine => &grid.mode_weight_cos,
        VerticalBasis::Sine => &grid.mode_weight_sin,
    };
    let mut acc = 0.0;
    Zip::indexed(&f.coeff).for_each(|(_, _, j), &a| {
        acc += a.norm_sqr() * weights[j];
    });
    acc * grid.spec.l1 * grid.spec.l2
}

pub fn l2_norm_sq_vector(v: &SpectralVectorField) -> f64 {
    v.c.iter().map(l2_norm_sq).sum()
}

pub fn l2_inner_vector(a: &SpectralVectorField, b: &SpectralVectorField) -> f64 {
    (0..3).map(|i| l2_inner(&a.c[i], &b.c[i])).sum()
}

/// Max of `sqrt(u1^2 + u2^2 + u3^2)` over the collocation grid.
pub fn max_vector_magnitude(v: &SpectralVectorField) -> f64 {
    let p = crate::transform::to_physical_vector(v);
    let mut m: f64 = 0.0;
    Zip::from(&p[0]).and(&p[1]).and(&p[2]).for_each(|&a, &b, &c| {
        m = m.max((a * a + b * b + c * c).sqrt());
    });
    m
}

/// Root mean square of the vector magnitude, `sqrt(||v||^2 / |Omega|)`.
pub fn rms_vector(v: &SpectralVectorField) -> f64 {
    (l2_norm_sq_vector(v) / v.grid().volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{plan_grid, Grid, GridSpec};
    use crate::transform::{to_physical, to_spectral};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid_2pi(n1: usize, n2: usize, n3: usize) -> Arc<Grid> {
        let tau = 2.0 * std::f64::consts::PI;
        plan_grid(GridSpec::new(n1, n2, n3, tau, tau, tau)).unwrap()
    }

    /// Random real field supported inside the dealias mask.
    fn random_field(grid: &Arc<Grid>, basis: VerticalBasis, seed: u64) -> SpectralField {
        let mut f = SpectralField::zeros(grid, basis);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n1, n2, n3) = grid.shape();
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for j in 0..n3 {
                    if grid.keep1[i1] && grid.keep2[i2] && grid.keep3[j] {
                        let lo = if basis == VerticalBasis::Sine { 1 } else { 0 };
                        if j >= lo && j <= n3 - 2 {
                            f.coeff[[i1, i2, j]] =
                                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                        }
                    }
                }
            }
        }
        // Real field: enforce conjugate symmetry.
        let coeff = f.coeff.clone();
        for ((i1, i2, j), c) in coeff.indexed_iter() {
            let m1 = (n1 - i1) % n1;
            let m2 = (n2 - i2) % n2;
            if (m1, m2) > (i1, i2) {
                f.coeff[[m1, m2, j]] = c.conj();
            }
        }
        for j in 0..n3 {
            let c = f.coeff[[0, 0, j]];
            f.coeff[[0, 0, j]] = Complex64::new(c.re, 0.0);
        }
        f
    }

    pub(crate) fn random_divfree(grid: &Arc<Grid>, seed: u64) -> SpectralVectorField {
        let mut v = SpectralVectorField {
            c: [
                random_field(grid, VerticalBasis::Cosine, seed),
                random_field(grid, VerticalBasis::Cosine, seed + 1),
                random_field(grid, VerticalBasis::Sine, seed + 2),
            ],
        };
        v = leray_project(&v);
        v
    }

    #[test]
    fn horizontal_derivative_of_plane_wave() {
        let g = grid_2pi(8, 8, 9);
        let mut samples = Array3::zeros(g.shape());
        for ((i1, _, _), v) in samples.indexed_iter_mut() {
            *v = (2.0 * g.x1[i1]).cos();
        }
        let f = to_spectral(&g, &samples, VerticalBasis::Cosine);
        let df = to_physical(&derivative(&f, 1));
        for ((i1, _, _), v) in df.indexed_iter() {
            let want = -2.0 * (2.0 * g.x1[i1]).sin();
            assert!((v - want).abs() < 1e-11);
        }
    }

    #[test]
    fn vertical_derivative_flips_basis_and_sign() {
        let g = grid_2pi(4, 4, 9);
        // f = cos(2 pi x3 / L3) => d3 f = -(2 pi / L3) sin(...)
        let mut f = SpectralField::zeros(&g, VerticalBasis::Cosine);
        f.coeff[[0, 0, 2]] = Complex64::new(1.0, 0.0);
        let df = derivative(&f, 3);
        assert_eq!(df.basis(), VerticalBasis::Sine);
        let want = -g.kappa[2];
        assert!((df.coeff[[0, 0, 2]] - Complex64::new(want, 0.0)).norm() < 1e-14);
        let back = derivative(&df, 3);
        assert_eq!(back.basis(), VerticalBasis::Cosine);
        // d33 = -kappa^2
        assert!((back.coeff[[0, 0, 2]].re + g.kappa[2] * g.kappa[2]).abs() < 1e-13);
    }

    #[test]
    fn second_derivative_matches_symbol() {
        let g = grid_2pi(8, 8, 9);
        let f = random_field(&g, VerticalBasis::Cosine, 5);
        let dd = derivative(&derivative(&f, 2), 2);
        let scale = f.max_coeff();
        for ((i1, i2, j), c) in dd.coeff.indexed_iter() {
            let want = f.coeff[[i1, i2, j]] * (-g.k2[i2] * g.k2[i2]);
            assert!((c - want).norm() <= 1e-13 * scale.max(1.0));
        }
    }

    #[test]
    fn leray_annihilates_gradients_and_fixes_divfree() {
        let g = grid_2pi(8, 8, 9);
        let p = random_field(&g, VerticalBasis::Cosine, 21);
        let gp = gradient(&p);
        let proj = leray_project(&gp);
        assert!(proj.max_coeff() <= 1e-12 * gp.max_coeff().max(1.0));

        let v = random_divfree(&g, 40);
        let again = leray_project(&v);
        let mut diff = again.clone();
        diff.axpy(-1.0, &v);
        assert!(diff.max_coeff() <= 1e-13 * v.max_coeff());
        let div = divergence(&v);
        assert!(div.max_coeff() <= 1e-12 * v.max_coeff());
    }

    #[test]
    fn leray_is_an_l2_contraction() {
        let g = grid_2pi(8, 8, 9);
        for seed in 0..5 {
            let v = SpectralVectorField {
                c: [
                    random_field(&g, VerticalBasis::Cosine, 100 + seed),
                    random_field(&g, VerticalBasis::Cosine, 200 + seed),
                    random_field(&g, VerticalBasis::Sine, 300 + seed),
                ],
            };
            let pv = leray_project(&v);
            assert!(l2_norm_sq_vector(&pv) <= l2_norm_sq_vector(&v) * (1.0 + 1e-13));
        }
    }

    #[test]
    fn lambda_scales_single_mode() {
        let g = grid_2pi(8, 8, 9);
        let mut f = SpectralField::zeros(&g, VerticalBasis::Cosine);
        f.coeff[[2, 0, 1]] = Complex64::new(1.0, 0.0); // |k_h| = 2
        let out = lambda_h_pow(&f, -0.95);
        let want = 2.0f64.powf(-0.95);
        assert!((out.coeff[[2, 0, 1]].re - want).abs() < 1e-14);
    }

    #[test]
    fn lambda_inverse_composes_to_identity_off_the_mean() {
        let g = grid_2pi(8, 8, 9);
        let mut f = random_field(&g, VerticalBasis::Cosine, 77);
        zero_horizontal_mean(&mut f);
        let back = lambda_h_pow(&lambda_h_pow(&f, 0.95), -0.95);
        let scale = f.max_coeff();
        for (a, b) in f.coeff.iter().zip(back.coeff.iter()) {
            assert!((a - b).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn lambda_zeroes_horizontal_mean_for_negative_power() {
        let g = grid_2pi(8, 8, 9);
        let mut f = SpectralField::zeros(&g, VerticalBasis::Cosine);
        f.coeff[[0, 0, 2]] = Complex64::new(1.0, 0.0);
        let out = lambda_h_pow(&f, -0.5);
        assert_eq!(out.coeff[[0, 0, 2]], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn dealias_is_idempotent_and_energy_nonincreasing() {
        let g = grid_2pi(8, 8, 9);
        let mut f = SpectralField::zeros(&g, VerticalBasis::Cosine);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        f.coeff.mapv_inplace(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0));
        let before = l2_norm_sq(&f);
        dealias(&mut f);
        let mid = l2_norm_sq(&f);
        assert!(mid <= before);
        // Boundary mode just outside the mask is gone.
        assert_eq!(f.coeff[[3, 0, 0]], Complex64::new(0.0, 0.0));
        let snapshot = f.clone();
        dealias(&mut f);
        for (a, b) in f.coeff.iter().zip(snapshot.coeff.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn parseval_matches_physical_quadrature() {
        let g = grid_2pi(8, 8, 9);
        for (basis, seed) in [(VerticalBasis::Cosine, 8u64), (VerticalBasis::Sine, 9u64)] {
            let mut f = random_field(&g, basis, seed);
            dealias(&mut f);
            let spectral = l2_norm_sq(&f);
            let phys = to_physical(&f);
            let mut quad = 0.0;
            let da = (g.spec.l1 / g.spec.n1 as f64) * (g.spec.l2 / g.spec.n2 as f64);
            for ((_, _, n), v) in phys.indexed_iter() {
                quad += v * v * da * g.quad_w3[n];
            }
            assert!(
                (spectral - quad).abs() <= 1e-12 * spectral.max(1e-30),
                "basis {basis:?}: parseval {spectral} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn inner_product_is_symmetric_and_compatible_with_norm() {
        let g = grid_2pi(8, 8, 9);
        let f = random_field(&g, VerticalBasis::Sine, 31);
        let h = random_field(&g, VerticalBasis::Sine, 32);
        let fg = l2_inner(&f, &h);
        let gf = l2_inner(&h, &f);
        assert!((fg - gf).abs() <= 1e-12 * fg.abs().max(1.0));
        assert!((l2_inner(&f, &f) - l2_norm_sq(&f)).abs() <= 1e-12 * l2_norm_sq(&f));
    }
}
