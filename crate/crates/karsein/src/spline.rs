//! Clamped uniform B-spline bases and the learnable edge activation
//! `phi(x) = w_phi * (B(x) + silu(x))`.
//!
//! The basis is evaluated with the Cox-de Boor triangular scheme over the
//! knot span containing `x`, so only the `order + 1` non-zero functions are
//! ever computed. Outside the domain every basis function is zero and the
//! SiLU path carries the signal.

use crate::error::{Error, Result};
use crate::matrix::{silu, Scalar};

/// Highest supported spline order; the configured grids use 1..=3.
pub const MAX_ORDER: usize = 7;

/// Uniform clamped B-spline basis of order `kappa` on `grid_size` intervals.
///
/// Knot vector length is `grid_size + 2*kappa + 1`: the `grid_size + 1`
/// equally spaced breakpoints of `[lo, hi]` plus `kappa` repeated boundary
/// knots at each end. That yields `grid_size + kappa` basis functions which
/// form a partition of unity on the closed domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    order: usize,
    grid_size: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Non-zero basis values at a point: entries `values[0..=order]` correspond
/// to basis indices `start..=start+order`.
#[derive(Debug, Clone, Copy)]
pub struct SpanValues {
    pub start: usize,
    pub values: [f64; MAX_ORDER + 1],
}

impl BSplineBasis {
    /// Builds the clamped uniform knot vector for `(g, kappa)` on `[lo, hi]`.
    pub fn uniform(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size < 1 {
            return Err(Error::config("spline grid size must be >= 1".to_string()));
        }
        if order < 1 || order > MAX_ORDER {
            return Err(Error::config(format!(
                "spline order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!(
                "spline domain must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let h = (hi - lo) / grid_size as f64;
        let mut knots = Vec::with_capacity(grid_size + 2 * order + 1);
        for _ in 0..order {
            knots.push(lo);
        }
        for i in 0..=grid_size {
            knots.push(lo + h * i as f64);
        }
        for _ in 0..order {
            knots.push(hi);
        }
        Ok(BSplineBasis {
            order,
            grid_size,
            lo,
            hi,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `g + kappa`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    #[inline]
    pub fn in_domain(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Knot span index for in-domain `x`: the largest `s` with
    /// `knots[s] <= x` and `knots[s+1] > knots[s]`, clamped at the top so
    /// `x = hi` lands in the last real interval.
    #[inline]
    fn find_span(&self, x: f64) -> usize {
        let h = (self.hi - self.lo) / self.grid_size as f64;
        let mut cell = ((x - self.lo) / h) as usize;
        if cell >= self.grid_size {
            cell = self.grid_size - 1;
        }
        self.order + cell
    }

    /// Non-zero basis values at `x`, or `None` when `x` is out of domain.
    ///
    /// Cox-de Boor triangular scheme: `values[j] = N_{start+j, kappa}(x)`.
    pub fn eval_span(&self, x: f64) -> Option<SpanValues> {
        if !self.in_domain(x) {
            return None;
        }
        let k = self.order;
        let span = self.find_span(x);
        let knots = &self.knots;
        let mut values = [0.0f64; MAX_ORDER + 1];
        let mut left = [0.0f64; MAX_ORDER + 1];
        let mut right = [0.0f64; MAX_ORDER + 1];
        values[0] = 1.0;
        for j in 1..=k {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Some(SpanValues {
            start: span - k,
            values,
        })
    }

    /// Non-zero basis values and first derivatives at `x`.
    ///
    /// Derivatives come from the standard recurrence
    /// `N'_{i,k} = k * (N_{i,k-1}/(t_{i+k}-t_i) - N_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))`
    /// with zero-denominator terms dropped.
    pub fn eval_span_with_grad(&self, x: f64) -> Option<(SpanValues, SpanValues)> {
        if !self.in_domain(x) {
            return None;
        }
        let k = self.order;
        let span = self.find_span(x);
        let knots = &self.knots;

        // one triangular pass, keeping the order k-1 row
        let mut values = [0.0f64; MAX_ORDER + 1];
        let mut lower = [0.0f64; MAX_ORDER + 1];
        let mut left = [0.0f64; MAX_ORDER + 1];
        let mut right = [0.0f64; MAX_ORDER + 1];
        values[0] = 1.0;
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&values[..k]);
            }
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }

        // lower[r] = N_{span-k+1+r, k-1}(x) for r in 0..k
        let start = span - k;
        let mut derivs = [0.0f64; MAX_ORDER + 1];
        let kf = k as f64;
        for j in 0..=k {
            let i = start + j;
            let mut d = 0.0;
            // N_{i,k-1} is lower[j-1] (non-zero range starts at span-k+1)
            if j >= 1 && j - 1 < k {
                let denom = knots[i + k] - knots[i];
                if denom != 0.0 {
                    d += lower[j - 1] / denom;
                }
            }
            // N_{i+1,k-1} is lower[j]
            if j < k {
                let denom = knots[i + k + 1] - knots[i + 1];
                if denom != 0.0 {
                    d -= lower[j] / denom;
                }
            }
            derivs[j] = kf * d;
        }
        Some((
            SpanValues {
                start,
                values,
            },
            SpanValues {
                start,
                values: derivs,
            },
        ))
    }

    /// Dense basis vector of length `g + kappa`; zero outside the domain.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        if let Some(sv) = self.eval_span(x) {
            for j in 0..=self.order {
                out[sv.start + j] = sv.values[j];
            }
        }
        out
    }

    /// Dense derivative vector of length `g + kappa`; zero outside the domain.
    pub fn eval_grad(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        if let Some((_, dv)) = self.eval_span_with_grad(x) {
            for j in 0..=self.order {
                out[dv.start + j] = dv.values[j];
            }
        }
        out
    }

    /// `sum_i coeffs[i] * N_i(x)` using only the non-zero window.
    #[inline]
    pub fn spline_value<F: Scalar>(&self, coeffs: &[F], x: f64) -> F {
        debug_assert_eq!(coeffs.len(), self.num_basis());
        match self.eval_span(x) {
            Some(sv) => {
                let mut acc = F::zero();
                for j in 0..=self.order {
                    acc += coeffs[sv.start + j] * F::from_f64(sv.values[j]);
                }
                acc
            }
            None => F::zero(),
        }
    }
}

/// One learnable edge activation: scale times spline-plus-SiLU.
#[derive(Debug, Clone)]
pub struct EdgeActivation<F: Scalar> {
    pub w_phi: F,
    pub coeffs: Vec<F>,
}

impl<F: Scalar> EdgeActivation<F> {
    pub fn new(w_phi: F, coeffs: Vec<F>) -> Self {
        EdgeActivation { w_phi, coeffs }
    }
}

/// `phi(x) = w_phi * (sum_i coeffs[i] N_i(x) + silu(x))`.
pub fn edge_activate<F: Scalar>(a: &EdgeActivation<F>, basis: &BSplineBasis, x: F) -> F {
    let b = basis.spline_value(&a.coeffs, x.to_f64_val());
    a.w_phi * (b + silu(x))
}

/// Least-squares fit of spline coefficients to a target function over the
/// basis domain. Test-only oracle for representability checks.
#[cfg(test)]
pub(crate) fn fit_coeffs(b: &BSplineBasis, f: impl Fn(f64) -> f64, n_samples: usize) -> Vec<f64> {
    let n = b.num_basis();
    let mut ata = vec![0.0f64; n * n];
    let mut atb = vec![0.0f64; n];
    let (lo, hi) = b.domain();
    for s in 0..n_samples {
        let x = lo + (hi - lo) * s as f64 / (n_samples - 1) as f64;
        let row = b.eval(x);
        let y = f(x);
        for i in 0..n {
            atb[i] += row[i] * y;
            for j in 0..n {
                ata[i * n + j] += row[i] * row[j];
            }
        }
    }
    // small ridge keeps the normal equations solvable when bases overlap little
    for i in 0..n {
        ata[i * n + i] += 1e-10;
    }
    crate::analysis::solve_dense(&mut ata, &mut atb, n).expect("solvable normal equations");
    atb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn knot_construction_hand_checked() {
        let b = BSplineBasis::uniform(3, 1, -1.0, 1.0).unwrap();
        assert_eq!(b.num_basis(), 4);
        let expect = [-1.0, -1.0, -1.0 + 2.0 / 3.0, -1.0 + 4.0 / 3.0, 1.0, 1.0];
        for (k, e) in b.knots().iter().zip(expect.iter()) {
            assert_relative_eq!(k, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn paper_config_basis_count() {
        let b = BSplineBasis::uniform(10, 3, -1.0, 1.0).unwrap();
        assert_eq!(b.num_basis(), 13);
        assert_eq!(b.knots().len(), 10 + 2 * 3 + 1);
    }

    #[test]
    fn invalid_domain_is_rejected() {
        assert!(BSplineBasis::uniform(3, 1, 1.0, 1.0).is_err());
        assert!(BSplineBasis::uniform(3, 1, 2.0, -1.0).is_err());
        assert!(BSplineBasis::uniform(0, 1, -1.0, 1.0).is_err());
        assert!(BSplineBasis::uniform(3, 0, -1.0, 1.0).is_err());
    }

    #[test]
    fn hat_basis_interpolates_at_breakpoints() {
        let b = BSplineBasis::uniform(3, 1, -1.0, 1.0).unwrap();
        // interior breakpoint -1/3: hat index 1 peaks there
        let v = b.eval(-1.0 / 3.0);
        assert_relative_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_domain_is_zero() {
        let b = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        assert!(b.eval(2.0).iter().all(|&v| v == 0.0));
        assert!(b.eval(-1.0 - 1e-9).iter().all(|&v| v == 0.0));
        assert!(b.eval_grad(2.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_of_unity_all_paper_configs() {
        let mut rng = crate::rng::seeded(99, 0);
        for &(kappa, g) in &[(1usize, 3usize), (2, 5), (3, 10)] {
            let b = BSplineBasis::uniform(g, kappa, -1.0, 1.0).unwrap();
            for _ in 0..1000 {
                let x: f64 = rng.random_range(-1.0..=1.0);
                let v = b.eval(x);
                let sum: f64 = v.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {} at x={} for ({kappa},{g})", sum, x);
                assert!(v.iter().all(|&n| n >= 0.0), "negative basis value at x={x}");
            }
            // closed-interval endpoints included
            for x in [-1.0, 1.0] {
                let sum: f64 = b.eval(x).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn basis_continuity() {
        let b = BSplineBasis::uniform(10, 3, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(5, 0);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..0.999_999);
            let a = b.eval(x);
            let c = b.eval(x + 1e-9);
            for (u, v) in a.iter().zip(c.iter()) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn grad_sums_to_zero_in_domain() {
        for &(kappa, g) in &[(2usize, 5usize), (3, 10)] {
            let b = BSplineBasis::uniform(g, kappa, -1.0, 1.0).unwrap();
            let mut rng = crate::rng::seeded(17, 0);
            for _ in 0..300 {
                let x: f64 = rng.random_range(-1.0..1.0);
                let dsum: f64 = b.eval_grad(x).iter().sum();
                assert!(dsum.abs() < 1e-6, "derivative sum {} at {}", dsum, x);
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences_away_from_knots() {
        let b = BSplineBasis::uniform(10, 3, -1.0, 1.0).unwrap();
        let h = 1e-6;
        let mut rng = crate::rng::seeded(23, 0);
        let spacing = 2.0 / 10.0;
        for _ in 0..300 {
            let x: f64 = rng.random_range(-0.999..0.999);
            // skip points too close to a knot where the FD straddles a break
            let t = (x + 1.0) / spacing;
            if (t - t.round()).abs() * spacing < 10.0 * h {
                continue;
            }
            let up = b.eval(x + h);
            let dn = b.eval(x - h);
            let an = b.eval_grad(x);
            for i in 0..b.num_basis() {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!(
                    (fd - an[i]).abs() < 1e-6,
                    "index {i} at x={x}: fd {fd} vs analytic {}",
                    an[i]
                );
            }
        }
    }

    #[test]
    fn hat_grad_is_inverse_spacing() {
        let b = BSplineBasis::uniform(3, 1, -1.0, 1.0).unwrap();
        // mid-segment of the second interval
        let x = -1.0 + 1.0; // = 0.0, inside [-1/3, 1/3]
        let g = b.eval_grad(x);
        let spacing = 2.0 / 3.0;
        assert_relative_eq!(g[1], -1.0 / spacing, epsilon = 1e-12);
        assert_relative_eq!(g[2], 1.0 / spacing, epsilon = 1e-12);
    }

    #[test]
    fn edge_activate_degenerate_cases() {
        let b = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let zero_w = EdgeActivation::new(0.0f64, vec![1.0; b.num_basis()]);
        let zero_c = EdgeActivation::new(2.0f64, vec![0.0; b.num_basis()]);
        for x in [-0.9, -0.25, 0.0, 0.4, 1.0, 3.0] {
            assert_eq!(edge_activate(&zero_w, &b, x), 0.0);
            assert_relative_eq!(
                edge_activate(&zero_c, &b, x),
                2.0 * crate::matrix::silu(x),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn quadratic_fit_oracle() {
        let b = BSplineBasis::uniform(10, 3, -1.0, 1.0).unwrap();
        let coeffs = super::fit_coeffs(&b, |x| x * x, 400);
        let mut max_err = 0.0f64;
        for s in 0..=100 {
            let x = -1.0 + 2.0 * s as f64 / 100.0;
            let v: f64 = b.spline_value(&coeffs, x);
            max_err = max_err.max((v - x * x).abs());
        }
        assert!(max_err <= 0.01, "max abs err {max_err}");
    }

    #[test]
    fn edge_activate_is_linear_in_params() {
        let b = BSplineBasis::uniform(5, 2, -1.0, 1.0).unwrap();
        let mut rng = crate::rng::seeded(31, 0);
        let c1: Vec<f64> = (0..b.num_basis()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c2: Vec<f64> = (0..b.num_basis()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let csum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        for x in [-0.7, -0.1, 0.33, 0.9] {
            // superposition in coeffs (fixed w_phi = 1): silu enters once per edge,
            // so compare spline parts
            let s1: f64 = b.spline_value(&c1, x);
            let s2: f64 = b.spline_value(&c2, x);
            let ss: f64 = b.spline_value(&csum, x);
            assert_relative_eq!(s1 + s2, ss, epsilon = 1e-12);
            // linear in w_phi
            let e1 = edge_activate(&EdgeActivation::new(1.5, c1.clone()), &b, x);
            let e3 = edge_activate(&EdgeActivation::new(4.5, c1.clone()), &b, x);
            assert_relative_eq!(3.0 * e1, e3, epsilon = 1e-12);
        }
    }
}
