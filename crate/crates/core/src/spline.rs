//! B-spline transition function and the bounded transform on its coefficients.
//!
//! The level `eta` is rescaled to `x = (eta - lower) / (upper - lower)` and
//! evaluated against a clamped knot vector running from the rescaled lower
//! bound to the rescaled knot anchor (the largest observed level). Arguments
//! outside that span are clamped, so beyond the anchor the function is flat
//! at the value of the last coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::logistic;

const MAX_DEGREE: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub n_basis: usize,
    pub degree: usize,
    /// Lower rescale bound in years.
    pub lower: f64,
    /// Upper rescale bound in years.
    pub upper: f64,
    /// Right end of the knot span in years; `None` means "largest observed value".
    pub knot_anchor: Option<f64>,
    pub coef_floor: f64,
    pub coef_ceiling: f64,
    pub asymptote_ceiling: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            n_basis: 6,
            degree: 3,
            lower: 15.0,
            upper: 110.0,
            knot_anchor: None,
            coef_floor: 0.001,
            coef_ceiling: 10.0,
            asymptote_ceiling: 1.15,
        }
    }
}

impl SplineConfig {
    /// Number of unconstrained parameters per country (`n_basis - 2`).
    pub fn n_free(&self) -> usize {
        self.n_basis - 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("spline: {m}")));
        if self.degree == 0 || self.degree > MAX_DEGREE {
            return bad("degree must be in 1..=7");
        }
        if self.n_basis < 4 || self.n_basis < self.degree + 1 {
            return bad("need at least 4 basis functions and n_basis > degree");
        }
        if !(self.lower < self.upper) {
            return bad("lower bound must be below upper bound");
        }
        if !(self.coef_floor > 0.0
            && self.coef_floor < self.asymptote_ceiling
            && self.coef_floor < self.coef_ceiling)
        {
            return bad("coefficient bounds must satisfy 0 < floor < ceilings");
        }
        Ok(())
    }
}

/// Positive spline weights for one country together with the derivative of
/// each weight with respect to its unconstrained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    values: Vec<f64>,
    /// d weight / d beta_star for the parameter that drives it.
    slopes: Vec<f64>,
}

impl Coefficients {
    /// `beta_star` has `n_basis - 2` entries: the first `n_basis - 3` map to
    /// (floor, ceiling) and the last one drives the three tied trailing weights
    /// on (floor, asymptote_ceiling).
    pub fn from_unconstrained(config: &SplineConfig, beta_star: &[f64]) -> Result<Self> {
        let k = config.n_basis;
        if beta_star.len() != k - 2 {
            return Err(Error::DimensionMismatch {
                expected: k - 2,
                actual: beta_star.len(),
            });
        }
        let mut values = Vec::with_capacity(k);
        let mut slopes = Vec::with_capacity(k - 2);
        let free_range = config.coef_ceiling - config.coef_floor;
        for &b in &beta_star[..k - 3] {
            let s = logistic(b);
            values.push(config.coef_floor + free_range * s);
            slopes.push(free_range * s * (1.0 - s));
        }
        let tail_range = config.asymptote_ceiling - config.coef_floor;
        let s = logistic(beta_star[k - 3]);
        let tail = config.coef_floor + tail_range * s;
        values.extend([tail; 3]);
        slopes.push(tail_range * s * (1.0 - s));
        Ok(Coefficients { values, slopes })
    }

    /// Builds weights directly; used for fixtures such as constant functions.
    pub fn from_values(values: Vec<f64>) -> Self {
        let slopes = vec![0.0; values.len().saturating_sub(2)];
        Coefficients { values, slopes }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The tied trailing weight, equal to f beyond the knot anchor.
    pub fn asymptote(&self) -> f64 {
        *self.values.last().expect("non-empty coefficients")
    }
}

/// Value of f plus its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGrad {
    pub value: f64,
    pub d_level: f64,
    pub d_beta_star: Vec<f64>,
}

/// Non-zero basis values at one argument: `values[j]` belongs to basis
/// function `first + j`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub len: usize,
    pub values: [f64; MAX_DEGREE + 1],
    /// Derivatives with respect to the rescaled argument, zero outside the span.
    pub derivs: [f64; MAX_DEGREE + 1],
}

/// A [`SplineConfig`] with its knot vector resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    config: SplineConfig,
    anchor: f64,
    knots: Vec<f64>,
    span_lo: f64,
    span_hi: f64,
}

impl SplineBasis {
    /// `anchor` is used when the config leaves `knot_anchor` unset.
    pub fn new(config: &SplineConfig, anchor: f64) -> Result<Self> {
        config.validate()?;
        let anchor = config.knot_anchor.unwrap_or(anchor);
        if !(anchor > config.lower && anchor <= config.upper) {
            return Err(Error::InvalidConfig(format!(
                "knot anchor {anchor} must lie in ({}, {}]",
                config.lower, config.upper
            )));
        }
        let mut resolved = config.clone();
        resolved.knot_anchor = Some(anchor);
        let span_lo = 0.0;
        let span_hi = (anchor - config.lower) / (config.upper - config.lower);
        let p = config.degree;
        let n_interior = config.n_basis - p - 1;
        let mut knots = vec![span_lo; p + 1];
        for j in 1..=n_interior {
            knots.push(span_lo + (span_hi - span_lo) * j as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(span_hi, p + 1));
        Ok(SplineBasis {
            config: resolved,
            anchor,
            knots,
            span_lo,
            span_hi,
        })
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.config.n_basis
    }

    pub fn rescale(&self, level: f64) -> f64 {
        (level - self.config.lower) / (self.config.upper - self.config.lower)
    }

    fn span_index(&self, x: f64) -> usize {
        let p = self.config.degree;
        let last = self.config.n_basis - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // knots[p..=last+1] is increasing; find i with knots[i] <= x < knots[i+1]
        let mut i = p;
        while i < last && x >= self.knots[i + 1] {
            i += 1;
        }
        i
    }

    /// Triangular de Boor table for the `degree + 1` non-zero functions of
    /// the given degree on span `i`.
    fn basis_funs(&self, i: usize, x: f64, degree: usize) -> [f64; MAX_DEGREE + 1] {
        let t = &self.knots;
        let mut n = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Non-zero basis values and derivatives at rescaled argument `x`,
    /// clamping `x` into the knot span first.
    pub fn local(&self, x: f64) -> LocalBasis {
        let p = self.config.degree;
        let inside = x >= self.span_lo && x <= self.span_hi;
        let xc = x.clamp(self.span_lo, self.span_hi);
        let i = self.span_index(xc);
        let values = self.basis_funs(i, xc, p);
        let mut derivs = [0.0; MAX_DEGREE + 1];
        if inside {
            let lower = self.basis_funs(i, xc, p - 1);
            let t = &self.knots;
            // lower[j] is N_{i-p+1+j, p-1}
            for (j, d) in derivs.iter_mut().enumerate().take(p + 1) {
                let k = i - p + j;
                let mut acc = 0.0;
                if j >= 1 {
                    let denom = t[k + p] - t[k];
                    if denom > 0.0 {
                        acc += p as f64 * lower[j - 1] / denom;
                    }
                }
                if j < p {
                    let denom = t[k + p + 1] - t[k + 1];
                    if denom > 0.0 {
                        acc -= p as f64 * lower[j] / denom;
                    }
                }
                *d = acc;
            }
        }
        LocalBasis {
            first: i - p,
            len: p + 1,
            values,
            derivs,
        }
    }

    /// All `n_basis` basis values at rescaled argument `x` (clamped).
    pub fn basis_eval(&self, x: f64) -> Vec<f64> {
        let local = self.local(x);
        let mut out = vec![0.0; self.config.n_basis];
        out[local.first..local.first + local.len].copy_from_slice(&local.values[..local.len]);
        out
    }

    /// Expected gain per period at `level`.
    pub fn transition(&self, coeffs: &Coefficients, level: f64) -> f64 {
        let local = self.local(self.rescale(level));
        let w = &coeffs.values[local.first..local.first + local.len];
        w.iter().zip(&local.values).map(|(a, b)| a * b).sum()
    }

    /// Index of the unconstrained parameter that drives basis weight `k`.
    #[inline]
    pub fn driver(&self, k: usize) -> usize {
        k.min(self.config.n_basis - 3)
    }

    /// f together with df/dlevel and df/dbeta_star.
    pub fn transition_grad(&self, coeffs: &Coefficients, level: f64) -> TransitionGrad {
        let local = self.local(self.rescale(level));
        let width = self.config.upper - self.config.lower;
        let mut value = 0.0;
        let mut d_x = 0.0;
        let mut d_beta_star = vec![0.0; self.config.n_free()];
        for j in 0..local.len {
            let k = local.first + j;
            value += coeffs.values[k] * local.values[j];
            d_x += coeffs.values[k] * local.derivs[j];
            let m = self.driver(k);
            d_beta_star[m] += coeffs.slopes[m] * local.values[j];
        }
        TransitionGrad {
            value,
            d_level: d_x / width,
            d_beta_star,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook recursive Cox-de Boor evaluation on half-open spans.
    fn cox_de_boor(i: usize, p: usize, x: f64, t: &[f64]) -> f64 {
        if p == 0 {
            return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
        }
        let mut out = 0.0;
        if t[i + p] > t[i] {
            out += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(i, p - 1, x, t);
        }
        if t[i + p + 1] > t[i + 1] {
            out += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(i + 1, p - 1, x, t);
        }
        out
    }

    fn basis() -> SplineBasis {
        SplineBasis::new(&SplineConfig::default(), 82.0).unwrap()
    }

    #[test]
    fn knots_are_clamped_and_evenly_spaced() {
        let b = basis();
        let hi = (82.0 - 15.0) / 95.0;
        let t = b.knots();
        assert_eq!(t.len(), 10);
        assert_eq!(&t[..4], &[0.0; 4]);
        assert_eq!(&t[6..], &[hi; 4]);
        assert!((t[4] - hi / 3.0).abs() < 1e-15);
        assert!((t[5] - 2.0 * hi / 3.0).abs() < 1e-15);
        assert_eq!(b.rescale(15.0), 0.0);
        assert_eq!(b.rescale(110.0), 1.0);
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hi = b.knots()[9];
        for _ in 0..1000 {
            let x = rng.random_range(0.0..hi);
            let s: f64 = b.basis_eval(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_ends_and_outside_the_span() {
        let b = basis();
        let left = b.basis_eval(0.0);
        assert!((left[0] - 1.0).abs() < 1e-15);
        assert!(left[1..].iter().all(|&v| v == 0.0));
        let hi = b.knots()[9];
        assert_eq!(b.basis_eval(hi + 0.2), b.basis_eval(hi));
        assert_eq!(b.basis_eval(-0.3), b.basis_eval(0.0));
        assert!((b.basis_eval(hi)[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_recursive_cox_de_boor() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hi = b.knots()[9];
        for _ in 0..200 {
            let x = rng.random_range(0.0..hi * 0.999);
            let fast = b.basis_eval(x);
            for (k, v) in fast.iter().enumerate() {
                assert!((v - cox_de_boor(k, 3, x, b.knots())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coefficient_transform_values() {
        let cfg = SplineConfig::default();
        let c = Coefficients::from_unconstrained(&cfg, &[0.0; 4]).unwrap();
        assert!((c.values()[0] - 5.0005).abs() < 1e-12);
        assert!((c.asymptote() - 0.5755).abs() < 1e-12);
        assert_eq!(c.values()[3], c.values()[4]);
        assert_eq!(c.values()[4], c.values()[5]);
        let lo = Coefficients::from_unconstrained(&cfg, &[-800.0, 800.0, 0.0, 0.0]).unwrap();
        assert_eq!(lo.values()[0], 0.001);
        assert_eq!(lo.values()[1], 10.0);
        assert!(Coefficients::from_unconstrained(&cfg, &[0.0; 3]).is_err());
    }

    #[test]
    fn constant_weights_give_constant_f() {
        let b = basis();
        let c = Coefficients::from_values(vec![1.0; 6]);
        for level in [16.0, 30.0, 55.5, 81.9, 120.0] {
            assert!((b.transition(&c, level) - 1.0).abs() < 1e-12);
            let g = b.transition_grad(&c, level);
            assert!(g.d_level.abs() < 1e-12);
        }
    }

    #[test]
    fn flat_beyond_the_anchor() {
        let b = basis();
        let c = Coefficients::from_values(vec![2.0, 3.0, 4.0, 0.9, 0.9, 0.9]);
        assert!((b.transition(&c, 120.0) - 0.9).abs() < 1e-15);
        assert!((b.transition(&c, 95.0) - 0.9).abs() < 1e-15);
        assert_eq!(b.transition_grad(&c, 120.0).d_level, 0.0);
        assert_eq!(b.transition_grad(&c, 10.0).d_level, 0.0);
    }

    #[test]
    fn transition_matches_recursive_evaluation() {
        let b = basis();
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let bs: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = Coefficients::from_unconstrained(&cfg, &bs).unwrap();
            let level = rng.random_range(20.0..80.0);
            let x = b.rescale(level);
            let direct: f64 = (0..6)
                .map(|k| c.values()[k] * cox_de_boor(k, 3, x, b.knots()))
                .sum();
            assert!((b.transition(&c, level) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = basis();
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1e-3);
        for _ in 0..100 {
            let bs: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let level = rng.random_range(16.0..81.0);
            let c = Coefficients::from_unconstrained(&cfg, &bs).unwrap();
            let g = b.transition_grad(&c, level);
            let fd_level = (b.transition(&c, level + h) - b.transition(&c, level - h)) / (2.0 * h);
            assert!(rel(g.d_level, fd_level) < 1e-6, "{} vs {}", g.d_level, fd_level);
            for m in 0..4 {
                let mut up = bs.clone();
                up[m] += h;
                let mut dn = bs.clone();
                dn[m] -= h;
                let fu = b.transition(&Coefficients::from_unconstrained(&cfg, &up).unwrap(), level);
                let fl = b.transition(&Coefficients::from_unconstrained(&cfg, &dn).unwrap(), level);
                let fd = (fu - fl) / (2.0 * h);
                assert!(rel(g.d_beta_star[m], fd) < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn f_is_positive_and_bounded(
            bs in proptest::collection::vec(-20.0f64..20.0, 4),
            level in 0.0f64..200.0,
        ) {
            let b = basis();
            let c = Coefficients::from_unconstrained(&SplineConfig::default(), &bs).unwrap();
            let f = b.transition(&c, level);
            prop_assert!(f > 0.0);
            prop_assert!(f <= 10.0 + 1e-12);
            if level >= 110.0 {
                prop_assert!(f <= 1.15);
            }
        }
    }
}
