//! Shared numerical kernels: first-order optimizers, the principal-branch
//! Lambert W solver, a central-difference gradient oracle and a few rank
//! statistics helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Update rule used by [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Adam,
}

/// Optimizer and minibatch schedule shared by both training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Adam,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Caller-owned optimizer state: Adam moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Applies one update to `params` in place.
///
/// SGD: `p <- p - lr * g`. Adam: bias-corrected first and second moment
/// estimates, `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::input(format!(
            "shape mismatch: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    match cfg.method {
        Method::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= cfg.step_size * g;
            }
        }
        Method::Adam => {
            let t = state.t as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= cfg.step_size * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

const LAMBERT_MAX_ITER: usize = 50;

/// Principal branch `W0(x)` of the Lambert W function, `w * exp(w) = x`.
///
/// Newton's method started from `ln(1 + x)` for `x >= 0` and from the
/// branch-point expansion `-1 + sqrt(2 (1 + e x))` for `-1/e <= x < 0`.
/// After convergence the last couple of ulps around the iterate are scanned
/// for the smallest evaluated residual.
pub fn lambert_w(x: f64) -> Result<f64> {
    let branch = -(-1.0f64).exp();
    if x.is_nan() || x < branch {
        return Err(Error::Domain(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == branch {
        return Ok(-1.0);
    }
    if x == f64::INFINITY {
        return Ok(f64::INFINITY);
    }

    let mut w = if x >= 0.0 {
        x.ln_1p()
    } else {
        -1.0 + (2.0 * (1.0 + std::f64::consts::E * x)).max(0.0).sqrt()
    };

    let mut converged = false;
    for _ in 0..LAMBERT_MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let df = ew * (w + 1.0);
        if df == 0.0 {
            break;
        }
        let next = w - f / df;
        // the near-branch Newton step can overshoot below -1
        let next = if next <= -1.0 { (w - 1.0) / 2.0 } else { next };
        let delta = (next - w).abs();
        w = next;
        if delta <= 4.0 * f64::EPSILON * w.abs().max(1e-300) {
            converged = true;
            break;
        }
    }

    let residual = |v: f64| (v * v.exp() - x).abs();
    let mut best = w;
    let mut best_res = residual(w);
    let mut up = w;
    let mut down = w;
    for _ in 0..4 {
        up = next_up(up);
        down = next_down(down);
        for cand in [up, down] {
            let r = residual(cand);
            if r < best_res {
                best = cand;
                best_res = r;
            }
        }
    }

    let tol = 1e-10_f64.max(4.0 * f64::EPSILON * x.abs());
    if !converged && best_res > tol {
        return Err(Error::NoConvergence { residual: best_res });
    }
    Ok(best)
}

/// Unevaluated sum `hi + lo` of two doubles (about 106 bits of precision).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoFloat {
    pub hi: f64,
    pub lo: f64,
}

#[allow(clippy::should_implement_trait)]
impl TwoFloat {
    pub fn new(v: f64) -> Self {
        TwoFloat { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let e = (a - (s - bb)) + (b - bb);
        TwoFloat { hi: s, lo: e }
    }

    fn quick_two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        TwoFloat { hi: s, lo: b - (s - a) }
    }

    pub fn add(self, o: TwoFloat) -> Self {
        let s = Self::two_sum(self.hi, o.hi);
        let t = Self::two_sum(self.lo, o.lo);
        let r = Self::quick_two_sum(s.hi, s.lo + t.hi);
        Self::quick_two_sum(r.hi, r.lo + t.lo)
    }

    pub fn neg(self) -> Self {
        TwoFloat {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: TwoFloat) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: TwoFloat) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        Self::quick_two_sum(p, e)
    }

    /// `self / d`, accurate to about 1e-30 relative.
    pub fn div_f64(self, d: f64) -> Self {
        let q1 = self.hi / d;
        let r = self.sub(TwoFloat::new(q1).mul(TwoFloat::new(d)));
        let q2 = r.hi / d;
        let r = r.sub(TwoFloat::new(q2).mul(TwoFloat::new(d)));
        let q3 = r.hi / d;
        Self::quick_two_sum(q1, q2).add(TwoFloat::new(q3))
    }

    pub fn scale_pow2(self, n: i32) -> Self {
        let f = 2f64.powi(n);
        TwoFloat {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// `exp` accurate to roughly 1e-30 relative for moderate arguments.
    pub fn exp(self) -> Self {
        const LN2: TwoFloat = TwoFloat {
            hi: std::f64::consts::LN_2,
            lo: 2.319_046_813_846_299_6e-17,
        };
        const HALVINGS: i32 = 10;
        let n = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul(TwoFloat::new(n))).scale_pow2(-HALVINGS);
        // Taylor series of exp(r) - 1, |r| < 1e-3
        let mut term = r;
        let mut sum = r;
        for i in 2..=12 {
            term = term.mul(r).mul(TwoFloat::new(1.0 / i as f64));
            sum = sum.add(term);
        }
        // (1 + s)^2 - 1 = s (2 + s), repeated
        for _ in 0..HALVINGS {
            sum = sum.mul(sum.add(TwoFloat::new(2.0)));
        }
        sum.add(TwoFloat::new(1.0)).scale_pow2(n as i32)
    }
}

/// `|w e^w - x|` evaluated in double-double arithmetic.
pub fn lambert_residual(w: TwoFloat, x: f64) -> f64 {
    w.mul(w.exp()).sub(TwoFloat::new(x)).to_f64().abs()
}

/// [`lambert_w`] refined by Newton steps carried out in double-double
/// arithmetic. A double cannot always hold `W(x)` closely enough for
/// `|W e^W - x| < 1e-10` once `x` is around `1e6` and beyond (one ulp of
/// `W` moves `W e^W` by about `2e-9` there); the extra word restores it.
pub fn lambert_w_refined(x: f64) -> Result<TwoFloat> {
    let w0 = lambert_w(x)?;
    if x == 0.0 || !x.is_finite() || w0 == -1.0 {
        return Ok(TwoFloat::new(w0));
    }
    let mut w = TwoFloat::new(w0);
    for _ in 0..3 {
        let ew = w.exp();
        let f = w.mul(ew).sub(TwoFloat::new(x));
        let df = ew.hi * (w.hi + 1.0);
        if df == 0.0 || f.hi == 0.0 {
            break;
        }
        w = w.sub(TwoFloat::new(f.to_f64() / df));
    }
    Ok(w)
}

fn next_up(v: f64) -> f64 {
    if v.is_nan() || v == f64::INFINITY {
        return v;
    }
    if v == 0.0 {
        return f64::from_bits(1);
    }
    let bits = v.to_bits();
    f64::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(v: f64) -> f64 {
    -next_up(-v)
}

/// Converts an entropy-type estimate into a density value.
///
/// Implementors supply the relation between a model's entropy estimate and a
/// pointwise density; [`lambert_w`] is the intended solver for relations of
/// the form `a * exp(a) = b`. No implementation ships with this crate.
pub trait EntropyToDensity {
    fn density(&self, entropy: f64) -> Result<f64>;
}

/// Central-difference gradient, `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let plus = f(&p);
            p[i] = orig - step;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" definition). `q` must lie in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::input("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::input(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Mid-ranks (1-based) with ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `p`-norm of a vector, `p >= 1`.
pub fn p_norm(v: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `p`-norm distance between two points.
pub fn p_dist(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    } else {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        p_norm(&d, p)
    }
}

/// Gradient of `||v||_p` with respect to `v`; the zero vector at `v = 0`.
pub fn p_norm_grad(v: &[f64], p: f64) -> Vec<f64> {
    let n = p_norm(v, p);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    if p == 2.0 {
        v.iter().map(|x| x / n).collect()
    } else if p == 1.0 {
        v.iter().map(|x| x.signum() * (*x != 0.0) as u8 as f64).collect()
    } else {
        let denom = n.powf(p - 1.0);
        v.iter().map(|x| x.signum() * x.abs().powf(p - 1.0) / denom).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn sgd_single_step() {
        let cfg = OptimizerConfig {
            method: Method::Sgd,
            step_size: 0.1,
            ..Default::default()
        };
        let mut p = [1.0];
        let mut st = OptimizerState::new(1);
        step(&mut p, &[0.5], &mut st, &cfg).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_step_size() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let cfg = OptimizerConfig::default();
        for g in [1e-3, 0.5, -7.0, 250.0] {
            let mut p = [2.0];
            let mut st = OptimizerState::new(1);
            step(&mut p, &[g], &mut st, &cfg).unwrap();
            let expected = cfg.step_size * g.abs() / (g.abs() + cfg.eps);
            assert!(((2.0 - p[0]).abs() - expected).abs() < 1e-15);
            assert!(((2.0 - p[0]).abs() - cfg.step_size).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        for method in [Method::Sgd, Method::Adam] {
            let cfg = OptimizerConfig {
                method,
                ..Default::default()
            };
            let mut p = [0.3, -4.0];
            let mut st = OptimizerState::new(2);
            step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
            assert_eq!(p, [0.3, -4.0]);
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut p = [0.0; 3];
        let mut st = OptimizerState::new(3);
        let err = step(&mut p, &[0.0; 2], &mut st, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn optimizer_is_deterministic() {
        let cfg = OptimizerConfig::default();
        let run = || {
            let mut p = vec![0.1, 0.2, -0.3];
            let mut st = OptimizerState::new(3);
            for k in 0..20 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0).sin()).collect();
                step(&mut p, &g, &mut st, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lambert_w_exact_points() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(E).unwrap() - 1.0).abs() < 1e-15);
    }

    fn bisect_w(x: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn lambert_w_matches_bisection_at_ten() {
        let w = lambert_w(10.0).unwrap();
        let oracle = bisect_w(10.0);
        assert!((w - oracle).abs() < 1e-12, "{w} vs {oracle}");
        assert!((w * w.exp() - 10.0).abs() < 1e-10);
    }

    const GRID: [f64; 9] = [-1.0 / E + 1e-6, -0.1, 0.0, 0.5, 1.0, E, 10.0, 1e3, 1e6];

    #[test]
    fn lambert_w_residual_grid() {
        assert!((GRID[0] - (-(-1.0f64).exp() + 1e-6)).abs() < 1e-16);
        for x in GRID {
            let w = lambert_w_refined(x).unwrap();
            let res = lambert_residual(w, x);
            assert!(res < 1e-10, "x = {x}: residual {res:e}");
        }
    }

    #[test]
    fn lambert_w_double_is_best_representable() {
        for x in GRID {
            let w = lambert_w(x).unwrap();
            let res = lambert_residual(TwoFloat::new(w), x);
            if x.abs() < 1e5 {
                assert!(res < 1e-10, "x = {x}: residual {res:e}");
            }
            for n in [next_up(w), next_down(w)] {
                assert!(lambert_residual(TwoFloat::new(n), x) >= res * 0.5, "x = {x}");
            }
        }
    }

    #[test]
    fn two_float_exp_matches_libm() {
        for v in [-3.0, -0.2, 0.0, 0.7, 1.0, 5.25, 11.38] {
            let e = TwoFloat::new(v).exp();
            assert!(((e.to_f64() - f64::exp(v)) / f64::exp(v)).abs() < 4e-16, "{v}");
        }
        let e1 = TwoFloat::new(1.0).exp();
        assert_eq!(e1.hi, E);
    }

    #[test]
    fn lambert_w_domain_error() {
        assert!(matches!(lambert_w(-0.5), Err(Error::Domain(_))));
        assert!(matches!(lambert_w(f64::NAN), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn lambert_w_monotone(a in -0.3678f64..50.0, b in -0.3678f64..50.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lambert_w(lo).unwrap() <= lambert_w(hi).unwrap());
        }
    }

    #[test]
    fn finite_diff_simple_functions() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn quantile_and_ranks() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[5.0], 0.05).unwrap(), 5.0);
        assert_eq!(average_ranks(&[0.2, 0.1, 0.2, 0.5]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn p_norm_gradient_matches_fd() {
        let v = [0.7, -1.2, 0.3];
        for p in [1.0, 1.5, 2.0, 3.0] {
            let g = p_norm_grad(&v, p);
            let fd = finite_diff_grad(|x| p_norm(x, p), &v, 1e-6);
            assert!(relative_error(&g, &fd) < 1e-8, "p = {p}");
        }
    }
}
