//! Invertible generator with exact log-density.
//!
//! `G = A ∘ C_{K-1} ∘ ... ∘ C_0` maps a standard normal latent to data space,
//! where each `C_k` is an affine coupling layer and `A` an element-wise
//! affine map (identity unless set from data with
//! [`FlowModel::standardize_to`]). The density of a point follows from the
//! change of variables
//!
//! ```text
//! log p(x) = log N(G^-1(x); 0, I) - log |det J_G(G^-1(x))|
//! ```
//!
//! and both terms are available in closed form. Gradients with respect to
//! parameters and inputs are computed by explicit backpropagation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, OutputInit};
use crate::numerics::{step, OptimizerConfig, OptimizerState};
use crate::seed;

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Rows per parallel work item. Fixed so that gradient sums are reduced in
/// the same order regardless of thread count.
const CHUNK: usize = 16;

/// Architecture of a coupling stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Hidden layers per scale/shift network.
    pub depth: usize,
    /// Log-scales are squashed to `(-max_log_scale, max_log_scale)` with `tanh`.
    pub max_log_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 6,
            hidden: 64,
            depth: 1,
            max_log_scale: 4.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::config(
                "flow needs at least one layer and a nonzero hidden width",
            ));
        }
        if !(self.max_log_scale > 0.0 && self.max_log_scale.is_finite()) {
            return Err(Error::config("max_log_scale must be positive and finite"));
        }
        Ok(())
    }
}

/// Affine coupling: coordinates with `mask = true` pass through and condition
/// the update `x_b = z_b * exp(s(z_a)) + t(z_a)` of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    cond: Vec<usize>,
    free: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
    max_log_scale: f64,
}

#[derive(Debug, Clone)]
struct CouplingCache {
    // layer input on the forward path, layer output on the inverse path
    free_z: Vec<f64>,
    exp_s: Vec<f64>,
    tanh_raw: Vec<f64>,
    scale: MlpCache,
    shift: MlpCache,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp, max_log_scale: f64) -> Result<Self> {
        let cond: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if cond.is_empty() || free.is_empty() {
            return Err(Error::config(
                "coupling mask must split coordinates into two nonempty sets",
            ));
        }
        for net in [&scale_net, &shift_net] {
            if net.input_dim() != cond.len() || net.output_dim() != free.len() {
                return Err(Error::config(format!(
                    "coupling network shape {:?} does not match mask ({} -> {})",
                    net.sizes(),
                    cond.len(),
                    free.len()
                )));
            }
        }
        Ok(CouplingLayer {
            mask,
            cond,
            free,
            scale_net,
            shift_net,
            max_log_scale,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    pub fn max_log_scale(&self) -> f64 {
        self.max_log_scale
    }

    fn num_params(&self) -> usize {
        self.scale_net.num_params() + self.shift_net.num_params()
    }

    fn squash(&self, raw: f64) -> (f64, f64) {
        let th = (raw / self.max_log_scale).tanh();
        (self.max_log_scale * th, th)
    }

    fn gather(&self, y: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| y[i]).collect()
    }

    /// Returns the transformed point and `sum(s)`, the layer's log-determinant.
    fn forward(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let a = self.gather(y, &self.cond);
        let raw = self.scale_net.forward(&a);
        let t = self.shift_net.forward(&a);
        let mut out = y.to_vec();
        let mut logdet = 0.0;
        for (k, &i) in self.free.iter().enumerate() {
            let (s, _) = self.squash(raw[k]);
            out[i] = y[i] * s.exp() + t[k];
            logdet += s;
        }
        (out, logdet)
    }

    /// Exact inverse of [`CouplingLayer::forward`]; also returns the forward log-determinant.
    fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let a = self.gather(y, &self.cond);
        let raw = self.scale_net.forward(&a);
        let t = self.shift_net.forward(&a);
        let mut out = y.to_vec();
        let mut logdet = 0.0;
        for (k, &i) in self.free.iter().enumerate() {
            let (s, _) = self.squash(raw[k]);
            out[i] = (y[i] - t[k]) / s.exp();
            logdet += s;
        }
        (out, logdet)
    }

    fn forward_cached(&self, y: &[f64]) -> (Vec<f64>, f64, CouplingCache) {
        let a = self.gather(y, &self.cond);
        let (raw, scale) = self.scale_net.forward_cached(&a);
        let (t, shift) = self.shift_net.forward_cached(&a);
        let mut out = y.to_vec();
        let mut logdet = 0.0;
        let mut exp_s = Vec::with_capacity(self.free.len());
        let mut tanh_raw = Vec::with_capacity(self.free.len());
        for (k, &i) in self.free.iter().enumerate() {
            let (s, th) = self.squash(raw[k]);
            let e = s.exp();
            out[i] = y[i] * e + t[k];
            logdet += s;
            exp_s.push(e);
            tanh_raw.push(th);
        }
        let free_z = self.gather(y, &self.free);
        (
            out,
            logdet,
            CouplingCache {
                free_z,
                exp_s,
                tanh_raw,
                scale,
                shift,
            },
        )
    }

    fn inverse_cached(&self, y: &[f64]) -> (Vec<f64>, f64, CouplingCache) {
        let a = self.gather(y, &self.cond);
        let (raw, scale) = self.scale_net.forward_cached(&a);
        let (t, shift) = self.shift_net.forward_cached(&a);
        let mut out = y.to_vec();
        let mut logdet = 0.0;
        let mut exp_s = Vec::with_capacity(self.free.len());
        let mut tanh_raw = Vec::with_capacity(self.free.len());
        for (k, &i) in self.free.iter().enumerate() {
            let (s, th) = self.squash(raw[k]);
            let e = s.exp();
            out[i] = (y[i] - t[k]) / e;
            logdet += s;
            exp_s.push(e);
            tanh_raw.push(th);
        }
        let free_z = self.gather(&out, &self.free);
        (
            out,
            logdet,
            CouplingCache {
                free_z,
                exp_s,
                tanh_raw,
                scale,
                shift,
            },
        )
    }

    /// Backward through the forward map for the loss `L(out) + c * sum(s)`,
    /// where `grad_out = dL/d out` and `logdet_coef = c`.
    fn backward_forward(
        &self,
        cache: &CouplingCache,
        grad_out: &[f64],
        logdet_coef: f64,
        grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut grad_in = grad_out.to_vec();
        let nf = self.free.len();
        let mut g_raw = Vec::with_capacity(nf);
        let mut g_t = Vec::with_capacity(nf);
        for (k, &i) in self.free.iter().enumerate() {
            let g = grad_out[i];
            let e = cache.exp_s[k];
            grad_in[i] = g * e;
            let g_s = g * cache.free_z[k] * e + logdet_coef;
            g_raw.push(g_s * (1.0 - cache.tanh_raw[k] * cache.tanh_raw[k]));
            g_t.push(g);
        }
        self.backprop_nets(cache, &g_raw, &g_t, grad_params, &mut grad_in);
        grad_in
    }

    /// Backward through the inverse map for the loss `L(out) + c * sum(s)`.
    fn backward_inverse(
        &self,
        cache: &CouplingCache,
        grad_out: &[f64],
        logdet_coef: f64,
        grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut grad_in = grad_out.to_vec();
        let nf = self.free.len();
        let mut g_raw = Vec::with_capacity(nf);
        let mut g_t = Vec::with_capacity(nf);
        for (k, &i) in self.free.iter().enumerate() {
            let g = grad_out[i];
            let inv_e = 1.0 / cache.exp_s[k];
            grad_in[i] = g * inv_e;
            let g_s = -g * cache.free_z[k] + logdet_coef;
            g_raw.push(g_s * (1.0 - cache.tanh_raw[k] * cache.tanh_raw[k]));
            g_t.push(-g * inv_e);
        }
        self.backprop_nets(cache, &g_raw, &g_t, grad_params, &mut grad_in);
        grad_in
    }

    fn backprop_nets(
        &self,
        cache: &CouplingCache,
        g_raw: &[f64],
        g_t: &[f64],
        grad_params: Option<&mut [f64]>,
        grad_in: &mut [f64],
    ) {
        let ns = self.scale_net.num_params();
        let (ga, gb) = match grad_params {
            Some(g) => {
                let (a, b) = g.split_at_mut(ns);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let from_scale = self.scale_net.backward(&cache.scale, g_raw, ga);
        let from_shift = self.shift_net.backward(&cache.shift, g_t, gb);
        for (k, &i) in self.cond.iter().enumerate() {
            grad_in[i] += from_scale[k] + from_shift[k];
        }
    }
}

/// Exact-density generative model over `R^dim` with a standard normal latent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    shift: Vec<f64>,
    log_scale: Vec<f64>,
    layers: Vec<CouplingLayer>,
}

/// Intermediate values of one inverse evaluation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct InverseTrace {
    u: Vec<f64>,
    layers: Vec<CouplingCache>,
    latent: Vec<f64>,
    log_density: f64,
}

impl InverseTrace {
    pub fn log_density(&self) -> f64 {
        self.log_density
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }
}

/// Intermediate values of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layers: Vec<CouplingCache>,
    u: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Mask of layer `k`: coordinates whose index parity matches `k` condition the rest.
pub fn alternating_mask(dim: usize, k: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == k % 2).collect()
}

impl FlowModel {
    /// Coupling stack with alternating masks. Output layers of the scale and
    /// shift networks start at zero, so the model starts as the identity map.
    pub fn new(dim: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        Self::with_output_init(dim, cfg, OutputInit::Zero, seed)
    }

    /// Like [`FlowModel::new`] but every network output layer is random with
    /// the given gain, giving a non-trivial map.
    pub fn random(dim: usize, cfg: &FlowConfig, gain: f64, seed: u64) -> Result<Self> {
        Self::with_output_init(dim, cfg, OutputInit::Random(gain), seed)
    }

    fn with_output_init(dim: usize, cfg: &FlowConfig, init: OutputInit, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!("flow dimension must be at least 2, got {dim}")));
        }
        cfg.validate()?;
        let mut rng = seed::rng(seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let mask = alternating_mask(dim, k);
            let n_cond = mask.iter().filter(|&&m| m).count();
            let mut sizes = vec![n_cond];
            sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
            sizes.push(dim - n_cond);
            let scale_net = Mlp::new(&sizes, init, &mut rng);
            let shift_net = Mlp::new(&sizes, init, &mut rng);
            layers.push(CouplingLayer::new(mask, scale_net, shift_net, cfg.max_log_scale)?);
        }
        Ok(FlowModel {
            dim,
            shift: vec![0.0; dim],
            log_scale: vec![0.0; dim],
            layers,
        })
    }

    /// Assembles a model from parts; `shift`/`log_scale` form the final element-wise affine map.
    pub fn from_parts(dim: usize, shift: Vec<f64>, log_scale: Vec<f64>, layers: Vec<CouplingLayer>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!("flow dimension must be at least 2, got {dim}")));
        }
        if shift.len() != dim || log_scale.len() != dim {
            return Err(Error::config("affine parameters do not match dimension"));
        }
        if layers.iter().any(|l| l.mask.len() != dim) {
            return Err(Error::config("coupling mask length does not match dimension"));
        }
        Ok(FlowModel {
            dim,
            shift,
            log_scale,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn affine_shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn affine_log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    /// Sets the output affine map to the per-coordinate mean and standard
    /// deviation of `data`, so that an identity coupling stack already
    /// matches the data's first two moments.
    pub fn standardize_to(&mut self, data: &[Vec<f64>]) -> Result<()> {
        self.check_rows(data)?;
        if data.is_empty() {
            return Err(Error::input("cannot standardize to an empty dataset"));
        }
        let n = data.len() as f64;
        for j in 0..self.dim {
            let mean = data.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = data.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            self.shift[j] = mean;
            self.log_scale[j] = 0.5 * var.max(1e-12).ln();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim + self.layers.iter().map(|l| l.num_params()).sum::<usize>()
    }

    /// All parameters as one vector: `[shift, log_scale, (scale_net, shift_net) per layer]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.shift);
        p.extend_from_slice(&self.log_scale);
        for l in &self.layers {
            p.extend_from_slice(l.scale_net.params());
            p.extend_from_slice(l.shift_net.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let d = self.dim;
        self.shift.copy_from_slice(&p[..d]);
        self.log_scale.copy_from_slice(&p[d..2 * d]);
        let mut off = 2 * d;
        for l in &mut self.layers {
            let n = l.scale_net.num_params();
            l.scale_net.params_mut().copy_from_slice(&p[off..off + n]);
            off += n;
            let n = l.shift_net.num_params();
            l.shift_net.params_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_point(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::input(format!(
                "expected a point of dimension {}, got {}",
                self.dim,
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("point has non-finite coordinates"));
        }
        Ok(())
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<()> {
        rows.iter().try_for_each(|r| self.check_point(r))
    }

    /// `G(z)`.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_log_det(z)?.0)
    }

    /// `G(z)` together with `log |det J_G(z)|`.
    pub fn forward_with_log_det(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(z)?;
        let mut y = z.to_vec();
        let mut logdet = 0.0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(&y);
            ensure_finite(&next, k)?;
            y = next;
            logdet += ld;
        }
        for ((yj, ls), sh) in y.iter_mut().zip(&self.log_scale).zip(&self.shift) {
            *yj = *yj * ls.exp() + sh;
            logdet += ls;
        }
        ensure_finite(&y, self.layers.len())?;
        Ok((y, logdet))
    }

    /// `log |det J_G(z)|`.
    pub fn log_det_jacobian(&self, z: &[f64]) -> Result<f64> {
        Ok(self.forward_with_log_det(z)?.1)
    }

    /// `G^-1(x)`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_log_det(x)?.0)
    }

    /// `G^-1(x)` together with `log |det J_G|` at the recovered latent.
    pub fn inverse_with_log_det(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let mut y: Vec<f64> = (0..self.dim)
            .map(|j| (x[j] - self.shift[j]) * (-self.log_scale[j]).exp())
            .collect();
        let mut logdet: f64 = self.log_scale.iter().sum();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse(&y);
            ensure_finite(&prev, k)?;
            y = prev;
            logdet += ld;
        }
        Ok((y, logdet))
    }

    /// `log p_g(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.inverse_with_log_det(x)?;
        Ok(std_normal_log_pdf(&z) - logdet)
    }

    /// Log-density of every row, evaluated in parallel.
    pub fn log_density_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.par_iter().map(|r| self.log_density(r)).collect()
    }

    /// Applies `G` to every row in parallel.
    pub fn forward_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.par_iter().map(|r| self.forward(r)).collect()
    }

    /// Draws `n` latent rows from `N(0, I)` with the given seed and maps them through `G`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let z = seed::standard_normal_rows(n, self.dim, seed);
        self.forward_batch(&z)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let z = seed::standard_normal_rows_from(rng, n, self.dim);
        self.forward_batch(&z)
    }

    /// Inverse pass that records what [`FlowModel::backward_log_density`] needs.
    pub fn trace_inverse(&self, x: &[f64]) -> Result<InverseTrace> {
        self.check_point(x)?;
        let u: Vec<f64> = (0..self.dim)
            .map(|j| (x[j] - self.shift[j]) * (-self.log_scale[j]).exp())
            .collect();
        let mut logdet: f64 = self.log_scale.iter().sum();
        let mut caches: Vec<Option<CouplingCache>> = vec![None; self.layers.len()];
        let mut y = u.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld, cache) = layer.inverse_cached(&y);
            ensure_finite(&prev, k)?;
            caches[k] = Some(cache);
            y = prev;
            logdet += ld;
        }
        let log_density = std_normal_log_pdf(&y) - logdet;
        Ok(InverseTrace {
            u,
            layers: caches.into_iter().map(Option::unwrap).collect(),
            latent: y,
            log_density,
        })
    }

    /// Gradient of `coef * log p_g(x)` with respect to `x`. When `grad_params`
    /// is given, `coef * d log p_g(x) / d params` is added to it.
    pub fn backward_log_density(
        &self,
        trace: &InverseTrace,
        coef: f64,
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let d = self.dim;
        // d/dz of log N(z) is -z
        let mut g: Vec<f64> = trace.latent.iter().map(|z| -coef * z).collect();
        let mut offset = 2 * d;
        let mut offsets = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            offsets.push(offset);
            offset += l.num_params();
        }
        // the inverse ran from the last layer to the first, so backprop runs first to last
        for (k, layer) in self.layers.iter().enumerate() {
            let gp = grad_params
                .as_deref_mut()
                .map(|gp| &mut gp[offsets[k]..offsets[k] + layer.num_params()]);
            g = layer.backward_inverse(&trace.layers[k], &g, -coef, gp);
        }
        // u = (x - shift) * exp(-log_scale), log p contains -sum(log_scale)
        let mut gx = vec![0.0; d];
        for j in 0..d {
            let inv = (-self.log_scale[j]).exp();
            gx[j] = g[j] * inv;
            if let Some(gp) = grad_params.as_deref_mut() {
                gp[j] += -g[j] * inv;
                gp[d + j] += -g[j] * trace.u[j] - coef;
            }
        }
        gx
    }

    /// Forward pass that records what [`FlowModel::backward_forward`] needs.
    pub fn trace_forward(&self, z: &[f64]) -> Result<ForwardTrace> {
        self.check_point(z)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = z.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, _, cache) = layer.forward_cached(&y);
            ensure_finite(&next, k)?;
            caches.push(cache);
            y = next;
        }
        let output: Vec<f64> = (0..self.dim)
            .map(|j| y[j] * self.log_scale[j].exp() + self.shift[j])
            .collect();
        ensure_finite(&output, self.layers.len())?;
        Ok(ForwardTrace {
            layers: caches,
            u: y,
            output,
        })
    }

    /// Backpropagates `grad_out = dL/dG(z)` to `dL/dz`, accumulating
    /// parameter gradients into `grad_params` when given.
    pub fn backward_forward(
        &self,
        trace: &ForwardTrace,
        grad_out: &[f64],
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d];
        for j in 0..d {
            let e = self.log_scale[j].exp();
            g[j] = grad_out[j] * e;
            if let Some(gp) = grad_params.as_deref_mut() {
                gp[j] += grad_out[j];
                gp[d + j] += grad_out[j] * trace.u[j] * e;
            }
        }
        let mut offset = 2 * d;
        let mut offsets = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            offsets.push(offset);
            offset += l.num_params();
        }
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let gp = grad_params
                .as_deref_mut()
                .map(|gp| &mut gp[offsets[k]..offsets[k] + layer.num_params()]);
            g = layer.backward_forward(&trace.layers[k], &g, 0.0, gp);
        }
        g
    }

    /// Mean negative log-density over `rows` and its parameter gradient.
    pub fn nll_and_grad(&self, rows: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if rows.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let np = self.num_params();
        let partial: Vec<(f64, Vec<f64>)> = rows
            .par_chunks(CHUNK)
            .map(|chunk| -> Result<(f64, Vec<f64>)> {
                let mut g = vec![0.0; np];
                let mut loss = 0.0;
                for r in chunk {
                    let tr = self.trace_inverse(r)?;
                    loss -= tr.log_density;
                    self.backward_log_density(&tr, -1.0, Some(&mut g));
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let n = rows.len() as f64;
        let mut grad = vec![0.0; np];
        let mut loss = 0.0;
        for (l, g) in partial {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v /= n);
        Ok((loss / n, grad))
    }

    /// Mean negative log-density over `rows`.
    pub fn mean_nll(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let lp = self.log_density_batch(rows)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }
}

fn ensure_finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(Some(layer), "non-finite intermediate value"))
    }
}

/// `log N(z; 0, I)`.
pub fn std_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// Per-epoch record of a maximum-likelihood fit. `nll[0]` is the full-data
/// mean negative log-likelihood before training, `nll[e]` after epoch `e`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    pub nll: Vec<f64>,
}

impl FitTrace {
    /// Running minimum of the trace.
    pub fn running_best(&self) -> Vec<f64> {
        running_min(&self.nll)
    }
}

pub(crate) fn running_min(v: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    v.iter()
        .map(|&x| {
            best = best.min(x);
            best
        })
        .collect()
}

/// A training run that stopped on a non-finite loss. The model passed in has
/// been restored to the parameters at the start of the failing epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainAbort<T> {
    pub error: Error,
    pub trace: T,
    pub epoch: usize,
}

/// Maximum-likelihood training of `model` on `data` with minibatches drawn
/// from a seeded shuffle. On success the model holds the parameters of the
/// epoch with the lowest full-data NLL.
pub fn fit_mle(
    model: &mut FlowModel,
    data: &[Vec<f64>],
    opt: &OptimizerConfig,
) -> std::result::Result<FitTrace, TrainAbort<FitTrace>> {
    let abort = |error: Error, trace: FitTrace, epoch: usize| TrainAbort { error, trace, epoch };
    if data.is_empty() {
        return Err(abort(Error::input("training data is empty"), FitTrace::default(), 0));
    }
    if let Err(e) = model.check_rows(data).and_then(|_| opt.validate()) {
        return Err(abort(e, FitTrace::default(), 0));
    }

    let mut trace = FitTrace::default();
    match model.mean_nll(data) {
        Ok(v) if v.is_finite() => trace.nll.push(v),
        Ok(_) => return Err(abort(Error::numeric(None, "initial loss is not finite"), trace, 0)),
        Err(e) => return Err(abort(e, trace, 0)),
    }

    let mut rng = seed::rng(opt.seed);
    let mut state = OptimizerState::new(model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = opt.batch_size.min(data.len());
    let mut best = (trace.nll[0], model.params());

    for epoch in 1..=opt.max_epochs {
        let checkpoint = model.params();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut params = checkpoint.clone();
        let mut failed = None;
        for idx in order.chunks(batch) {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = match model.nll_and_grad(&rows) {
                Ok(v) => v,
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                failed = Some(Error::numeric(None, format!("non-finite loss in epoch {epoch}")));
                break;
            }
            step(&mut params, &grad, &mut state, opt).expect("shapes are consistent");
            model.set_params(&params).expect("shapes are consistent");
        }
        let epoch_loss = match failed {
            None => model.mean_nll(data).and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::numeric(None, format!("non-finite loss after epoch {epoch}")))
                }
            }),
            Some(e) => Err(e),
        };
        match epoch_loss {
            Ok(v) => {
                if v < best.0 {
                    best = (v, model.params());
                }
                trace.nll.push(v);
            }
            Err(e) => {
                model.set_params(&checkpoint).expect("shapes are consistent");
                return Err(abort(e, trace, epoch));
            }
        }
    }
    model.set_params(&best.1).expect("shapes are consistent");
    Ok(trace)
}
