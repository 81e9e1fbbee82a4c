//! Tail generator `T(z; θ)` and its four-term objective.
//!
//! For a latent batch `z_1..z_N`, outputs `y_i = T(z_i)`, reference data
//! `x_1..x_M` and a frozen density model `p_g`:
//!
//! ```text
//! L_pr  = 1/N Σ_i p_g(y_i)
//! L_d   = 1/N Σ_i min_j ||y_i - x_j||_p
//! L_e   = 1/N Σ_i p_g(y_i) log p_g(y_i)
//! L_sc  = 1/N Σ_i 1/(N-1) Σ_{j≠i} ||z_i - z_j||_p^q / ||y_i - y_j||_p^q
//! L_tot = w_pr L_pr + w_d L_d + w_e L_e + w_sc L_sc
//! ```
//!
//! Only `θ` is trained; the density model's parameters are constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{running_min, FlowConfig, FlowModel, ForwardTrace, TrainAbort};
use crate::nn::{Mlp, MlpCache, OutputInit};
use crate::numerics::{p_dist, p_norm_grad, step, OptimizerConfig, OptimizerState};
use crate::seed;

/// Added to scattering distances when differentiating, never when reporting.
const SCATTER_EPS: f64 = 1e-12;

/// Consecutive mode-collapsed batches tolerated before training aborts.
const MAX_COLLAPSED_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Copy the density model's parameters: `T = G` before training.
    #[default]
    FromDensity,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailArch {
    /// Same coupling stack as the density model.
    #[default]
    Coupling,
    /// `y = f(z)` with a tanh MLP.
    FeedForward,
    /// `y = z + f(z)`.
    Residual,
}

/// Which point set the distance term measures against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReference {
    #[default]
    Data,
    /// Samples drawn from the density model instead of the training data.
    FlowSamples,
}

/// Domain of the probability term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityDomain {
    /// `L_pr` averages `p_g(y)`.
    #[default]
    Raw,
    /// `L_pr` averages `log p_g(y)`; avoids underflow in high dimension.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailConfig {
    pub init: InitMode,
    pub arch: TailArch,
    /// Hidden width of the feed-forward and residual networks.
    pub hidden: usize,
    /// Hidden layers of the feed-forward and residual networks.
    pub depth: usize,
    /// Output-layer gain for random initialization.
    pub init_gain: f64,
    pub distance_reference: DistanceReference,
    pub density_domain: DensityDomain,
    /// Stop when the best `L_tot` improved by less than `convergence_tol`
    /// (relative) over the last `convergence_window` epochs. Zero window disables.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Return the parameters with the lowest monitored `L_tot` instead of the last ones.
    pub keep_best: bool,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig {
            init: InitMode::FromDensity,
            arch: TailArch::Coupling,
            hidden: 64,
            depth: 2,
            init_gain: 0.1,
            distance_reference: DistanceReference::Data,
            density_domain: DensityDomain::Raw,
            convergence_window: 0,
            convergence_tol: 1e-4,
            keep_best: true,
        }
    }
}

/// Weights and norms of the objective. `w_pr` is pinned to 1 by
/// [`LossWeights::validate`]; the loss functions use whatever they are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_pr: f64,
    pub w_d: f64,
    pub w_e: f64,
    pub w_sc: f64,
    pub p: f64,
    pub q: f64,
    /// Latent batch size `N`; must not exceed the number of reference rows `M`.
    pub batch_size: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pr: 1.0,
            w_d: 0.02,
            w_e: 0.25,
            w_sc: 0.0001,
            p: 2.0,
            q: 2.0,
            batch_size: 256,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_pr != 1.0 {
            return Err(Error::config(format!("w_pr is fixed at 1, got {}", self.w_pr)));
        }
        for (name, v) in [("w_d", self.w_d), ("w_e", self.w_e), ("w_sc", self.w_sc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.p >= 1.0) || !(self.q >= 1.0) {
            return Err(Error::config(format!(
                "p and q must be >= 1, got p = {}, q = {}",
                self.p, self.q
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size N must be at least 2"));
        }
        Ok(())
    }
}

/// Entropy weight that puts the minimum of the per-sample density objective
/// `p + w_e p ln p` at `p = level`, i.e. `w_e = -1 / (1 + ln level)`.
/// Needs `0 < level < 1/e`.
pub fn entropy_weight_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < (-1.0f64).exp()) {
        return Err(Error::config(format!(
            "target density level must lie in (0, 1/e), got {level}"
        )));
    }
    Ok(-1.0 / (1.0 + level.ln()))
}

#[derive(Debug, Clone, PartialEq)]
enum TailMap {
    Coupling(FlowModel),
    FeedForward(Mlp),
    Residual(Mlp),
}

/// The tail generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TailNet {
    dim: usize,
    init_mode: InitMode,
    map: TailMap,
}

enum TailTrace {
    Coupling(ForwardTrace),
    Mlp(MlpCache),
}

impl TailNet {
    /// Coupling-architecture tail wrapping `flow`.
    pub fn from_flow(flow: FlowModel, init_mode: InitMode) -> Self {
        TailNet {
            dim: flow.dim(),
            init_mode,
            map: TailMap::Coupling(flow),
        }
    }

    /// Feed-forward (`residual = false`) or residual MLP tail.
    pub fn from_mlp(net: Mlp, residual: bool, init_mode: InitMode) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::config("tail network must map R^d to R^d"));
        }
        Ok(TailNet {
            dim: net.input_dim(),
            init_mode,
            map: if residual {
                TailMap::Residual(net)
            } else {
                TailMap::FeedForward(net)
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn arch(&self) -> TailArch {
        match self.map {
            TailMap::Coupling(_) => TailArch::Coupling,
            TailMap::FeedForward(_) => TailArch::FeedForward,
            TailMap::Residual(_) => TailArch::Residual,
        }
    }

    /// The wrapped coupling model, if this tail uses the coupling architecture.
    pub fn as_flow(&self) -> Option<&FlowModel> {
        match &self.map {
            TailMap::Coupling(f) => Some(f),
            _ => None,
        }
    }

    /// The wrapped MLP for feed-forward and residual tails.
    pub fn as_mlp(&self) -> Option<&Mlp> {
        match &self.map {
            TailMap::FeedForward(m) | TailMap::Residual(m) => Some(m),
            TailMap::Coupling(_) => None,
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.map {
            TailMap::Coupling(f) => f.num_params(),
            TailMap::FeedForward(m) | TailMap::Residual(m) => m.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.map {
            TailMap::Coupling(f) => f.params(),
            TailMap::FeedForward(m) | TailMap::Residual(m) => m.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        match &mut self.map {
            TailMap::Coupling(f) => f.set_params(p),
            TailMap::FeedForward(m) | TailMap::Residual(m) => {
                if p.len() != m.num_params() {
                    return Err(Error::input(format!(
                        "expected {} parameters, got {}",
                        m.num_params(),
                        p.len()
                    )));
                }
                m.params_mut().copy_from_slice(p);
                Ok(())
            }
        }
    }

    /// `T(z)`.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::input(format!(
                "expected latent of dimension {}, got {}",
                self.dim,
                z.len()
            )));
        }
        let y = match &self.map {
            TailMap::Coupling(f) => f.forward(z)?,
            TailMap::FeedForward(m) => m.forward(z),
            TailMap::Residual(m) => m.forward(z).iter().zip(z).map(|(a, b)| a + b).collect(),
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "tail output is not finite"));
        }
        Ok(y)
    }

    pub fn apply_batch(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        z.par_iter().map(|r| self.apply(r)).collect()
    }

    fn trace(&self, z: &[f64]) -> Result<(Vec<f64>, TailTrace)> {
        if z.len() != self.dim {
            return Err(Error::input(format!(
                "expected latent of dimension {}, got {}",
                self.dim,
                z.len()
            )));
        }
        let (y, tr) = match &self.map {
            TailMap::Coupling(f) => {
                let tr = f.trace_forward(z)?;
                (tr.output().to_vec(), TailTrace::Coupling(tr))
            }
            TailMap::FeedForward(m) => {
                let (y, c) = m.forward_cached(z);
                (y, TailTrace::Mlp(c))
            }
            TailMap::Residual(m) => {
                let (y, c) = m.forward_cached(z);
                (y.iter().zip(z).map(|(a, b)| a + b).collect(), TailTrace::Mlp(c))
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "tail output is not finite"));
        }
        Ok((y, tr))
    }

    fn backward(&self, tr: &TailTrace, grad_y: &[f64], grad_params: &mut [f64]) {
        match (&self.map, tr) {
            (TailMap::Coupling(f), TailTrace::Coupling(t)) => {
                f.backward_forward(t, grad_y, Some(grad_params));
            }
            (TailMap::FeedForward(m) | TailMap::Residual(m), TailTrace::Mlp(c)) => {
                m.backward(c, grad_y, Some(grad_params));
            }
            _ => unreachable!("trace does not match architecture"),
        }
    }
}

/// Builds the tail generator. `FromDensity` copies the density model and
/// requires the coupling architecture; `Random` draws fresh parameters.
pub fn init_tail(density: &FlowModel, flow_cfg: &FlowConfig, cfg: &TailConfig, seed: u64) -> Result<TailNet> {
    let d = density.dim();
    match (cfg.init, cfg.arch) {
        (InitMode::FromDensity, TailArch::Coupling) => Ok(TailNet::from_flow(density.clone(), InitMode::FromDensity)),
        (InitMode::FromDensity, arch) => Err(Error::config(format!(
            "initialization from the density model needs the coupling architecture, got {arch:?}"
        ))),
        (InitMode::Random, TailArch::Coupling) => Ok(TailNet::from_flow(
            FlowModel::random(d, flow_cfg, cfg.init_gain, seed)?,
            InitMode::Random,
        )),
        (InitMode::Random, arch) => {
            if cfg.hidden == 0 {
                return Err(Error::config("tail hidden width must be positive"));
            }
            let mut sizes = vec![d];
            sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
            sizes.push(d);
            let mut rng = seed::rng(seed);
            let net = Mlp::new(&sizes, OutputInit::Random(cfg.init_gain), &mut rng);
            TailNet::from_mlp(net, arch == TailArch::Residual, InitMode::Random)
        }
    }
}

/// Values of the objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_pr: f64,
    pub l_d: f64,
    pub l_e: f64,
    pub l_sc: f64,
    pub l_tot: f64,
}

impl LossTerms {
    fn combine(l_pr: f64, l_d: f64, l_e: f64, l_sc: f64, w: &LossWeights) -> Self {
        LossTerms {
            l_pr,
            l_d,
            l_e,
            l_sc,
            l_tot: w.w_pr * l_pr + w.w_d * l_d + w.w_e * l_e + w.w_sc * l_sc,
        }
    }
}

fn check_inputs(tail: &TailNet, z: &[Vec<f64>], data: &[Vec<f64>], density: &FlowModel) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::input("the scattering term needs a latent batch of at least 2"));
    }
    if data.is_empty() {
        return Err(Error::input("reference data is empty"));
    }
    if z.len() > data.len() {
        return Err(Error::input(format!(
            "batch size N = {} exceeds sample size M = {}",
            z.len(),
            data.len()
        )));
    }
    if density.dim() != tail.dim() {
        return Err(Error::config("tail and density dimensions differ"));
    }
    let d = tail.dim();
    for r in z.iter().chain(data) {
        if r.len() != d || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(
                "latent and data rows must be finite and of the model dimension",
            ));
        }
    }
    Ok(())
}

fn nearest(y: &[f64], data: &[Vec<f64>], p: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, x) in data.iter().enumerate() {
        let d = p_dist(y, x, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn latent_powers(z: &[Vec<f64>], w: &LossWeights) -> Vec<Vec<f64>> {
    let n = z.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        p_dist(&z[i], &z[j], w.p).powf(w.q)
                    }
                })
                .collect()
        })
        .collect()
}

/// Scattering term from latent-distance powers and outputs.
fn scattering(zq: &[Vec<f64>], y: &[Vec<f64>], w: &LossWeights) -> Result<f64> {
    let n = y.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let dy = p_dist(&y[i], &y[j], w.p);
            if dy == 0.0 {
                return Err(Error::ModeCollapse {
                    i: i.min(j),
                    j: i.max(j),
                });
            }
            row += zq[i][j] / dy.powf(w.q);
        }
        total += row / (n - 1) as f64;
    }
    Ok(total / n as f64)
}

/// Evaluates the four terms and their weighted sum.
pub fn loss_terms(
    tail: &TailNet,
    z_batch: &[Vec<f64>],
    data: &[Vec<f64>],
    density: &FlowModel,
    w: &LossWeights,
    domain: DensityDomain,
) -> Result<LossTerms> {
    check_inputs(tail, z_batch, data, density)?;
    let y = tail.apply_batch(z_batch)?;
    let logp = density.log_density_batch(&y)?;
    let n = y.len() as f64;
    let l_pr = match domain {
        DensityDomain::Raw => logp.iter().map(|l| l.exp()).sum::<f64>() / n,
        DensityDomain::Log => logp.iter().sum::<f64>() / n,
    };
    let l_e = logp.iter().map(|l| l.exp() * l).sum::<f64>() / n;
    let dists: Vec<f64> = y.par_iter().map(|yi| nearest(yi, data, w.p).1).collect();
    let l_d = dists.iter().sum::<f64>() / n;
    let l_sc = scattering(&latent_powers(z_batch, w), &y, w)?;
    Ok(LossTerms::combine(l_pr, l_d, l_e, l_sc, w))
}

/// [`loss_terms`] plus the gradient of `L_tot` with respect to the tail parameters.
pub fn loss_and_grad(
    tail: &TailNet,
    z_batch: &[Vec<f64>],
    data: &[Vec<f64>],
    density: &FlowModel,
    w: &LossWeights,
    domain: DensityDomain,
) -> Result<(LossTerms, Vec<f64>)> {
    check_inputs(tail, z_batch, data, density)?;
    let n = z_batch.len();
    let nf = n as f64;

    let fwd: Vec<(Vec<f64>, TailTrace)> = z_batch.par_iter().map(|z| tail.trace(z)).collect::<Result<_>>()?;
    let y: Vec<Vec<f64>> = fwd.iter().map(|(y, _)| y.clone()).collect();

    // density and distance terms, per sample
    let per_sample: Vec<(f64, usize, f64, Vec<f64>)> = y
        .par_iter()
        .map(|yi| -> Result<(f64, usize, f64, Vec<f64>)> {
            let tr = density.trace_inverse(yi)?;
            let lp = tr.log_density();
            let p = lp.exp();
            let coef_pr = match domain {
                DensityDomain::Raw => w.w_pr * p,
                DensityDomain::Log => w.w_pr,
            };
            let coef = (coef_pr + w.w_e * p * (lp + 1.0)) / nf;
            let mut g = density.backward_log_density(&tr, coef, None);
            let (j, dist) = nearest(yi, data, w.p);
            if w.w_d != 0.0 {
                let diff: Vec<f64> = yi.iter().zip(&data[j]).map(|(a, b)| a - b).collect();
                for (gk, dk) in g.iter_mut().zip(p_norm_grad(&diff, w.p)) {
                    *gk += w.w_d * dk / nf;
                }
            }
            Ok((lp, j, dist, g))
        })
        .collect::<Result<_>>()?;

    let l_pr = match domain {
        DensityDomain::Raw => per_sample.iter().map(|s| s.0.exp()).sum::<f64>() / nf,
        DensityDomain::Log => per_sample.iter().map(|s| s.0).sum::<f64>() / nf,
    };
    let l_e = per_sample.iter().map(|s| s.0.exp() * s.0).sum::<f64>() / nf;
    let l_d = per_sample.iter().map(|s| s.2).sum::<f64>() / nf;
    let zq = latent_powers(z_batch, w);
    let l_sc = scattering(&zq, &y, w)?;

    // scattering gradient: each unordered pair contributes twice
    let sc_scale = w.w_sc * 2.0 / (nf * (nf - 1.0));
    let sc_grads: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; tail.dim()];
            if w.w_sc == 0.0 {
                return g;
            }
            for j in (0..n).filter(|&j| j != i) {
                let diff: Vec<f64> = y[i].iter().zip(&y[j]).map(|(a, b)| a - b).collect();
                let dy = p_dist(&y[i], &y[j], w.p) + SCATTER_EPS;
                let c = -w.q * zq[i][j] * dy.powf(-w.q - 1.0) * sc_scale;
                for (gk, nk) in g.iter_mut().zip(p_norm_grad(&diff, w.p)) {
                    *gk += c * nk;
                }
            }
            g
        })
        .collect();

    let np = tail.num_params();
    let partial: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(16)
        .map(|idx| {
            let mut gp = vec![0.0; np];
            for &i in idx {
                let gy: Vec<f64> = per_sample[i].3.iter().zip(&sc_grads[i]).map(|(a, b)| a + b).collect();
                tail.backward(&fwd[i].1, &gy, &mut gp);
            }
            gp
        })
        .collect();
    let mut grad = vec![0.0; np];
    for g in partial {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((LossTerms::combine(l_pr, l_d, l_e, l_sc, w), grad))
}

/// Per-epoch loss record of tail training, evaluated on a fixed monitor batch.
/// Entry 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TailTrainTrace {
    pub epochs: Vec<LossTerms>,
    /// Batches skipped because two outputs coincided.
    pub collapsed_batches: usize,
}

impl TailTrainTrace {
    pub fn total(&self) -> Vec<f64> {
        self.epochs.iter().map(|t| t.l_tot).collect()
    }

    pub fn running_best(&self) -> Vec<f64> {
        running_min(&self.total())
    }
}

/// Minimizes `L_tot` over the tail parameters with the density frozen.
///
/// Each epoch takes `ceil(M / N)` steps, each on a fresh latent batch of `N`
/// rows. `opt.batch_size` is not used here; the batch size is `w.batch_size`.
pub fn train_tail(
    tail: &mut TailNet,
    density: &FlowModel,
    data: &[Vec<f64>],
    w: &LossWeights,
    opt: &OptimizerConfig,
    cfg: &TailConfig,
) -> std::result::Result<TailTrainTrace, TrainAbort<TailTrainTrace>> {
    let abort = |error, trace, epoch| TrainAbort { error, trace, epoch };
    let mut trace = TailTrainTrace::default();
    if let Err(e) = opt.validate() {
        return Err(abort(e, trace, 0));
    }
    let n = w.batch_size;
    let d = tail.dim();
    let mut rng = seed::rng(opt.seed);

    let reference: Vec<Vec<f64>> = match cfg.distance_reference {
        DistanceReference::Data => data.to_vec(),
        DistanceReference::FlowSamples => match density.sample_with(data.len(), &mut rng) {
            Ok(s) => s,
            Err(e) => return Err(abort(e, trace, 0)),
        },
    };
    let monitor = seed::standard_normal_rows_from(&mut rng, n, d);
    match loss_terms(tail, &monitor, &reference, density, w, cfg.density_domain) {
        Ok(t) if t.l_tot.is_finite() => trace.epochs.push(t),
        Ok(_) => return Err(abort(Error::numeric(None, "initial loss is not finite"), trace, 0)),
        Err(e) => return Err(abort(e, trace, 0)),
    }

    let steps = reference.len().div_ceil(n);
    let mut state = OptimizerState::new(tail.num_params());
    let mut collapsed_run = 0usize;
    let mut best = (trace.epochs[0].l_tot, tail.params());
    for epoch in 1..=opt.max_epochs {
        let checkpoint = tail.params();
        let mut params = checkpoint.clone();
        let mut failure = None;
        for _ in 0..steps {
            let z = seed::standard_normal_rows_from(&mut rng, n, d);
            match loss_and_grad(tail, &z, &reference, density, w, cfg.density_domain) {
                Ok((terms, grad)) => {
                    if !terms.l_tot.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        failure = Some(Error::numeric(None, format!("non-finite loss in epoch {epoch}")));
                        break;
                    }
                    collapsed_run = 0;
                    step(&mut params, &grad, &mut state, opt).expect("shapes are consistent");
                    tail.set_params(&params).expect("shapes are consistent");
                }
                Err(e @ Error::ModeCollapse { .. }) => {
                    trace.collapsed_batches += 1;
                    collapsed_run += 1;
                    if collapsed_run >= MAX_COLLAPSED_BATCHES {
                        failure = Some(e);
                        break;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let eval = match failure {
            None => loss_terms(tail, &monitor, &reference, density, w, cfg.density_domain).and_then(|t| {
                if t.l_tot.is_finite() {
                    Ok(t)
                } else {
                    Err(Error::numeric(None, format!("non-finite loss after epoch {epoch}")))
                }
            }),
            Some(e) => Err(e),
        };
        match eval {
            Ok(t) => {
                if t.l_tot < best.0 {
                    best = (t.l_tot, tail.params());
                }
                trace.epochs.push(t);
            }
            Err(e) => {
                tail.set_params(&checkpoint).expect("shapes are consistent");
                return Err(abort(e, trace, epoch));
            }
        }
        if converged(&trace, cfg) {
            break;
        }
    }
    if cfg.keep_best {
        tail.set_params(&best.1).expect("shapes are consistent");
    }
    Ok(trace)
}

fn converged(trace: &TailTrainTrace, cfg: &TailConfig) -> bool {
    let win = cfg.convergence_window;
    if win == 0 || trace.epochs.len() <= win {
        return false;
    }
    let best = trace.running_best();
    let now = best[best.len() - 1];
    let then = best[best.len() - 1 - win];
    (then - now) <= cfg.convergence_tol * then.abs().max(1e-12)
}

/// Applies the tail to `n` fresh standard normal rows drawn with `seed`.
pub fn generate_boundary(tail: &TailNet, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    tail.apply_batch(&seed::standard_normal_rows(n, tail.dim(), seed))
}
