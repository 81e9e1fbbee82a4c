//! Anomaly scores, support membership, ranking metrics and loss-comparison
//! reports.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::fmt9;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::{average_ranks, p_dist, quantile, TwoFloat};
use crate::seed;
use crate::tail::{loss_terms, DensityDomain, LossWeights, TailNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Density threshold of the support.
    pub epsilon: f64,
    pub alpha_density: f64,
    pub alpha_distance: f64,
    pub p: f64,
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha_density >= 0.0 && self.alpha_distance >= 0.0) || self.alpha_density + self.alpha_distance <= 0.0
        {
            return Err(Error::config("score weights must be non-negative with a positive sum"));
        }
        if !(self.p >= 1.0) {
            return Err(Error::config(format!("norm order p must be >= 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// The `q`-quantile of `p_g` over `data`. With `q = 0.05` this is the default ε.
pub fn epsilon_from_quantile(density: &FlowModel, data: &[Vec<f64>], q: f64) -> Result<f64> {
    let dens: Vec<f64> = density.log_density_batch(data)?.into_iter().map(f64::exp).collect();
    let eps = quantile(&dens, q)?;
    if eps > 0.0 {
        Ok(eps)
    } else {
        Err(Error::numeric(None, "density quantile underflows to zero"))
    }
}

fn nearest_distance(x: &[f64], data: &[Vec<f64>], p: f64) -> f64 {
    data.iter().map(|r| p_dist(x, r, p)).fold(f64::INFINITY, f64::min)
}

/// `alpha_density * (-log p_g(x)) + alpha_distance * min_j ||x - x_j||_p`.
/// A zero weight drops its term entirely.
pub fn anomaly_score(x: &[f64], density: &FlowModel, data: &[Vec<f64>], cfg: &ScoreConfig) -> Result<f64> {
    let mut s = 0.0;
    if cfg.alpha_density != 0.0 {
        s += cfg.alpha_density * -density.log_density(x)?;
    }
    if cfg.alpha_distance != 0.0 {
        if data.is_empty() {
            return Err(Error::input("distance term needs reference data"));
        }
        s += cfg.alpha_distance * nearest_distance(x, data, cfg.p);
    }
    Ok(s)
}

pub fn anomaly_scores(xs: &[Vec<f64>], density: &FlowModel, data: &[Vec<f64>], cfg: &ScoreConfig) -> Result<Vec<f64>> {
    xs.par_iter().map(|x| anomaly_score(x, density, data, cfg)).collect()
}

/// Per-point breakdown written by the `score` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointScore {
    pub score: f64,
    pub log_density: f64,
    pub distance: f64,
    pub in_support: bool,
}

pub fn score_points(
    xs: &[Vec<f64>],
    density: &FlowModel,
    data: &[Vec<f64>],
    cfg: &ScoreConfig,
) -> Result<Vec<PointScore>> {
    if data.is_empty() {
        return Err(Error::input("distance term needs reference data"));
    }
    xs.par_iter()
        .map(|x| {
            let log_density = density.log_density(x)?;
            let distance = nearest_distance(x, data, cfg.p);
            Ok(PointScore {
                score: cfg.alpha_density * -log_density + cfg.alpha_distance * distance,
                log_density,
                distance,
                in_support: log_density.exp() >= cfg.epsilon,
            })
        })
        .collect()
}

/// `p_g(x) >= ε`.
pub fn support_membership(x: &[f64], density: &FlowModel, cfg: &ScoreConfig) -> Result<bool> {
    Ok(density.log_density(x)?.exp() >= cfg.epsilon)
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over mid-ranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::input("AUROC needs both classes"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: the mean over positives of the precision at the
/// threshold where each is recalled. Tied scores share one threshold.
/// Accumulated in double-double so small cases are correctly rounded.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::input("AUPRC needs at least one positive"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut sum = TwoFloat::new(0.0);
    let (mut tp, mut seen, mut i) = (0usize, 0usize, 0usize);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let hits = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += hits;
        seen += j - i + 1;
        if hits > 0 {
            sum = sum.add(TwoFloat::new((hits * tp) as f64).div_f64(seen as f64));
        }
        i = j + 1;
    }
    Ok(sum.div_f64(pos as f64).to_f64())
}

/// A named point set evaluated in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSet {
    pub name: String,
    pub points: Vec<Vec<f64>>,
}

impl NamedSet {
    pub fn new(name: impl Into<String>, points: Vec<Vec<f64>>) -> Self {
        NamedSet {
            name: name.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub l_tot: f64,
    pub l_d: f64,
    pub l_sc: f64,
    pub l_pr: f64,
    pub l_e: f64,
    /// Separation of this set from the first (normal) set; absent on the first row.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == name)
    }

    /// CSV with a header row and 9 significant digits; missing metrics are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        wr.write_record(["dataset", "l_tot", "l_d", "l_sc", "l_pr", "l_e", "auroc", "auprc"])
            .map_err(io)?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
            wr.write_record([
                r.dataset.clone(),
                fmt9(r.l_tot),
                fmt9(r.l_d),
                fmt9(r.l_sc),
                fmt9(r.l_pr),
                fmt9(r.l_e),
                opt(r.auroc),
                opt(r.auprc),
            ])
            .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One row per dataset: the tail losses with that dataset as the distance
/// reference, on a single latent batch of `w.batch_size` rows drawn from
/// `z_seed`, plus AUROC/AUPRC of [`anomaly_score`] (distance measured to
/// `train`) against the first dataset.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    tail: &TailNet,
    density: &FlowModel,
    train: &[Vec<f64>],
    datasets: &[NamedSet],
    w: &LossWeights,
    domain: DensityDomain,
    cfg: &ScoreConfig,
    z_seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::input("report needs at least one dataset"));
    }
    let z = seed::standard_normal_rows(w.batch_size, tail.dim(), z_seed);
    let mut rows = Vec::with_capacity(datasets.len());
    let mut normal_scores: Option<Vec<f64>> = None;
    for (k, set) in datasets.iter().enumerate() {
        let t = loss_terms(tail, &z, &set.points, density, w, domain).map_err(|e| annotate(e, &set.name))?;
        let scores = anomaly_scores(&set.points, density, train, cfg)?;
        let (auroc_v, auprc_v) = match (k, &normal_scores) {
            (0, _) | (_, None) => (None, None),
            (_, Some(base)) => {
                let all: Vec<f64> = base.iter().chain(&scores).copied().collect();
                let labels: Vec<bool> = std::iter::repeat_n(false, base.len())
                    .chain(std::iter::repeat_n(true, scores.len()))
                    .collect();
                (Some(auroc(&all, &labels)?), Some(auprc(&all, &labels)?))
            }
        };
        if k == 0 {
            normal_scores = Some(scores);
        }
        rows.push(ReportRow {
            dataset: set.name.clone(),
            l_tot: t.l_tot,
            l_d: t.l_d,
            l_sc: t.l_sc,
            l_pr: t.l_pr,
            l_e: t.l_e,
            auroc: auroc_v,
            auprc: auprc_v,
        });
    }
    Ok(EvalReport { rows })
}

fn annotate(e: Error, name: &str) -> Error {
    match e {
        Error::Input(m) => Error::Input(format!("dataset '{name}': {m}")),
        other => other,
    }
}
