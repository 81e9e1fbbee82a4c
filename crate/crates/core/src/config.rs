//! Run configuration for the command-line pipeline.
//!
//! Values are resolved as defaults < config file < `--set key=value` flags.
//! Keys are dotted paths into the TOML document, e.g. `loss.w_d=0.05` or
//! `tail_train.max_epochs=30`. Unknown keys are rejected.
//!
//! Every random stream is seeded with `derive_seed(seed, label)` using the
//! labels in [`labels`], so changing one component's settings leaves the
//! others' draws untouched.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusteredDataset, FloorPairing};
use crate::data::{self, Component, DistributionKind, DistributionSpec, OodMode};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::numerics::{Method, OptimizerConfig};
use crate::scoring::{epsilon_from_quantile, ScoreConfig};
use crate::seed::derive_seed;
use crate::tail::{entropy_weight_for_level, LossWeights, TailConfig};

/// File name of the echoed configuration inside the output directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Seed labels, one per random stream.
pub mod labels {
    pub const DATA_TRAIN: &str = "data.train";
    pub const DATA_HELD_OUT: &str = "data.held_out";
    pub const DATA_SPLIT: &str = "data.split";
    pub const FLOW_INIT: &str = "flow.init";
    pub const FLOW_FIT: &str = "flow.fit";
    pub const TAIL_INIT: &str = "tail.init";
    pub const TAIL_FIT: &str = "tail.fit";
    pub const GENERATE: &str = "generate";
    pub const REPORT_LATENT: &str = "report.latent";
    pub const BOUNDARY: &str = "evaluate.boundary";
    pub const OOD_PREFIX: &str = "ood.";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

/// A value that is either given or derived from the trained density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Auto(AutoTag),
    Value(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// The three-Gaussian reference fixture.
    #[default]
    TriGauss,
    /// `kind`, `components` and `ring_radius` below.
    Mixture,
    /// Labelled CSV at `path` (`label,x0,...`).
    Csv,
    /// IDX image and label files.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training samples drawn for generated sources.
    pub n: usize,
    /// Held-out normal samples: drawn fresh for generated sources, split off for files.
    pub held_out_n: usize,
    pub kind: DistributionKind,
    pub components: Vec<Component>,
    pub ring_radius: f64,
    pub path: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Class removed from the normal data and evaluated as anomalous.
    pub leave_out: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::TriGauss,
            n: DistributionSpec::TRI_GAUSS_N,
            held_out_n: 1000,
            kind: DistributionKind::GaussianMixture,
            components: Vec::new(),
            ring_radius: 0.0,
            path: None,
            idx_images: None,
            idx_labels: None,
            leave_out: None,
        }
    }
}

/// Optimizer settings; the seed comes from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    fn with_batch(batch_size: usize) -> Self {
        let o = OptimizerConfig::default();
        TrainConfig {
            method: o.method,
            step_size: o.step_size,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            max_epochs: o.max_epochs,
            batch_size,
        }
    }

    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            method: self.method,
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_batch(OptimizerConfig::default().batch_size)
    }
}

/// Loss weights; the batch size `N` is `tail_train.batch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_pr: f64,
    pub w_d: f64,
    /// `"auto"` puts the minimum of `p + w_e p ln p` at the support threshold ε.
    pub w_e: AutoOr<f64>,
    pub w_sc: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            w_pr: w.w_pr,
            w_d: w.w_d,
            w_e: AutoOr::Auto(AutoTag::Auto),
            w_sc: w.w_sc,
            p: w.p,
            q: w.q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    /// `"auto"` uses the `epsilon_quantile` of training densities.
    pub epsilon: AutoOr<f64>,
    pub epsilon_quantile: f64,
    pub alpha_density: f64,
    pub alpha_distance: f64,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            epsilon: AutoOr::Auto(AutoTag::Auto),
            epsilon_quantile: 0.05,
            alpha_density: 1.0,
            alpha_distance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Shift,
    UniformBox,
}

/// An out-of-distribution set built from the held-out normal data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSet {
    pub name: String,
    pub kind: OodKind,
    /// Shift distance, or box inflation on every side.
    pub magnitude: f64,
    /// Number of uniform draws (uniform_box only).
    #[serde(default)]
    pub n: Option<usize>,
}

impl OodSet {
    pub fn mode(&self, default_n: usize) -> OodMode {
        match self.kind {
            OodKind::Shift => OodMode::Shift {
                magnitude: self.magnitude,
            },
            OodKind::UniformBox => OodMode::UniformBox {
                margin: self.magnitude,
                n: self.n.unwrap_or(default_n),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ood: Vec<OodSet>,
    /// Tail samples checked against the proximity inequality.
    pub boundary_n: usize,
    pub pairing: FloorPairing,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let sigma = 0.7;
        EvalConfig {
            ood: vec![
                OodSet {
                    name: "shift_6sigma".into(),
                    kind: OodKind::Shift,
                    magnitude: 6.0 * sigma,
                    n: None,
                },
                OodSet {
                    name: "shift_10".into(),
                    kind: OodKind::Shift,
                    magnitude: 10.0,
                    n: None,
                },
                OodSet {
                    name: "uniform_box".into(),
                    kind: OodKind::UniformBox,
                    magnitude: 20.0,
                    n: Some(1000),
                },
            ],
            boundary_n: 1000,
            pairing: FloorPairing::AllPairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    /// All outputs are written below this directory.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub flow_train: TrainConfig,
    pub tail: TailConfig,
    pub tail_train: TrainConfig,
    pub loss: LossConfig,
    pub score: ScoreSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            flow: FlowConfig::default(),
            flow_train: TrainConfig::default(),
            tail: TailConfig::default(),
            tail_train: TrainConfig::with_batch(LossWeights::default().batch_size),
            loss: LossConfig::default(),
            score: ScoreSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("invalid key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("key '{key}': '{p}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg =
            RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.flow_train.optimizer(0).validate()?;
        self.tail_train.optimizer(0).validate()?;
        let mut w = self.loss_weights(1.0);
        if let AutoOr::Value(v) = self.loss.w_e {
            w.w_e = v;
        }
        w.validate()?;
        if let AutoOr::Value(e) = self.score.epsilon {
            if !(e > 0.0) {
                return Err(Error::config(format!("score.epsilon must be > 0, got {e}")));
            }
        }
        if !(self.score.epsilon_quantile > 0.0 && self.score.epsilon_quantile < 1.0) {
            return Err(Error::config("score.epsilon_quantile must lie in (0, 1)"));
        }
        self.score_config(1.0).validate()?;
        match self.data.source {
            DataSource::TriGauss | DataSource::Mixture => self.distribution(0)?.validate()?,
            DataSource::Csv if self.data.path.is_none() => {
                return Err(Error::config("data.source = \"csv\" needs data.path"))
            }
            DataSource::Idx if self.data.idx_images.is_none() || self.data.idx_labels.is_none() => {
                return Err(Error::config(
                    "data.source = \"idx\" needs data.idx_images and data.idx_labels",
                ))
            }
            _ => {}
        }
        for s in &self.eval.ood {
            if !(s.magnitude >= 0.0) {
                return Err(Error::config(format!("eval.ood '{}': magnitude must be >= 0", s.name)));
            }
        }
        Ok(())
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    /// Generating distribution for generated sources.
    pub fn distribution(&self, seed: u64) -> Result<DistributionSpec> {
        match self.data.source {
            DataSource::TriGauss => Ok(DistributionSpec::tri_gauss(seed)),
            DataSource::Mixture => Ok(DistributionSpec {
                kind: self.data.kind,
                components: self.data.components.clone(),
                ring_radius: self.data.ring_radius,
                seed,
            }),
            _ => Err(Error::config("data source is not a generated distribution")),
        }
    }

    /// Loss weights with the entropy weight resolved against `epsilon`.
    pub fn loss_weights(&self, epsilon: f64) -> LossWeights {
        let w_e = match self.loss.w_e {
            AutoOr::Value(v) => v,
            AutoOr::Auto(_) => entropy_weight_for_level(epsilon).unwrap_or(LossWeights::default().w_e),
        };
        LossWeights {
            w_pr: self.loss.w_pr,
            w_d: self.loss.w_d,
            w_e,
            w_sc: self.loss.w_sc,
            p: self.loss.p,
            q: self.loss.q,
            batch_size: self.tail_train.batch_size,
        }
    }

    /// Resolves the entropy weight, failing if `"auto"` cannot target `epsilon`.
    pub fn resolved_loss_weights(&self, epsilon: f64) -> Result<LossWeights> {
        if let AutoOr::Auto(_) = self.loss.w_e {
            entropy_weight_for_level(epsilon)?;
        }
        Ok(self.loss_weights(epsilon))
    }

    pub fn score_config(&self, epsilon: f64) -> ScoreConfig {
        ScoreConfig {
            epsilon,
            alpha_density: self.score.alpha_density,
            alpha_distance: self.score.alpha_distance,
            p: self.loss.p,
        }
    }

    /// ε: the configured value, or the configured quantile of training densities.
    pub fn epsilon(&self, density: &FlowModel, train: &[Vec<f64>]) -> Result<f64> {
        match self.score.epsilon {
            AutoOr::Value(e) => Ok(e),
            AutoOr::Auto(_) => epsilon_from_quantile(density, train, self.score.epsilon_quantile),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Writes the effective configuration into `out_dir`.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    /// Training, held-out and (with `leave_out`) anomalous data.
    pub fn load_data(&self) -> Result<DataSplits> {
        let (train_full, held_full) = match self.data.source {
            DataSource::TriGauss | DataSource::Mixture => (
                data::generate(&self.distribution(self.seed_for(labels::DATA_TRAIN))?, self.data.n)?,
                data::generate(
                    &self.distribution(self.seed_for(labels::DATA_HELD_OUT))?,
                    self.data.held_out_n,
                )?,
            ),
            DataSource::Csv => {
                let path = self.data.path.as_ref().expect("validated");
                let (points, labels) = data::read_csv_file(path)?;
                let labels = labels.unwrap_or_else(|| vec![0; points.len()]);
                self.split(ClusteredDataset::new(points, labels)?)?
            }
            DataSource::Idx => {
                let ds = data::load_idx(
                    self.data.idx_images.as_ref().expect("validated"),
                    self.data.idx_labels.as_ref().expect("validated"),
                )?;
                self.split(ds)?
            }
        };
        match self.data.leave_out {
            None => Ok(DataSplits {
                train: train_full,
                held_out: held_full,
                left_out: None,
            }),
            Some(k) => {
                let (train, _) = data::leave_one_out(&train_full, k)?;
                let (held_out, anomaly) = data::leave_one_out(&held_full, k)?;
                Ok(DataSplits {
                    train,
                    held_out,
                    left_out: Some(anomaly),
                })
            }
        }
    }

    fn split(&self, ds: ClusteredDataset) -> Result<(ClusteredDataset, ClusteredDataset)> {
        let n = ds.len();
        let h = self.data.held_out_n;
        if h == 0 || h >= n {
            return Err(Error::config(format!("data.held_out_n = {h} must lie in [1, {n})")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(
            idx.as_mut_slice(),
            &mut crate::seed::rng(self.seed_for(labels::DATA_SPLIT)),
        );
        let pick = |ids: &[usize]| {
            ClusteredDataset::new(
                ids.iter().map(|&i| ds.points()[i].clone()).collect(),
                ids.iter().map(|&i| ds.labels()[i]).collect(),
            )
        };
        Ok((pick(&idx[h..])?, pick(&idx[..h])?))
    }
}

/// Data used by one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: ClusteredDataset,
    pub held_out: ClusteredDataset,
    /// Held-out samples of the left-out class.
    pub left_out: Option<Vec<Vec<f64>>>,
}
