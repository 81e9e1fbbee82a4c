//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numeric failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::clustering::{check_proximity_batch, summarize, ProximitySummary};
use crate::config::{labels, RunConfig};
use crate::data::{self, fmt9, make_ood};
use crate::error::{Error, Result};
use crate::flow::{fit_mle, FlowModel};
use crate::scoring::{build_report, score_points, NamedSet};
use crate::tail::{generate_boundary, init_tail, train_tail};

#[derive(Debug, Parser)]
#[command(
    name = "tailflow",
    version,
    about = "Density model, tail sample generator and anomaly scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set loss.w_d=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the density model to the normal training data.
    TrainDensity {
        #[command(flatten)]
        common: Common,
    },
    /// Train the tail generator against a frozen density model.
    TrainTail {
        #[command(flatten)]
        common: Common,
        /// Density checkpoint written by `train-density`.
        #[arg(long)]
        density: PathBuf,
    },
    /// Write tail samples to `samples.csv`.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tail: PathBuf,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        /// Sampling seed; derived from the root seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the rows of a CSV file.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        density: PathBuf,
        /// CSV of points, optionally with a leading `label` column.
        #[arg(long)]
        input: PathBuf,
    },
    /// Loss-comparison report plus proximity statistics of tail samples.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        tail: PathBuf,
        /// `NAME=PATH` of a CSV point set. Repeatable; the first is the normal
        /// reference. Without it, held-out data and the configured OoD sets are used.
        #[arg(long = "dataset", value_name = "NAME=PATH")]
        datasets: Vec<String>,
    },
    /// Write the training and held-out data to `train.csv` and `held_out.csv`.
    ExportData {
        #[command(flatten)]
        common: Common,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Input(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::Numeric { .. } | Error::Domain(_) | Error::NoConvergence { .. } | Error::ModeCollapse { .. } => 3,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainDensity { common } => train_density(&load(&common)?),
        Command::TrainTail { common, density } => train_tail_cmd(&load(&common)?, &density),
        Command::Generate { common, tail, n, seed } => generate(&load(&common)?, &tail, n, seed),
        Command::Score { common, density, input } => score(&load(&common)?, &density, &input),
        Command::Evaluate {
            common,
            density,
            tail,
            datasets,
        } => evaluate(&load(&common)?, &density, &tail, &datasets),
        Command::ExportData { common } => export_data(&load(&common)?),
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    cfg.echo()?;
    Ok(cfg)
}

fn create(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>> {
    let path = cfg.out_dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn check_dim(model_dim: usize, data_dim: usize, what: &str) -> Result<()> {
    if model_dim != data_dim {
        return Err(Error::config(format!(
            "{what} has dimension {model_dim} but the data has dimension {data_dim}"
        )));
    }
    Ok(())
}

fn train_density(cfg: &RunConfig) -> Result<()> {
    let splits = cfg.load_data()?;
    let train = splits.train.points();
    let mut flow = FlowModel::new(splits.train.dim(), &cfg.flow, cfg.seed_for(labels::FLOW_INIT))?;
    flow.standardize_to(train)?;
    let opt = cfg.flow_train.optimizer(cfg.seed_for(labels::FLOW_FIT));
    let (trace, outcome) = match fit_mle(&mut flow, train, &opt) {
        Ok(t) => (t, Ok(())),
        Err(abort) => (abort.trace, Err(abort.error)),
    };
    checkpoint::save_flow(&cfg.out_dir.join("flow.ckpt"), &flow)?;
    let mut w = create(cfg, "flow_trace.csv")?;
    writeln!(w, "epoch,nll")?;
    for (e, v) in trace.nll.iter().enumerate() {
        writeln!(w, "{e},{}", fmt9(*v))?;
    }
    w.flush()?;
    outcome?;
    if let (Some(first), Some(best)) = (trace.nll.first(), trace.running_best().last()) {
        println!(
            "density model: NLL {first:.4} -> {best:.4} over {} epochs",
            trace.nll.len() - 1
        );
    }
    Ok(())
}

fn train_tail_cmd(cfg: &RunConfig, density_path: &Path) -> Result<()> {
    let density = checkpoint::load_flow(density_path)?;
    let splits = cfg.load_data()?;
    check_dim(density.dim(), splits.train.dim(), "density checkpoint")?;
    let train = splits.train.points();
    let eps = cfg.epsilon(&density, train)?;
    let w = cfg.resolved_loss_weights(eps)?;
    let mut tail = init_tail(&density, &cfg.flow, &cfg.tail, cfg.seed_for(labels::TAIL_INIT))?;
    let opt = cfg.tail_train.optimizer(cfg.seed_for(labels::TAIL_FIT));
    let (trace, outcome) = match train_tail(&mut tail, &density, train, &w, &opt, &cfg.tail) {
        Ok(t) => (t, Ok(())),
        Err(abort) => (abort.trace, Err(abort.error)),
    };
    checkpoint::save_tail(&cfg.out_dir.join("tail.ckpt"), &tail)?;
    let mut out = create(cfg, "tail_trace.csv")?;
    writeln!(out, "epoch,l_pr,l_d,l_e,l_sc,l_tot")?;
    for (e, t) in trace.epochs.iter().enumerate() {
        writeln!(
            out,
            "{e},{},{},{},{},{}",
            fmt9(t.l_pr),
            fmt9(t.l_d),
            fmt9(t.l_e),
            fmt9(t.l_sc),
            fmt9(t.l_tot)
        )?;
    }
    out.flush()?;
    outcome?;
    let tot = trace.total();
    println!(
        "tail generator: L_tot {:.6} -> {:.6} over {} epochs (epsilon {:.6e}, w_e {:.4})",
        tot[0],
        tot[tot.len() - 1],
        tot.len() - 1,
        eps,
        w.w_e
    );
    Ok(())
}

fn generate(cfg: &RunConfig, tail_path: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let tail = checkpoint::load_tail(tail_path)?;
    let seed = seed.unwrap_or_else(|| cfg.seed_for(labels::GENERATE));
    let samples = generate_boundary(&tail, n, seed)?;
    data::write_points_csv(create(cfg, "samples.csv")?, &samples)?;
    println!("wrote {n} samples");
    Ok(())
}

fn score(cfg: &RunConfig, density_path: &Path, input: &Path) -> Result<()> {
    let density = checkpoint::load_flow(density_path)?;
    let splits = cfg.load_data()?;
    let (points, _) = data::read_csv_file(input)?;
    check_dim(density.dim(), splits.train.dim(), "density checkpoint")?;
    if let Some(r) = points.first() {
        check_dim(density.dim(), r.len(), "density checkpoint")?;
    }
    let train = splits.train.points();
    let eps = cfg.epsilon(&density, train)?;
    let scores = score_points(&points, &density, train, &cfg.score_config(eps))?;
    let mut w = create(cfg, "scores.csv")?;
    writeln!(w, "score,log_density,distance,in_support")?;
    for s in &scores {
        writeln!(
            w,
            "{},{},{},{}",
            fmt9(s.score),
            fmt9(s.log_density),
            fmt9(s.distance),
            s.in_support as u8
        )?;
    }
    w.flush()?;
    println!("scored {} points", scores.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BoundaryStats {
    n: usize,
    epsilon: f64,
    /// Fraction of samples with density in `[0.2 ε, 5 ε]`.
    density_band_fraction: f64,
    /// Fraction of samples with density `>= ε`.
    in_support_fraction: f64,
    class_floors: Vec<f64>,
    proximity: Option<ProximitySummary>,
}

fn evaluate(cfg: &RunConfig, density_path: &Path, tail_path: &Path, datasets: &[String]) -> Result<()> {
    let density = checkpoint::load_flow(density_path)?;
    let tail = checkpoint::load_tail(tail_path)?;
    let splits = cfg.load_data()?;
    check_dim(density.dim(), splits.train.dim(), "density checkpoint")?;
    check_dim(tail.dim(), splits.train.dim(), "tail checkpoint")?;
    let train = splits.train.points();
    let eps = cfg.epsilon(&density, train)?;
    let w = cfg.resolved_loss_weights(eps)?;
    let score_cfg = cfg.score_config(eps);

    let sets = if datasets.is_empty() {
        let held = splits.held_out.points().to_vec();
        let mut sets = vec![NamedSet::new("normal", held.clone())];
        if let Some(anomaly) = &splits.left_out {
            sets.push(NamedSet::new("left_out", anomaly.clone()));
        }
        for o in &cfg.eval.ood {
            let seed = cfg.seed_for(&format!("{}{}", labels::OOD_PREFIX, o.name));
            sets.push(NamedSet::new(
                o.name.clone(),
                make_ood(&held, o.mode(held.len()), seed)?,
            ));
        }
        sets
    } else {
        datasets
            .iter()
            .map(|spec| {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("--dataset '{spec}' is not NAME=PATH")))?;
                let (points, _) = data::read_csv_file(Path::new(path))?;
                Ok(NamedSet::new(name, points))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let report = build_report(
        &tail,
        &density,
        train,
        &sets,
        &w,
        cfg.tail.density_domain,
        &score_cfg,
        cfg.seed_for(labels::REPORT_LATENT),
    )?;
    report.write_csv(create(cfg, "report.csv")?)?;
    let mut j = create(cfg, "report.json")?;
    writeln!(j, "{}", report.to_json())?;
    j.flush()?;

    let n = cfg.eval.boundary_n.max(1);
    let boundary = generate_boundary(&tail, n, cfg.seed_for(labels::BOUNDARY))?;
    let dens: Vec<f64> = density
        .log_density_batch(&boundary)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let frac = |pred: &dyn Fn(f64) -> bool| dens.iter().filter(|&&p| pred(p)).count() as f64 / n as f64;
    let (proximity, class_floors) = if splits.train.n_classes() >= 2 {
        let checks = check_proximity_batch(&boundary, &splits.train, cfg.loss.p, cfg.eval.pairing)?;
        let floors = crate::clustering::class_floors(&splits.train, cfg.loss.p, cfg.eval.pairing)?;
        (summarize(&checks), floors)
    } else {
        (None, Vec::new())
    };
    let stats = BoundaryStats {
        n,
        epsilon: eps,
        density_band_fraction: frac(&|p| p >= 0.2 * eps && p <= 5.0 * eps),
        in_support_fraction: frac(&|p| p >= eps),
        class_floors,
        proximity,
    };
    let mut pj = create(cfg, "proximity.json")?;
    writeln!(pj, "{}", serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    pj.flush()?;

    for r in &report.rows {
        println!(
            "{:<16} L_tot {:>12.6} L_d {:>10.6} L_sc {:>10.6}",
            r.dataset, r.l_tot, r.l_d, r.l_sc
        );
    }
    if let Some(p) = stats.proximity {
        println!("boundary samples satisfying proximity: {:.3}", p.satisfied_fraction);
    }
    Ok(())
}

fn export_data(cfg: &RunConfig) -> Result<()> {
    let splits = cfg.load_data()?;
    data::write_dataset_csv(create(cfg, "train.csv")?, &splits.train)?;
    data::write_dataset_csv(create(cfg, "held_out.csv")?, &splits.held_out)?;
    if let Some(a) = &splits.left_out {
        data::write_points_csv(create(cfg, "left_out.csv")?, a)?;
    }
    println!(
        "wrote {} training and {} held-out rows",
        splits.train.len(),
        splits.held_out.len()
    );
    Ok(())
}
