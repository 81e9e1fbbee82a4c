//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use tailflow::clustering::{check_proximity_batch, FloorPairing};
use tailflow::config::{labels, RunConfig};
use tailflow::data::{generate, make_ood, Component, DistributionKind, DistributionSpec};
use tailflow::flow::{fit_mle, FlowConfig, FlowModel};
use tailflow::numerics::{finite_diff_grad, lambert_residual, lambert_w_refined, relative_error, OptimizerConfig};
use tailflow::scoring::{auprc, auroc, build_report, NamedSet};
use tailflow::seed;
use tailflow::tail::{
    generate_boundary, init_tail, loss_and_grad, loss_terms, train_tail, DensityDomain, InitMode, LossWeights,
    TailArch, TailConfig, TailNet,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Shared tri-gauss fixture: trained density, training data and run settings.
struct Fixture {
    cfg: RunConfig,
    flow: FlowModel,
    train: Vec<Vec<f64>>,
    held_out: Vec<Vec<f64>>,
    eps: f64,
    w: LossWeights,
}

impl Fixture {
    fn build() -> Fixture {
        let cfg = RunConfig::default();
        let splits = cfg.load_data().unwrap();
        let train = splits.train.points().to_vec();
        let mut flow = FlowModel::new(2, &cfg.flow, cfg.seed_for(labels::FLOW_INIT)).unwrap();
        flow.standardize_to(&train).unwrap();
        fit_mle(
            &mut flow,
            &train,
            &cfg.flow_train.optimizer(cfg.seed_for(labels::FLOW_FIT)),
        )
        .unwrap();
        let eps = cfg.epsilon(&flow, &train).unwrap();
        let w = cfg.resolved_loss_weights(eps).unwrap();
        Fixture {
            held_out: splits.held_out.points().to_vec(),
            cfg,
            flow,
            train,
            eps,
            w,
        }
    }

    /// Tail trained as the pipeline would with root seed `root`.
    fn tail(&self, root: u64) -> (TailNet, Vec<f64>) {
        let cfg = RunConfig {
            seed: root,
            ..self.cfg.clone()
        };
        let mut tail = init_tail(&self.flow, &cfg.flow, &cfg.tail, cfg.seed_for(labels::TAIL_INIT)).unwrap();
        let opt = cfg.tail_train.optimizer(cfg.seed_for(labels::TAIL_FIT));
        let trace = train_tail(&mut tail, &self.flow, &self.train, &self.w, &opt, &cfg.tail).unwrap();
        (tail, trace.total())
    }
}

fn grid_integral(flow: &FlowModel, lo: f64, hi: f64, h: f64) -> f64 {
    let n = ((hi - lo) / h).round() as usize;
    let pts: Vec<Vec<f64>> = (0..n * n)
        .map(|k| vec![lo + h * ((k / n) as f64 + 0.5), lo + h * ((k % n) as f64 + 0.5)])
        .collect();
    flow.log_density_batch(&pts)
        .unwrap()
        .iter()
        .map(|l| l.exp())
        .sum::<f64>()
        * h
        * h
}

fn numerical_log_det(flow: &FlowModel, z: &[f64]) -> f64 {
    let h = 1e-5;
    let col = |i: usize| {
        let (mut a, mut b) = (z.to_vec(), z.to_vec());
        a[i] += h;
        b[i] -= h;
        let (fa, fb) = (flow.forward(&a).unwrap(), flow.forward(&b).unwrap());
        [(fa[0] - fb[0]) / (2.0 * h), (fa[1] - fb[1]) / (2.0 * h)]
    };
    let (c0, c1) = (col(0), col(1));
    (c0[0] * c1[1] - c1[0] * c0[1]).abs().ln()
}

fn flow_correctness(fx: &Fixture) -> Outcome {
    let pts = generate(&DistributionSpec::tri_gauss(101), 10_000).unwrap();
    let rt = pts
        .points()
        .iter()
        .map(|x| {
            let back = fx.flow.forward(&fx.flow.inverse(x).unwrap()).unwrap();
            x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let zs = seed::standard_normal_rows(500, 2, 102);
    let ld = zs
        .iter()
        .map(|z| (numerical_log_det(&fx.flow, z) - fx.flow.log_det_jacobian(z).unwrap()).abs())
        .fold(0.0, f64::max);
    let mut init = FlowModel::random(2, &fx.cfg.flow, 0.5, 103).unwrap();
    init.standardize_to(&fx.train).unwrap();
    let before = grid_integral(&init, -20.0, 26.0, 0.1);
    let after = grid_integral(&fx.flow, -20.0, 26.0, 0.1);
    let pass = rt < 1e-6 && ld < 1e-4 && (before - 1.0).abs() <= 0.02 && (after - 1.0).abs() <= 0.02;
    outcome(
        pass,
        format!("round trip {rt:.2e}, log-det error {ld:.2e}, integral before {before:.4} after {after:.4}"),
    )
}

fn gradient_oracles(fx: &Fixture) -> Outcome {
    let small = FlowConfig {
        layers: 2,
        hidden: 8,
        depth: 1,
        ..Default::default()
    };
    let mut flow = FlowModel::random(2, &small, 0.3, 201).unwrap();
    flow.standardize_to(&fx.train).unwrap();
    let rows: Vec<Vec<f64>> = fx.train.iter().take(64).cloned().collect();
    let (_, g) = flow.nll_and_grad(&rows).unwrap();
    let p0 = flow.params();
    let fd = finite_diff_grad(
        |p| {
            let mut m = flow.clone();
            m.set_params(p).unwrap();
            m.mean_nll(&rows).unwrap()
        },
        &p0,
        1e-5,
    );
    let e_flow = relative_error(&g, &fd);

    let w = LossWeights {
        w_pr: 1.0,
        w_d: 0.5,
        w_e: 0.7,
        w_sc: 0.3,
        batch_size: 8,
        ..Default::default()
    };
    let z = seed::standard_normal_rows(8, 2, 202);
    let tiny = FlowConfig {
        layers: 2,
        hidden: 4,
        depth: 1,
        ..Default::default()
    };
    let mut tail_errors = Vec::new();
    let mut sizes = Vec::new();
    for (arch, init) in [
        (TailArch::Coupling, InitMode::Random),
        (TailArch::FeedForward, InitMode::Random),
    ] {
        let cfg = TailConfig {
            arch,
            init,
            hidden: 8,
            depth: 1,
            init_gain: 0.5,
            ..Default::default()
        };
        let tail = init_tail(&flow, &tiny, &cfg, 203).unwrap();
        let (_, g) = loss_and_grad(&tail, &z, &rows, &flow, &w, DensityDomain::Raw).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut t = tail.clone();
                t.set_params(p).unwrap();
                loss_terms(&t, &z, &rows, &flow, &w, DensityDomain::Raw).unwrap().l_tot
            },
            &tail.params(),
            1e-5,
        );
        sizes.push(tail.num_params());
        tail_errors.push(relative_error(&g, &fd));
    }
    let worst_tail = tail_errors.iter().cloned().fold(0.0, f64::max);
    let small_enough = p0.len() <= 200 && sizes.iter().all(|&s| s <= 200);
    outcome(
        small_enough && e_flow < 1e-4 && worst_tail < 1e-4,
        format!(
            "flow NLL rel. error {e_flow:.2e} ({} params), L_tot rel. error {worst_tail:.2e} (params {sizes:?})",
            p0.len()
        ),
    )
}

fn density_quality() -> Outcome {
    let spec = |s| DistributionSpec {
        kind: DistributionKind::GaussianMixture,
        components: vec![Component {
            center: vec![0.0, 0.0],
            scale: 1.0,
            weight: 1.0,
        }],
        ring_radius: 0.0,
        seed: s,
    };
    let train = generate(&spec(301), 3000).unwrap();
    let held = generate(&spec(302), 2000).unwrap();
    let cfg = FlowConfig::default();
    let mut flow = FlowModel::new(2, &cfg, 303).unwrap();
    flow.standardize_to(train.points()).unwrap();
    fit_mle(
        &mut flow,
        train.points(),
        &OptimizerConfig {
            max_epochs: 40,
            seed: 304,
            ..Default::default()
        },
    )
    .unwrap();
    let mean = -flow.mean_nll(held.points()).unwrap();
    let target = -(2.0 * std::f64::consts::PI).ln() - 1.0;
    outcome(
        (mean - target).abs() < 0.1,
        format!("held-out mean log-density {mean:.4} vs {target:.4}"),
    )
}

fn training_dynamics(traces: &[Vec<f64>]) -> Outcome {
    let mut monotone = true;
    let mut ratios = Vec::new();
    for tot in traces {
        let mut best = f64::INFINITY;
        let env: Vec<f64> = tot
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect();
        monotone &= env.windows(2).all(|w| w[1] <= w[0]);
        ratios.push(tot[tot.len() - 1] / tot[0]);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let epochs: Vec<usize> = traces.iter().map(|t| t.len() - 1).collect();
    outcome(
        monotone && mean <= 0.5,
        format!("final/initial L_tot per seed {ratios:.3?}, mean {mean:.3}, epochs {epochs:?}"),
    )
}

fn band_fraction(fx: &Fixture, ys: &[Vec<f64>]) -> f64 {
    let dens: Vec<f64> = fx.flow.log_density_batch(ys).unwrap().iter().map(|l| l.exp()).collect();
    dens.iter().filter(|&&p| p >= 0.2 * fx.eps && p <= 5.0 * fx.eps).count() as f64 / ys.len() as f64
}

/// Judged on the first tail; the others are reported for reference.
fn boundary_placement(fx: &Fixture, tails: &[TailNet]) -> Outcome {
    let sample = |t: &TailNet| generate_boundary(t, 1000, fx.cfg.seed_for(labels::BOUNDARY)).unwrap();
    let ys = sample(&tails[0]);
    let band = band_fraction(fx, &ys);
    let others: Vec<String> = tails[1..]
        .iter()
        .map(|t| format!("{:.3}", band_fraction(fx, &sample(t))))
        .collect();
    let ds = fx.cfg.load_data().unwrap().train;
    let checks = check_proximity_batch(&ys, &ds, 2.0, FloorPairing::AllPairs).unwrap();
    let prox = checks.iter().filter(|c| c.satisfied).count() as f64 / 1000.0;
    outcome(
        band >= 0.9 && prox >= 0.8,
        format!(
            "in band {band:.3}, proximity satisfied {prox:.3}, epsilon {:.4e} (other seeds in band: {})",
            fx.eps,
            others.join(", ")
        ),
    )
}

fn report_sets(fx: &Fixture) -> Vec<NamedSet> {
    let mut sets = vec![NamedSet::new("normal", fx.held_out.clone())];
    for o in &fx.cfg.eval.ood {
        let s = fx.cfg.seed_for(&format!("{}{}", labels::OOD_PREFIX, o.name));
        sets.push(NamedSet::new(
            o.name.clone(),
            make_ood(&fx.held_out, o.mode(fx.held_out.len()), s).unwrap(),
        ));
    }
    sets
}

fn table_ordering(report: &tailflow::scoring::EvalReport) -> Outcome {
    let normal = report.row("normal").unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["shift_6sigma", "uniform_box"] {
        let r = report.row(name).unwrap();
        pass &= r.l_tot > normal.l_tot && r.l_d > normal.l_d;
        parts.push(format!("{name} L_tot {:.4} L_d {:.4}", r.l_tot, r.l_d));
    }
    let same_sc = report.rows.iter().all(|r| r.l_sc.to_bits() == normal.l_sc.to_bits());
    let ratio = report.row("shift_10").unwrap().l_d / normal.l_d;
    pass &= same_sc && ratio > 2.0;
    outcome(
        pass,
        format!(
            "normal L_tot {:.4} L_d {:.4}; {}; L_sc identical {same_sc}; shift_10 L_d ratio {ratio:.2}",
            normal.l_tot,
            normal.l_d,
            parts.join("; ")
        ),
    )
}

fn detection_quality(report: &tailflow::scoring::EvalReport, n_normal: usize, n_ood: usize) -> Outcome {
    let r = report.row("shift_6sigma").unwrap();
    let (a, p) = (r.auroc.unwrap(), r.auprc.unwrap());
    outcome(
        a >= 0.99 && p >= 0.99,
        format!("AUROC {a:.4}, AUPRC {p:.4} (n = {n_normal} + {n_ood})"),
    )
}

fn metric_oracles() -> Outcome {
    let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let p = auprc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    let mut rng = seed::rng(801);
    let mut invariant = 0;
    for _ in 0..100 {
        let n = rng.random_range(4..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp() + s * s * s).collect();
        if auroc(&scores, &labels).unwrap() == auroc(&mapped, &labels).unwrap() {
            invariant += 1;
        }
    }
    outcome(
        a == 0.75 && p == 5.0 / 6.0 && invariant == 100,
        format!("auroc {a}, auprc {p}, invariant on {invariant}/100"),
    )
}

fn lambert_grid() -> Outcome {
    let e = std::f64::consts::E;
    let grid = [-1.0 / e + 1e-6, -0.1, 0.0, 0.5, 1.0, e, 10.0, 1e3, 1e6];
    let worst = grid
        .iter()
        .map(|&x| lambert_residual(lambert_w_refined(x).unwrap(), x))
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-10,
        format!("max residual {worst:.2e} over {} points", grid.len()),
    )
}

fn cli(args: &[&str]) -> i32 {
    tailflow::cli::run(std::iter::once("tailflow").chain(args.iter().copied()))
}

fn report_rows(path: &Path) -> Vec<(String, f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

fn leave_one_out() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let out = format!("out_dir=\"{}\"", dir.path().display());
        let lo = format!("data.leave_out={k}");
        let set = |extra: &[&'static str]| -> Vec<String> {
            let mut v = vec!["--set".to_string(), out.clone(), "--set".into(), lo.clone()];
            for s in ["flow_train.max_epochs=40", "tail_train.max_epochs=30"]
                .iter()
                .chain(extra)
            {
                v.push("--set".into());
                v.push(s.to_string());
            }
            v
        };
        let run = |cmd: &[&str]| {
            let args: Vec<String> = cmd.iter().map(|s| s.to_string()).chain(set(&[])).collect();
            cli(&args.iter().map(String::as_str).collect::<Vec<_>>())
        };
        let flow = dir.path().join("flow.ckpt").display().to_string();
        let tail = dir.path().join("tail.ckpt").display().to_string();
        let codes = [
            run(&["train-density"]),
            run(&["train-tail", "--density", &flow]),
            run(&["evaluate", "--density", &flow, "--tail", &tail]),
        ];
        if codes.iter().any(|&c| c != 0) {
            pass = false;
            parts.push(format!("class {k}: exit codes {codes:?}"));
            continue;
        }
        let rows = report_rows(&dir.path().join("report.csv"));
        let find = |n: &str| rows.iter().find(|r| r.0 == n).cloned().unwrap();
        let (normal, left) = (find("normal"), find("left_out"));
        pass &= left.1 > normal.1 && left.2 > normal.2;
        parts.push(format!(
            "class {k}: L_tot {:.4} vs {:.4}, L_d {:.4} vs {:.4}",
            left.1, normal.1, left.2, normal.2
        ));
    }
    outcome(pass, parts.join("; "))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |f: &str| d.join(f).display().to_string();
    let first = [
        "--set",
        "flow_train.max_epochs=5",
        "--set",
        "tail_train.max_epochs=3",
        "--set",
        "data.n=600",
        "--set",
        "data.held_out_n=300",
    ];
    let out = format!("out_dir=\"{}\"", d.display());
    let (flow, tail, held, cfg) = (
        p("flow.ckpt"),
        p("tail.ckpt"),
        p("held_out.csv"),
        p("effective_config.toml"),
    );
    let commands: Vec<Vec<&str>> = vec![
        vec!["export-data"],
        vec!["train-density"],
        vec!["train-tail", "--density", &flow],
        vec!["generate", "--tail", &tail, "-n", "200"],
        vec!["score", "--density", &flow, "--input", &held],
        vec!["evaluate", "--density", &flow, "--tail", &tail],
    ];
    let csvs = [
        "train.csv",
        "held_out.csv",
        "flow_trace.csv",
        "tail_trace.csv",
        "samples.csv",
        "scores.csv",
        "report.csv",
    ];
    for c in &commands {
        let mut args = c.clone();
        args.extend_from_slice(&first);
        args.extend_from_slice(&["--set", &out]);
        if cli(&args) != 0 {
            return outcome(false, format!("first run of {} failed", c[0]));
        }
    }
    let snapshot: Vec<Vec<u8>> = csvs.iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    let replay = d.join("replay.toml");
    std::fs::copy(&cfg, &replay).unwrap();
    let replay = replay.display().to_string();
    for c in &commands {
        let mut args = c.clone();
        args.extend_from_slice(&["-c", &replay]);
        if cli(&args) != 0 {
            return outcome(false, format!("replay of {} failed", c[0]));
        }
    }
    let same: Vec<&str> = csvs
        .iter()
        .zip(&snapshot)
        .filter(|(f, s)| std::fs::read(d.join(f)).unwrap() == **s)
        .map(|(f, _)| *f)
        .collect();
    outcome(
        same.len() == csvs.len(),
        format!("{}/{} CSVs bit-identical after replay", same.len(), csvs.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2}: {} {name}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    let t = Instant::now();
    let fx = Fixture::build();
    println!(
        "fixture: tri-gauss density fitted in {:.1} s",
        t.elapsed().as_secs_f64()
    );

    record(1, "flow correctness", &mut || flow_correctness(&fx));
    record(2, "gradient oracles", &mut || gradient_oracles(&fx));
    record(3, "density quality", &mut density_quality);
    let mut tails = Vec::new();
    record(4, "tail training dynamics", &mut || {
        let runs: Vec<(TailNet, Vec<f64>)> = (0..3).map(|s| fx.tail(s)).collect();
        let traces: Vec<Vec<f64>> = runs.iter().map(|r| r.1.clone()).collect();
        tails = runs.into_iter().map(|r| r.0).collect();
        training_dynamics(&traces)
    });
    record(5, "boundary placement", &mut || boundary_placement(&fx, &tails));
    let tail = tails.swap_remove(0);
    let sets = report_sets(&fx);
    let score_cfg = fx.cfg.score_config(fx.eps);
    let report = build_report(
        &tail,
        &fx.flow,
        &fx.train,
        &sets,
        &fx.w,
        fx.cfg.tail.density_domain,
        &score_cfg,
        fx.cfg.seed_for(labels::REPORT_LATENT),
    )
    .unwrap();
    record(6, "report ordering", &mut || table_ordering(&report));
    let n_ood = sets.iter().find(|s| s.name == "shift_6sigma").unwrap().points.len();
    record(7, "detection quality", &mut || {
        detection_quality(&report, fx.held_out.len(), n_ood)
    });
    record(8, "metric oracles", &mut metric_oracles);
    record(9, "Lambert W residuals", &mut lambert_grid);
    record(10, "leave-one-out harness", &mut leave_one_out);
    record(11, "reproducibility", &mut reproducibility);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let total: f64 = results.iter().map(|r| r.3).sum();
    println!(
        "acceptance: {} of {} passed in {total:.1} s",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
