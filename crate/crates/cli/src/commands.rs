use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sstgnn::data::{synthesize, SplitPlan, SynthConfig};
use sstgnn::eval::{emit_predictions, evaluate_baseline, evaluate_model, EvalOptions, ForecastReport};
use sstgnn::numcore::GradCheckTolerance;
use sstgnn::train::TrainData;
use sstgnn::verify::{check_model_gradients, gradcheck_fixture, GradCheckSetup};
use sstgnn::{Branches, Checkpoint, Error, Prepared, Preset, Result, RunConfig, SstGnn, Trainer, WindowSet};

use crate::args::{
    BranchArg, DataArgs, EvalArgs, GradcheckArgs, GraphCmdArgs, OutArgs, PredictArgs, SplitArg, SynthArgs,
    TrainArgs,
};

pub const OUT_ENV: &str = "SSTGNN_OUT";
const DEFAULT_OUT: &str = "runs";
const SNAPSHOT: &str = "resolved_config.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Flag, then config file, then `$SSTGNN_OUT`, then `./runs`.
fn output_dir(flag: &OutArgs, from_config: Option<&Path>) -> PathBuf {
    flag.out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(&dir.join(SNAPSHOT), cfg.to_toml()?)
}

impl From<BranchArg> for Branches {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Historical => Branches::Historical,
            BranchArg::Current => Branches::Current,
            BranchArg::Both => Branches::Both,
        }
    }
}

/// Preset (or `base`), then the config file, then individual flags.
fn resolve(base: RunConfig, args: &DataArgs, out: &OutArgs) -> Result<RunConfig> {
    let mut cfg = match &args.preset {
        Some(p) => p.parse::<Preset>()?.config(),
        None => base,
    };
    if let Some(path) = &args.config {
        cfg = cfg.merge_file(path)?;
    }
    let d = &mut cfg.data;
    if let Some(p) = &args.speeds {
        d.speeds = Some(p.clone());
    }
    if let Some(p) = &args.distances {
        d.distances = Some(p.clone());
    }
    if let Some(hr) = args.hr_sample {
        d.hr_sample = hr;
        cfg.model.hr_sample = hr;
    }
    let mut horizons = args.horizons.clone();
    if args.dense_horizon {
        let max = horizons.as_ref().unwrap_or(&d.horizons).iter().copied().max().unwrap_or(1);
        horizons = Some((1..=max).collect());
    }
    if let Some(h) = horizons {
        cfg.model.n_out = h.len();
        let kept: Vec<usize> = cfg.eval.report_steps.iter().copied().filter(|s| h.contains(s)).collect();
        cfg.eval.report_steps = if kept.is_empty() { h.clone() } else { kept };
        d.horizons = h;
    }
    if let Some(s) = args.stride {
        d.stride = s;
    }
    if let Some(days) = args.train_days {
        d.split = SplitPlan::TrainDays(days);
    }
    if let (Some(train), Some(val)) = (args.train_frac, args.val_frac) {
        d.split = SplitPlan::Fractions { train, val };
    }
    let g = &mut cfg.graph;
    if let Some(p) = &args.id_map {
        g.id_map = Some(p.clone());
    }
    if let Some(v) = args.delta {
        g.delta = v;
    }
    if let Some(v) = args.epsilon {
        g.epsilon = v;
    }
    if let Some(v) = args.distance_scale {
        g.distance_scale = v;
    }
    if let Some(k) = args.k_hops {
        cfg.model.k_hops = k;
    }
    cfg.output_dir = Some(output_dir(out, cfg.output_dir.as_deref()));
    Ok(cfg)
}

fn prepare(cfg: &RunConfig, normalizer: Option<sstgnn::Normalizer>) -> Result<Prepared> {
    cfg.validate()?;
    let series = cfg.load_series()?;
    let dist = cfg.load_distances(&series)?;
    cfg.prepare(series, &dist, normalizer)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    create_dir(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct Manifest<'a> {
    speeds: &'a str,
    distances: &'a str,
    n_steps: usize,
    synth: &'a SynthConfig,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        n_nodes: args.nodes,
        n_days: args.days,
        seed: args.seed,
        hr_sample: args.hr_sample,
        ..SynthConfig::default()
    };
    if args.noiseless {
        cfg = cfg.noiseless();
    }
    cfg.noise_std = args.noise_std.unwrap_or(cfg.noise_std);
    cfg.noise_ar = args.noise_ar.unwrap_or(cfg.noise_ar);
    cfg.day_jitter = args.day_jitter.unwrap_or(cfg.day_jitter);
    cfg.weekend_effect = args.weekend_effect.unwrap_or(cfg.weekend_effect);

    let data = synthesize(&cfg)?;
    let dir = output_dir(&args.out, None);
    create_dir(&dir)?;
    data.series.save_csv(&dir.join("speeds.csv"))?;
    data.distances.save_csv(&dir.join("distances.csv"))?;
    let manifest = Manifest {
        speeds: "speeds.csv",
        distances: "distances.csv",
        n_steps: data.series.n_steps(),
        synth: &cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("manifest.toml"), text)?;
    println!(
        "wrote {} steps x {} sensors to {}",
        data.series.n_steps(),
        data.series.n_nodes(),
        dir.display()
    );
    Ok(())
}

pub fn build_graph(args: &GraphCmdArgs) -> Result<()> {
    let cfg = resolve(RunConfig::default(), &args.data, &args.out)?;
    let series = cfg.load_series()?;
    let dist = cfg.load_distances(&series)?;
    let graph = cfg.build_graph(&dist, series.n_nodes())?;
    let hops = sstgnn::graph::khop_neighborhoods(&graph, cfg.model.k_hops)?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("adjacency.csv"), graph.adjacency_csv())?;

    let mut table = String::from("node");
    for k in 1..=hops.k_max() {
        let _ = write!(table, ",hop{k}");
    }
    table.push('\n');
    let mut totals = vec![0usize; hops.k_max()];
    for u in 0..graph.n_nodes() {
        let _ = write!(table, "{u}");
        for k in 1..=hops.k_max() {
            let d = hops.lists(k).degree(u);
            totals[k - 1] += d;
            let _ = write!(table, ",{d}");
        }
        table.push('\n');
    }
    write(&dir.join("hops.csv"), table)?;
    snapshot(&cfg, &dir)?;

    println!(
        "{} nodes, {} edges, {}",
        graph.n_nodes(),
        graph.n_edges(),
        if graph.is_connected() { "connected" } else { "disconnected" }
    );
    for (k, t) in totals.iter().enumerate() {
        println!("hop {}: mean {:.2} neighbors", k + 1, *t as f64 / graph.n_nodes() as f64);
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) {
    let m = &mut cfg.model;
    if let Some(b) = args.branches {
        m.branches = b.into();
    }
    m.share_weights |= args.share_weights;
    m.t_len = args.t_len.unwrap_or(m.t_len);
    m.p_days = args.p_days.unwrap_or(m.p_days);
    m.d_h = args.d_h.unwrap_or(m.d_h);
    m.d_f = args.d_f.unwrap_or(m.d_f);
    m.d_head = args.d_head.unwrap_or(m.d_head);
    m.t0_offset = args.t0_offset.unwrap_or(m.t0_offset);
    let t = &mut cfg.train;
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.lr0 = args.lr.unwrap_or(t.lr0);
    t.decay_every = args.decay_every.unwrap_or(t.decay_every);
    t.seed = args.seed.unwrap_or(t.seed);
    if args.keep_last {
        t.select_best = false;
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = match &resumed {
        Some(ck) => stored_config(ck)?,
        None => RunConfig::default(),
    };
    let mut cfg = resolve(base, &args.data, &args.out)?;
    apply_train_flags(&mut cfg, args);
    if let Some(ck) = &resumed {
        if ck.meta.model != cfg.model {
            return Err(Error::Config(
                "model settings differ from the checkpoint being resumed".into(),
            ));
        }
    }
    let prep = prepare(&cfg, resumed.as_ref().map(|ck| ck.normalizer.clone()))?;
    let dir = out_dir(&cfg)?;
    snapshot(&cfg, &dir)?;
    log::info!(
        "{} train / {} val / {} test windows",
        prep.train.len(),
        prep.val.len(),
        prep.test.len()
    );

    let mut trainer = match &resumed {
        Some(ck) => ck.trainer(cfg.train.clone())?,
        None => Trainer::new(SstGnn::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let data = TrainData {
        hops: &prep.hops,
        normalizer: &prep.normalizer,
        train: &prep.train,
        val: (!prep.val.is_empty()).then_some(&prep.val),
    };
    let portable = cfg.portable().to_toml()?;
    let last = dir.join("last.ckpt");
    let save_last = |t: &Trainer| {
        Checkpoint::resumable(t, prep.normalizer.clone())
            .with_run_config(portable.clone())
            .save(&last)
    };
    let outcome = trainer.run_with(&data, save_last)?;
    save_last(&trainer)?;

    let mut best = Checkpoint::for_params(
        cfg.model.clone(),
        cfg.train.clone(),
        prep.normalizer.clone(),
        outcome.selected,
        trainer.epoch,
    )
    .with_run_config(portable);
    best.meta.selected_epoch = trainer.best.as_ref().and_then(|b| b.epoch);
    best.meta.best_score = trainer.best.as_ref().map(|b| b.score);
    best.history = outcome.history.clone();
    best.save(&dir.join("best.ckpt"))?;
    write(&dir.join("history.csv"), outcome.history.to_csv())?;

    match outcome.history.last() {
        Some(r) => println!(
            "epoch {}: train mse {:.6}, val mse {}",
            r.epoch,
            r.train_mse,
            r.val_mse.map_or("-".into(), |v| format!("{v:.6}"))
        ),
        None => println!("no epochs run; wrote initialized weights"),
    }
    if let Some(e) = best.meta.selected_epoch {
        println!("selected epoch {e}");
    }
    println!("checkpoints in {}", dir.display());
    match outcome.diverged {
        Some(msg) => Err(Error::Numerical(msg)),
        None => Ok(()),
    }
}

fn stored_config(ck: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = match &ck.meta.run_config {
        Some(text) => RunConfig::parse(text)?,
        None => RunConfig::default(),
    };
    cfg.model = ck.meta.model.clone();
    cfg.train = ck.meta.train.clone();
    Ok(cfg)
}

struct Scored {
    cfg: RunConfig,
    dir: PathBuf,
    report: ForecastReport,
    baseline: Option<ForecastReport>,
    rows: Vec<sstgnn::eval::PredictionRow>,
    windows: usize,
}

fn split_windows(prep: &Prepared, split: SplitArg) -> &WindowSet {
    match split {
        SplitArg::Train => &prep.train,
        SplitArg::Val => &prep.val,
        SplitArg::Test => &prep.test,
    }
}

fn score(args: &EvalArgs) -> Result<Scored> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = resolve(stored_config(&ck)?, &args.data, &args.out)?;
    if cfg.model != ck.meta.model {
        log::warn!("model settings from flags or config are ignored; the checkpoint defines the model");
        cfg.model = ck.meta.model.clone();
    }
    if let Some(steps) = &args.report_steps {
        cfg.eval.report_steps = steps.clone();
    }
    let prep = prepare(&cfg, Some(ck.normalizer.clone()))?;
    let model = ck.model()?;
    let windows = split_windows(&prep, args.split);
    let opts = EvalOptions {
        steps: &cfg.eval.report_steps,
        mask_floor: cfg.eval.mask_floor,
        batch_size: cfg.eval.batch_size,
    };
    let (report, rows) = evaluate_model(&model, windows, &prep.hops, &prep.normalizer, &opts)?;
    let baseline = if cfg.model.p_days > 0 {
        Some(evaluate_baseline(windows, &opts)?)
    } else {
        None
    };
    let dir = out_dir(&cfg)?;
    snapshot(&cfg, &dir)?;
    Ok(Scored {
        windows: windows.len(),
        cfg,
        dir,
        report,
        baseline,
        rows,
    })
}

#[derive(Debug, PartialEq)]
struct ReferenceRow {
    minutes: usize,
    mae: f64,
    rmse: f64,
    mape: f64,
}

fn parse_reference(text: &str, source: &str) -> Result<Vec<ReferenceRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("minutes")) {
            continue;
        }
        let bad = |col: usize, msg: &str| Error::Parse {
            path: source.into(),
            row: i + 1,
            col,
            msg: msg.into(),
        };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 4 {
            return Err(bad(1, "expected minutes,mae,rmse,mape"));
        }
        let num = |c: usize| cells[c].parse::<f64>().map_err(|_| bad(c + 1, "not a number"));
        rows.push(ReferenceRow {
            minutes: cells[0].parse().map_err(|_| bad(1, "not an integer"))?,
            mae: num(1)?,
            rmse: num(2)?,
            mape: num(3)?,
        });
    }
    Ok(rows)
}

fn side_by_side(report: &ForecastReport, reference: &[ReferenceRow]) -> String {
    let mut out = String::from("reference comparison (ours / reference)\n");
    let _ = writeln!(out, "{:>8} {:>21} {:>21} {:>21}", "horizon", "MAE", "RMSE", "MAPE(%)");
    for h in &report.horizons {
        let Some(r) = reference.iter().find(|r| r.minutes == h.minutes) else {
            continue;
        };
        let m = &h.metrics;
        let mape = m.mape.map_or("undef".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            out,
            "{:>6}m {:>10.2} / {:<8.2} {:>10.2} / {:<8.2} {:>10} / {:<8.2}",
            h.minutes, m.mae, r.mae, m.rmse, r.rmse, mape, r.mape
        );
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    checkpoint: &'a Path,
    split: &'a str,
    windows: usize,
    evaluated_points: usize,
    model: &'a ForecastReport,
    baseline: Option<&'a ForecastReport>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let s = score(args)?;
    let mut text = s.report.to_table();
    if let Some(b) = &s.baseline {
        text.push('\n');
        text.push_str(&b.to_table());
    }
    if let Some(path) = &args.reference {
        let raw = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let reference = parse_reference(&raw, &path.display().to_string())?;
        text.push('\n');
        text.push_str(&side_by_side(&s.report, &reference));
    }
    let split = format!("{:?}", args.split).to_lowercase();
    let json = JsonReport {
        checkpoint: &args.checkpoint,
        split: &split,
        windows: s.windows,
        evaluated_points: s.report.evaluated_points(),
        model: &s.report,
        baseline: s.baseline.as_ref(),
    };
    let json = serde_json::to_string_pretty(&json).map_err(|e| Error::Contract(e.to_string()))?;
    write(&s.dir.join("report.txt"), &text)?;
    write(&s.dir.join("report.json"), json)?;
    print!("{text}");
    println!(
        "{} windows, {} evaluated points on the {split} split",
        s.windows,
        s.report.evaluated_points()
    );
    log::debug!("report steps {:?}", s.cfg.eval.report_steps);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let s = score(&args.eval)?;
    let path = args.output.clone().unwrap_or_else(|| s.dir.join("predictions.csv"));
    emit_predictions(&s.rows, &path)?;
    println!("wrote {} prediction rows to {}", s.rows.len(), path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut setup = GradCheckSetup {
        seed: args.seed,
        ..GradCheckSetup::default()
    };
    if let Some(n) = args.nodes {
        setup.n_nodes = n;
    }
    setup.model.share_weights = args.share_weights;
    if let Some(b) = args.branches {
        setup.model.branches = b.into();
    }
    let tol = GradCheckTolerance::default();
    let mut fx = gradcheck_fixture(&setup)?;
    let report = check_model_gradients(&mut fx, tol)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "checked {} entries ({} nodes, {} branches, seed {})",
        report.checked, setup.n_nodes, setup.model.branches, setup.seed
    );
    let _ = writeln!(text, "max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err, tol.rel);
    let _ = writeln!(
        text,
        "max absolute error on near-zero gradients {:.3e} (tolerance {:.0e})",
        report.max_abs_err_small, tol.abs
    );
    for f in report.failures.iter().take(10) {
        let _ = writeln!(
            text,
            "mismatch {}[{}]: analytic {:.6e}, numeric {:.6e}",
            f.param, f.index, f.analytic, f.numeric
        );
    }
    let _ = writeln!(text, "{}", if report.passed() { "PASS" } else { "FAIL" });
    if let Some(dir) = &args.out.out {
        create_dir(dir)?;
        write(&dir.join("gradcheck.txt"), &text)?;
    }
    print!("{text}");
    Ok(report.passed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_csv() {
        let rows = parse_reference("minutes,mae,rmse,mape\n15,2.1,3.9,5.0\n\n60,3,6,7.5\n", "r").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], ReferenceRow { minutes: 60, mae: 3.0, rmse: 6.0, mape: 7.5 });
        let err = parse_reference("15,2.1,x,5\n", "r").unwrap_err().to_string();
        assert!(err.contains("column 3"), "{err}");
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "output_dir = \"from_file\"\n[graph]\ndelta = 0.2\nepsilon = 0.4\n").unwrap();
        let args = DataArgs {
            config: Some(path),
            preset: Some("pemsd4".into()),
            speeds: None,
            distances: None,
            id_map: None,
            hr_sample: None,
            horizons: Some(vec![3, 6]),
            dense_horizon: false,
            stride: None,
            train_days: None,
            train_frac: None,
            val_frac: None,
            delta: Some(0.3),
            epsilon: None,
            distance_scale: None,
            k_hops: None,
        };
        let cfg = resolve(RunConfig::default(), &args, &OutArgs { out: None }).unwrap();
        assert_eq!((cfg.graph.delta, cfg.graph.epsilon), (0.3, 0.4));
        assert_eq!(cfg.model.k_hops, 4);
        assert_eq!(cfg.model.n_out, 2);
        assert_eq!(cfg.eval.report_steps, vec![3, 6]);
        assert_eq!(cfg.output_dir.as_deref(), Some(Path::new("from_file")));
        cfg.validate().unwrap();
    }
}
