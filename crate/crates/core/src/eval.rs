//! Forecast metrics, the historical-average reference, and prediction tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SampleWindow, WindowSet};
use crate::error::{Error, Result};
use crate::graph::HopNeighborhoods;
use crate::model::{Batch, SstGnn};
use crate::numcore::Tensor;

pub const DEFAULT_MASK_FLOOR: f64 = 1.0;

/// Steps reported by default: 15, 30, 45 and 60 minutes at 5-minute sampling.
pub const REPORT_STEPS: [usize; 4] = [3, 6, 9, 12];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every truth value falls below the mask floor.
    pub mape: Option<f64>,
    pub count: usize,
    /// Entries excluded from MAPE.
    pub masked: usize,
}

/// MAE and RMSE over all entries; MAPE over entries with `|truth| >= mask_floor`.
pub fn metrics(pred: &[f64], truth: &[f64], mask_floor: f64) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metrics over zero entries".into()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let mut kept = 0usize;
    for (&p, &y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= mask_floor {
            pct += e.abs() / y.abs();
            kept += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| 100.0 * pct / kept as f64),
        count: pred.len(),
        masked: pred.len() - kept,
    })
}

pub fn tensor_metrics(pred: &Tensor, truth: &Tensor, mask_floor: f64) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim("metrics", pred.shape(), truth.shape()));
    }
    metrics(pred.data(), truth.data(), mask_floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub step: usize,
    pub minutes: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: String,
    pub horizons: Vec<HorizonReport>,
}

impl ForecastReport {
    pub fn horizon(&self, step: usize) -> Option<&HorizonReport> {
        self.horizons.iter().find(|h| h.step == step)
    }

    pub fn evaluated_points(&self) -> usize {
        self.horizons.iter().map(|h| h.metrics.count).sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(
            out,
            "{:>8} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "horizon", "MAE", "RMSE", "MAPE(%)", "points", "masked"
        );
        for h in &self.horizons {
            let m = &h.metrics;
            let mape = m.mape.map_or("undef".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:>6}m {:>10.4} {:>10.4} {:>10} {:>10} {:>8}",
                h.minutes, m.mae, m.rmse, mape, m.count, m.masked
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean of the `P` same-slot values from earlier days, per target column.
pub fn baseline_historical_average(sample: &SampleWindow) -> Result<Tensor> {
    let th = sample
        .target_history
        .as_ref()
        .ok_or_else(|| Error::Contract("historical average needs P >= 1".into()))?;
    let (n, n_h, p) = (th.shape()[0], th.shape()[1], th.shape()[2]);
    let mut out = Vec::with_capacity(n * n_h);
    for u in 0..n {
        for j in 0..n_h {
            let s: f64 = (0..p).map(|c| th.at(&[u, j, c])).sum();
            out.push(s / p as f64);
        }
    }
    Tensor::matrix(n, n_h, out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub time_index: u64,
    pub sensor: usize,
    pub horizon_step: usize,
    pub truth: f64,
    pub prediction: f64,
}

/// Columns of `horizons` that are reported, in `steps` order.
fn report_columns(horizons: &[usize], steps: &[usize]) -> Vec<(usize, usize)> {
    steps
        .iter()
        .filter_map(|s| horizons.iter().position(|h| h == s).map(|j| (*s, j)))
        .collect()
}

fn build_report(
    name: &str,
    cols: &[(usize, usize)],
    preds: &[Vec<f64>],
    truths: &[Vec<f64>],
    mask_floor: f64,
    minutes_per_step: usize,
) -> Result<ForecastReport> {
    let horizons = cols
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            Ok(HorizonReport {
                step,
                minutes: step * minutes_per_step,
                metrics: metrics(&preds[i], &truths[i], mask_floor)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ForecastReport {
        model: name.into(),
        horizons,
    })
}

pub struct EvalOptions<'a> {
    pub steps: &'a [usize],
    pub mask_floor: f64,
    pub batch_size: usize,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            steps: &REPORT_STEPS,
            mask_floor: DEFAULT_MASK_FLOOR,
            batch_size: 64,
        }
    }
}

/// Denormalized model predictions per reported step, plus the raw-truth table rows.
pub fn evaluate_model(
    model: &SstGnn,
    windows: &WindowSet,
    hops: &HopNeighborhoods,
    norm: &Normalizer,
    opts: &EvalOptions<'_>,
) -> Result<(ForecastReport, Vec<PredictionRow>)> {
    if windows.is_empty() {
        return Err(Error::Contract("evaluation split has no windows".into()));
    }
    let cols = report_columns(&windows.spec().horizons, opts.steps);
    if cols.is_empty() {
        return Err(Error::Config(format!(
            "none of the report steps {:?} are among the predicted horizons {:?}",
            opts.steps,
            windows.spec().horizons
        )));
    }
    let minutes = 60 / model.config().hr_sample.max(1) as usize;
    let mut preds = vec![Vec::new(); cols.len()];
    let mut truths = vec![Vec::new(); cols.len()];
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for part in idx.chunks(opts.batch_size.max(1)) {
        let ws: Vec<SampleWindow> = part.iter().map(|&i| windows.get(i)).collect();
        let batch = Batch::from_windows(&ws, norm)?;
        let out = model.predict(&batch, hops)?;
        let n = batch.n_nodes;
        for (b, w) in ws.iter().enumerate() {
            for (ci, &(step, j)) in cols.iter().enumerate() {
                for u in 0..n {
                    let truth = w.target.get(u, j);
                    let prediction = norm.denormalize(out.get(b * n + u, j), u);
                    preds[ci].push(prediction);
                    truths[ci].push(truth);
                    rows.push(PredictionRow {
                        time_index: w.target_time(j),
                        sensor: u,
                        horizon_step: step,
                        truth,
                        prediction,
                    });
                }
            }
        }
    }
    let name = format!("sst-gnn ({})", model.config().branches);
    let report = build_report(&name, &cols, &preds, &truths, opts.mask_floor, minutes)?;
    Ok((report, rows))
}

/// Historical-average reference over the same windows and steps.
pub fn evaluate_baseline(
    windows: &WindowSet,
    opts: &EvalOptions<'_>,
) -> Result<ForecastReport> {
    if windows.is_empty() {
        return Err(Error::Contract("evaluation split has no windows".into()));
    }
    let cols = report_columns(&windows.spec().horizons, opts.steps);
    let minutes = 60 / windows.series().hr_sample().max(1) as usize;
    let mut preds = vec![Vec::new(); cols.len()];
    let mut truths = vec![Vec::new(); cols.len()];
    for w in windows.iter() {
        let ha = baseline_historical_average(&w)?;
        for (ci, &(_, j)) in cols.iter().enumerate() {
            for u in 0..w.n_nodes() {
                preds[ci].push(ha.get(u, j));
                truths[ci].push(w.target.get(u, j));
            }
        }
    }
    build_report("historical-average", &cols, &preds, &truths, opts.mask_floor, minutes)
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("time_index,sensor,horizon_step,truth,prediction\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.time_index, r.sensor, r.horizon_step, r.truth, r.prediction
        );
    }
    out
}

pub fn emit_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    fs::write(path, predictions_csv(rows)).map_err(|e| Error::io(path, e))
}
