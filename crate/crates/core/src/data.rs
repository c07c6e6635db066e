//! Speed series ingestion, windowing, splits, normalization and synthetic data.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DistanceEntry, DistanceTable};
use crate::numcore::Tensor;

pub const DEFAULT_HR_SAMPLE: u32 = 12;

/// Speeds, one row per timestamp and one column per sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    n_steps: usize,
    n_nodes: usize,
    hr_sample: u32,
    values: Vec<f64>,
    sensor_ids: Option<Vec<String>>,
}

impl SpeedSeries {
    pub fn new(n_steps: usize, n_nodes: usize, hr_sample: u32, values: Vec<f64>) -> Result<Self> {
        if n_steps == 0 || n_nodes == 0 || hr_sample == 0 {
            return Err(Error::Input("speed series needs rows, columns and hr_sample >= 1".into()));
        }
        if values.len() != n_steps * n_nodes {
            return Err(Error::Input(format!(
                "{n_steps}x{n_nodes} series needs {} values, got {}",
                n_steps * n_nodes,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite speed at row {}, column {}",
                i / n_nodes + 1,
                i % n_nodes + 1
            )));
        }
        Ok(Self {
            n_steps,
            n_nodes,
            hr_sample,
            values,
            sensor_ids: None,
        })
    }

    pub fn with_sensor_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_nodes {
            return Err(Error::Input(format!(
                "{} sensor ids for {} columns",
                ids.len(),
                self.n_nodes
            )));
        }
        self.sensor_ids = Some(ids);
        Ok(self)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn hr_sample(&self) -> u32 {
        self.hr_sample
    }

    pub fn day_len(&self) -> usize {
        24 * self.hr_sample as usize
    }

    pub fn sensor_ids(&self) -> Option<&[String]> {
        self.sensor_ids.as_deref()
    }

    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.n_nodes + node]
    }

    pub fn set(&mut self, t: usize, node: usize, v: f64) {
        self.values[t * self.n_nodes + node] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Parses a numeric CSV; rows are timestamps, columns sensors.
    ///
    /// An optional non-numeric first row holds sensor ids. Cells reading
    /// `nan`/`na`/`null` are missing and forward-filled within their day
    /// (back-filled at the start of a day); an entirely missing day for a
    /// sensor is an error, as is an empty cell.
    pub fn parse_csv(text: &str, source: &str, hr_sample: u32) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let mut ids = None;
        if let Some((_, first)) = lines.peek() {
            let cells: Vec<&str> = first.split(',').map(str::trim).collect();
            if cells.iter().any(|c| c.parse::<f64>().is_err() && !is_missing(c) && !c.is_empty()) {
                ids = Some(cells.iter().map(|c| c.to_string()).collect::<Vec<_>>());
                lines.next();
            }
        }

        let mut width = ids.as_ref().map(Vec::len);
        let mut values: Vec<Option<f64>> = Vec::new();
        let mut n_steps = 0;
        for (row, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let w = *width.get_or_insert(cells.len());
            if cells.len() != w {
                return Err(Error::Parse {
                    path: source.into(),
                    row: row + 1,
                    col: cells.len(),
                    msg: format!("ragged row: expected {w} columns"),
                });
            }
            for (col, cell) in cells.iter().enumerate() {
                if cell.is_empty() {
                    return Err(Error::Parse {
                        path: source.into(),
                        row: row + 1,
                        col: col + 1,
                        msg: "empty cell".into(),
                    });
                }
                if is_missing(cell) {
                    values.push(None);
                    continue;
                }
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Parse {
                        path: source.into(),
                        row: row + 1,
                        col: col + 1,
                        msg: format!("non-numeric cell {cell:?}"),
                    }
                })?;
                values.push(Some(v));
            }
            n_steps += 1;
        }
        let n_nodes = width.unwrap_or(0);
        if n_steps == 0 || n_nodes == 0 {
            return Err(Error::Parse {
                path: source.into(),
                row: 0,
                col: 0,
                msg: "no data rows".into(),
            });
        }
        let filled = fill_missing(&values, n_steps, n_nodes, 24 * hr_sample as usize, source)?;
        let series = Self::new(n_steps, n_nodes, hr_sample, filled)?;
        match ids {
            Some(ids) => series.with_sensor_ids(ids),
            None => Ok(series),
        }
    }

    pub fn load_csv(path: &Path, hr_sample: u32) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string(), hr_sample)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(ids) = &self.sensor_ids {
            out.push_str(&ids.join(","));
            out.push('\n');
        }
        for t in 0..self.n_steps {
            for (j, v) in self.row(t).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.to_ascii_lowercase().as_str(), "nan" | "na" | "null")
}

fn fill_missing(
    values: &[Option<f64>],
    n_steps: usize,
    n_nodes: usize,
    day_len: usize,
    source: &str,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    for node in 0..n_nodes {
        for day_start in (0..n_steps).step_by(day_len) {
            let day_end = (day_start + day_len).min(n_steps);
            let first = (day_start..day_end).find_map(|t| values[t * n_nodes + node]);
            let Some(first) = first else {
                return Err(Error::Parse {
                    path: source.into(),
                    row: day_start + 1,
                    col: node + 1,
                    msg: format!("sensor missing for the whole day starting at row {}", day_start + 1),
                });
            };
            let mut last = first;
            for t in day_start..day_end {
                if let Some(v) = values[t * n_nodes + node] {
                    last = v;
                }
                out[t * n_nodes + node] = last;
            }
        }
    }
    Ok(out)
}

/// Window geometry shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// In-window timestamps `T`.
    pub t_len: usize,
    /// Historical days `P`.
    pub p_days: usize,
    /// Steps ahead (1-based) stored as target columns.
    pub horizons: Vec<usize>,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            t_len: 12,
            p_days: 7,
            horizons: (1..=12).collect(),
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_len == 0 || self.stride == 0 || self.horizons.is_empty() || self.horizons.contains(&0)
        {
            return Err(Error::Input(
                "window needs T >= 1, stride >= 1 and horizons >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }

    /// Rows touched by a window starting at `start`, from first feature to last target.
    pub fn span(&self) -> usize {
        self.t_len + self.max_horizon()
    }

    pub fn first_start(&self, day_len: usize) -> usize {
        self.p_days * day_len
    }

    /// Every admissible window start, in increasing order.
    pub fn starts(&self, n_steps: usize, day_len: usize) -> Vec<usize> {
        let first = self.first_start(day_len);
        if n_steps < first + self.span() {
            return Vec::new();
        }
        (first..=n_steps - self.span()).step_by(self.stride).collect()
    }
}

/// One training/evaluation instance, in raw speed units.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub start: usize,
    /// `[n_nodes × T × 1]`
    pub current_x: Tensor,
    /// `[n_nodes × T × P]`, channel `p - 1` holds the value `p` days earlier.
    pub historical_x: Option<Tensor>,
    pub time_indices: Vec<u64>,
    pub horizons: Vec<usize>,
    /// `[n_nodes × horizons]`
    pub target: Tensor,
    /// `[n_nodes × horizons × P]`, the values `p` days before each target.
    pub target_history: Option<Tensor>,
}

impl SampleWindow {
    pub fn n_nodes(&self) -> usize {
        self.current_x.shape()[0]
    }

    pub fn t_len(&self) -> usize {
        self.time_indices.len()
    }

    pub fn p_days(&self) -> usize {
        self.historical_x.as_ref().map_or(0, |h| h.shape()[2])
    }

    /// Absolute time index of target column `j`.
    pub fn target_time(&self, j: usize) -> u64 {
        self.time_indices[self.t_len() - 1] + self.horizons[j] as u64
    }
}

/// Builds the window starting at `start`; the caller guarantees it is admissible.
pub fn window_at(series: &SpeedSeries, spec: &WindowSpec, start: usize) -> SampleWindow {
    let n = series.n_nodes();
    let (t_len, p_days) = (spec.t_len, spec.p_days);
    let day = series.day_len();
    let n_h = spec.horizons.len();

    let mut cur = Vec::with_capacity(n * t_len);
    for u in 0..n {
        for tau in 0..t_len {
            cur.push(series.get(start + tau, u));
        }
    }
    let historical_x = (p_days > 0).then(|| {
        let mut hist = Vec::with_capacity(n * t_len * p_days);
        for u in 0..n {
            for tau in 0..t_len {
                for p in 1..=p_days {
                    hist.push(series.get(start + tau - p * day, u));
                }
            }
        }
        Tensor::new(&[n, t_len, p_days], hist).expect("window shape")
    });
    let last = start + t_len - 1;
    let mut target = Vec::with_capacity(n * n_h);
    for u in 0..n {
        for &h in &spec.horizons {
            target.push(series.get(last + h, u));
        }
    }
    let target_history = (p_days > 0).then(|| {
        let mut th = Vec::with_capacity(n * n_h * p_days);
        for u in 0..n {
            for &h in &spec.horizons {
                for p in 1..=p_days {
                    th.push(series.get(last + h - p * day, u));
                }
            }
        }
        Tensor::new(&[n, n_h, p_days], th).expect("window shape")
    });
    SampleWindow {
        start,
        current_x: Tensor::new(&[n, t_len, 1], cur).expect("window shape"),
        historical_x,
        time_indices: (start..start + t_len).map(|t| t as u64).collect(),
        horizons: spec.horizons.clone(),
        target: Tensor::new(&[n, n_h], target).expect("window shape"),
        target_history,
    }
}

/// All windows of a series; empty (with a warning) when the series is too short.
pub fn make_windows(series: &SpeedSeries, spec: &WindowSpec) -> Result<Vec<SampleWindow>> {
    spec.validate()?;
    let starts = spec.starts(series.n_steps(), series.day_len());
    if starts.is_empty() {
        log::warn!(
            "series of {} steps is shorter than P*day_len + T + max_horizon = {}; no windows",
            series.n_steps(),
            spec.first_start(series.day_len()) + spec.span()
        );
    }
    Ok(starts.into_iter().map(|s| window_at(series, spec, s)).collect())
}

/// Lazily materialized windows over a shared series.
#[derive(Clone, Debug)]
pub struct WindowSet {
    series: Arc<SpeedSeries>,
    spec: WindowSpec,
    starts: Vec<usize>,
}

impl WindowSet {
    pub fn new(series: Arc<SpeedSeries>, spec: WindowSpec, starts: Vec<usize>) -> Self {
        Self {
            series,
            spec,
            starts,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn series(&self) -> &SpeedSeries {
        &self.series
    }

    pub fn get(&self, i: usize) -> SampleWindow {
        window_at(&self.series, &self.spec, self.starts[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleWindow> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps only the first `n` windows.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.starts.truncate(n);
        out
    }
}

/// How the row range is cut into train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPlan {
    /// First `n` days train; the remainder is halved into validation and test.
    TrainDays(usize),
    Fractions { train: f64, val: f64 },
}

/// Window-start ranges; ordered and disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// Rows `[first window start, train_end_row)` are the training rows.
    pub train_rows: Range<usize>,
}

impl DatasetSplit {
    /// Assigns each window to the split containing all of its feature and target rows.
    pub fn plan(series: &SpeedSeries, spec: &WindowSpec, plan: SplitPlan) -> Result<Self> {
        let n = series.n_steps();
        let (train_end, val_end) = match plan {
            SplitPlan::TrainDays(days) => {
                let train_end = (days * series.day_len()).min(n);
                (train_end, train_end + (n - train_end) / 2)
            }
            SplitPlan::Fractions { train, val } => {
                if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
                    return Err(Error::Config(format!(
                        "split fractions train={train} val={val} must be positive and sum to <= 1"
                    )));
                }
                let te = (n as f64 * train).round() as usize;
                (te, ((n as f64 * (train + val)).round() as usize).max(te))
            }
        };
        Self::from_rows(series, spec, train_end, val_end)
    }

    pub fn from_rows(
        series: &SpeedSeries,
        spec: &WindowSpec,
        train_end: usize,
        val_end: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let span = spec.span();
        let starts = spec.starts(series.n_steps(), series.day_len());
        let first = spec.first_start(series.day_len());
        let range = |lo: usize, hi: usize| -> Range<usize> {
            let s: Vec<_> = starts
                .iter()
                .copied()
                .filter(|&s| s >= lo && s + span <= hi)
                .collect();
            match (s.first(), s.last()) {
                (Some(&a), Some(&b)) => a..b + 1,
                _ => lo.max(first)..lo.max(first),
            }
        };
        let split = Self {
            train: range(0, train_end),
            val: range(train_end, val_end),
            test: range(val_end, series.n_steps()),
            train_rows: first.min(train_end)..train_end,
        };
        if split.train.is_empty() {
            return Err(Error::Config(format!(
                "training split is empty: first window needs {} rows, training ends at row {train_end}",
                first + span
            )));
        }
        Ok(split)
    }

    /// Window sets for each split; range bounds sit on the stride grid.
    pub fn windows(&self, series: &Arc<SpeedSeries>, spec: &WindowSpec) -> (WindowSet, WindowSet, WindowSet) {
        let set = |r: &Range<usize>| {
            WindowSet::new(Arc::clone(series), spec.clone(), r.clone().step_by(spec.stride).collect())
        };
        (set(&self.train), set(&self.val), set(&self.test))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Global,
    PerSensor,
}

/// z-score statistics; a single entry applies to every sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::Input("normalizer needs matching nonempty mean/std".into()));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Input("normalizer std must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    /// Statistics over `rows` only.
    pub fn fit(series: &SpeedSeries, rows: Range<usize>, mode: NormMode) -> Result<Self> {
        if rows.is_empty() || rows.end > series.n_steps() {
            return Err(Error::Input(format!(
                "normalizer rows {rows:?} empty or out of range"
            )));
        }
        let count = rows.len() as f64;
        let stats = |cols: &[usize]| -> (f64, f64) {
            let n = count * cols.len() as f64;
            let mean = rows
                .clone()
                .flat_map(|t| cols.iter().map(move |&c| (t, c)))
                .map(|(t, c)| series.get(t, c))
                .sum::<f64>()
                / n;
            let var = rows
                .clone()
                .flat_map(|t| cols.iter().map(move |&c| (t, c)))
                .map(|(t, c)| (series.get(t, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, var.sqrt())
        };
        let groups: Vec<Vec<usize>> = match mode {
            NormMode::Global => vec![(0..series.n_nodes()).collect()],
            NormMode::PerSensor => (0..series.n_nodes()).map(|c| vec![c]).collect(),
        };
        let (mean, std): (Vec<f64>, Vec<f64>) = groups.iter().map(|g| stats(g)).unzip();
        if let Some(i) = std.iter().position(|&s| !(s > 1e-12)) {
            return Err(Error::Input(format!(
                "zero variance in training data (group {i}); check for constant sensors"
            )));
        }
        Self::new(mean, std)
    }

    pub fn mode(&self) -> NormMode {
        if self.mean.len() == 1 {
            NormMode::Global
        } else {
            NormMode::PerSensor
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn slot(&self, sensor: usize) -> usize {
        if self.mean.len() == 1 {
            0
        } else {
            sensor
        }
    }

    pub fn normalize(&self, x: f64, sensor: usize) -> f64 {
        let s = self.slot(sensor);
        (x - self.mean[s]) / self.std[s]
    }

    pub fn denormalize(&self, z: f64, sensor: usize) -> f64 {
        let s = self.slot(sensor);
        z * self.std[s] + self.mean[s]
    }
}

/// Knobs of the desk-scale synthetic traffic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_days: usize,
    pub seed: u64,
    pub hr_sample: u32,
    /// Stationary std of the AR(1) noise, in speed units.
    pub noise_std: f64,
    /// Per-step AR(1) coefficient of the noise.
    pub noise_ar: f64,
    /// Std of the per-day multiplicative change of rush-hour depth.
    pub day_jitter: f64,
    /// 0 gives identical profiles every day, 1 gives distinct weekend profiles.
    pub weekend_effect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            n_days: 14,
            seed: 1,
            hr_sample: DEFAULT_HR_SAMPLE,
            noise_std: 2.0,
            noise_ar: 0.95,
            day_jitter: 0.15,
            weekend_effect: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_std = 0.0;
        self.day_jitter = 0.0;
        self
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub series: SpeedSeries,
    pub distances: DistanceTable,
    /// Sensor coordinates (unit-free; distances are Euclidean in this plane).
    pub positions: Vec<(f64, f64)>,
}

/// Pairs farther than this are left out of the distance table.
const SYNTH_MAX_LISTED_DISTANCE: f64 = 1.0;

fn gauss(x: f64, center: f64, width: f64) -> f64 {
    let z = (x - center) / width;
    (-0.5 * z * z).exp()
}

/// Synthetic speeds with weekday rush-hour dips, weekend midday slowdowns,
/// and spatially smoothed AR(1) noise. Sensors are laid out as a random
/// walk with steps short enough that the kernel graph (δ=0.1, ε=0.5) is connected.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticData> {
    if cfg.n_nodes < 2 {
        return Err(Error::Input("synthesize needs at least 2 nodes".into()));
    }
    if cfg.n_days < 9 {
        return Err(Error::Input(format!(
            "synthesize needs at least 9 days (7 history + train/test), got {}",
            cfg.n_days
        )));
    }
    if cfg.hr_sample == 0 || !(0.0..1.0).contains(&cfg.noise_ar) || cfg.noise_std < 0.0 {
        return Err(Error::Input("invalid synthesis parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_nodes;

    let mut positions = Vec::with_capacity(n);
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    positions.push((x, y));
    for _ in 1..n {
        heading += rng.gen_range(-0.9..0.9);
        let step = rng.gen_range(0.10..0.22);
        x += step * heading.cos();
        y += step * heading.sin();
        positions.push((x, y));
    }
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = ((positions[i].0 - positions[j].0).powi(2)
                + (positions[i].1 - positions[j].1).powi(2))
            .sqrt();
            if d <= SYNTH_MAX_LISTED_DISTANCE {
                entries.push(DistanceEntry { from: i, to: j, cost: d });
            }
        }
    }
    let distances = DistanceTable::new(entries);
    let graph = crate::graph::build_adjacency(&distances, n, 0.1, 0.5)?;

    struct Profile {
        base: f64,
        morning: f64,
        evening: f64,
        weekend: f64,
        shift: f64,
    }
    let profiles: Vec<Profile> = positions
        .iter()
        .map(|&(px, py)| Profile {
            base: 60.0 + rng.gen_range(-4.0..4.0),
            morning: 12.0 + 5.0 * (3.0 * px).sin() + rng.gen_range(-2.0..2.0),
            evening: 10.0 + 4.0 * (2.0 * py).cos() + rng.gen_range(-2.0..2.0),
            weekend: 6.0 + rng.gen_range(0.0..4.0),
            shift: 0.5 * (px + py).sin(),
        })
        .collect();

    let day_len = 24 * cfg.hr_sample as usize;
    let week_len = 7 * day_len;
    let n_steps = cfg.n_days * day_len;
    let hr = f64::from(cfg.hr_sample);

    let mut values = vec![0.0; n_steps * n];
    let mut day_scale = vec![1.0; n];
    let mut noise = vec![0.0; n];
    let innovation = (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt() * cfg.noise_std;
    let neighbors: Vec<Vec<usize>> = (0..n).map(|u| graph.neighbors(u).collect()).collect();
    let mut raw = vec![0.0; n];

    for t in 0..n_steps {
        let r = t % week_len;
        let slot = r % day_len;
        let hour = slot as f64 / hr;
        let weekend = r / day_len >= 5;
        if slot == 0 && cfg.day_jitter > 0.0 {
            let common: f64 = standard_normal(&mut rng);
            for s in day_scale.iter_mut() {
                let own: f64 = standard_normal(&mut rng);
                *s = (1.0 + cfg.day_jitter * (0.7 * common + 0.3 * own)).max(0.0);
            }
        }
        if cfg.noise_std > 0.0 {
            for z in raw.iter_mut() {
                *z = standard_normal(&mut rng);
            }
            for u in 0..n {
                let nb = &neighbors[u];
                let smooth = if nb.is_empty() {
                    raw[u]
                } else {
                    let m = nb.iter().map(|&v| raw[v]).sum::<f64>() / nb.len() as f64;
                    (raw[u] + m) / 2f64.sqrt()
                };
                noise[u] = cfg.noise_ar * noise[u] + innovation * smooth;
            }
        }
        for (u, p) in profiles.iter().enumerate() {
            let weekday = p.base
                - p.morning * gauss(hour, 8.0 + p.shift, 1.0)
                - p.evening * gauss(hour, 17.5 + p.shift, 1.3);
            let weekend_v = p.base - p.weekend * gauss(hour, 14.0 + p.shift, 2.0);
            let clean = if weekend {
                (1.0 - cfg.weekend_effect) * weekday + cfg.weekend_effect * weekend_v
            } else {
                weekday
            };
            let v = p.base - (p.base - clean) * day_scale[u] + noise[u];
            values[t * n + u] = v.max(3.0);
        }
    }
    let series = SpeedSeries::new(n_steps, n, cfg.hr_sample, values)?;
    Ok(SyntheticData {
        series,
        distances,
        positions,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n_steps: usize, n_nodes: usize) -> SpeedSeries {
        let values = (0..n_steps)
            .flat_map(|t| (0..n_nodes).map(move |u| t as f64 + 0.001 * u as f64))
            .collect();
        SpeedSeries::new(n_steps, n_nodes, 12, values).unwrap()
    }

    #[test]
    fn csv_shape_and_errors() {
        let s = SpeedSeries::parse_csv("1,2,3\n4,5,6\n", "mem", 12).unwrap();
        assert_eq!((s.n_steps(), s.n_nodes()), (2, 3));

        let err = SpeedSeries::parse_csv("1,2,3\n4,,6\n", "mem", 12).unwrap_err();
        assert!(err.to_string().contains("row 2, column 2"), "{err}");

        let err = SpeedSeries::parse_csv("1,2,3\n4,5\n", "mem", 12).unwrap_err();
        assert!(err.to_string().contains("ragged"), "{err}");

        let err = SpeedSeries::parse_csv("1,2\n4,abc\n", "mem", 12).unwrap_err();
        assert!(err.to_string().contains("row 2, column 2"), "{err}");

        assert!(SpeedSeries::load_csv(Path::new("/nonexistent/speeds.csv"), 12).is_err());
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let s = SpeedSeries::parse_csv("a,b\n1.5,2\n0.1,3e-7\n", "mem", 12).unwrap();
        assert_eq!(s.sensor_ids().unwrap(), &["a".to_string(), "b".to_string()]);
        let back = SpeedSeries::parse_csv(&s.to_csv(), "mem", 12).unwrap();
        assert_eq!(back, s);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let odd = SpeedSeries::new(1, 3, 12, vec![0.1 + 0.2, 1.0 / 3.0, 61.123456789012345]).unwrap();
        odd.save_csv(&path).unwrap();
        let loaded = SpeedSeries::load_csv(&path, 12).unwrap();
        assert_eq!(
            loaded.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            odd.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn missing_values_forward_fill_within_day() {
        // hr_sample 1 -> day_len 24
        let mut text = String::new();
        for t in 0..48 {
            let a = if t == 5 || t == 24 { "nan".to_string() } else { t.to_string() };
            let _ = writeln!(text, "{a},1");
        }
        let s = SpeedSeries::parse_csv(&text, "mem", 1).unwrap();
        assert_eq!(s.get(5, 0), 4.0);
        // start of day 2 has no earlier value that day -> takes the first valid one
        assert_eq!(s.get(24, 0), 25.0);

        let mut whole_day = String::new();
        for t in 0..48 {
            let a = if t >= 24 { "NaN".to_string() } else { t.to_string() };
            let _ = writeln!(whole_day, "{a},1");
        }
        let err = SpeedSeries::parse_csv(&whole_day, "mem", 1).unwrap_err();
        assert!(err.to_string().contains("whole day"), "{err}");
    }

    #[test]
    fn first_window_offset() {
        let spec = WindowSpec::default();
        assert_eq!(spec.first_start(288), 2016);
        let s = ramp(2016 + 24, 2);
        let w = make_windows(&s, &spec).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start, 2016);
        assert_eq!(w[0].target.shape(), &[2, 12]);

        let short = ramp(2016 + 23, 2);
        assert!(make_windows(&short, &spec).unwrap().is_empty());
    }

    #[test]
    fn historical_channels_follow_ramp() {
        let spec = WindowSpec {
            t_len: 4,
            p_days: 3,
            horizons: vec![3, 6, 9, 12],
            stride: 5,
        };
        let s = ramp(288 * 5, 1);
        for w in make_windows(&s, &spec).unwrap() {
            let h = w.historical_x.as_ref().unwrap();
            for tau in 0..4 {
                for p in 1..=3 {
                    let want = w.time_indices[tau] as f64 - 288.0 * p as f64;
                    assert_eq!(h.at(&[0, tau, p - 1]), want);
                }
                assert_eq!(w.current_x.at(&[0, tau, 0]), w.time_indices[tau] as f64);
            }
            assert_eq!(w.target.shape(), &[1, 4]);
            for (j, &hz) in spec.horizons.iter().enumerate() {
                let tt = w.target_time(j);
                assert_eq!(tt, w.time_indices[3] + hz as u64);
                assert_eq!(w.target.get(0, j), tt as f64);
                assert!(w.time_indices.iter().all(|&f| f < tt));
            }
        }
    }

    #[test]
    fn split_is_ordered_and_normalizer_ignores_later_rows() {
        let data = synthesize(&SynthConfig {
            n_nodes: 3,
            n_days: 12,
            ..Default::default()
        })
        .unwrap();
        let spec = WindowSpec::default();
        let split = DatasetSplit::plan(&data.series, &spec, SplitPlan::TrainDays(9)).unwrap();
        assert!(split.train.end <= split.val.start && split.val.end <= split.test.start);
        assert!(!split.val.is_empty() && !split.test.is_empty());
        assert!(split.train.end - 1 + spec.span() <= 9 * 288);

        let norm = Normalizer::fit(&data.series, split.train_rows.clone(), NormMode::Global).unwrap();
        let mut altered = data.series.clone();
        for t in split.train_rows.end..altered.n_steps() {
            for u in 0..3 {
                altered.set(t, u, 1000.0 + t as f64);
            }
        }
        let norm2 = Normalizer::fit(&altered, split.train_rows.clone(), NormMode::Global).unwrap();
        assert_eq!(norm, norm2);

        let z: Vec<f64> = split
            .train_rows
            .clone()
            .flat_map(|t| (0..3).map(move |u| (t, u)))
            .map(|(t, u)| norm.normalize(data.series.get(t, u), u))
            .collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);

        for &x in &[0.0, 55.5, -3.25, 1e3] {
            assert!((norm.denormalize(norm.normalize(x, 1), 1) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_series_rejected_by_normalizer() {
        let s = SpeedSeries::new(10, 2, 12, vec![42.0; 20]).unwrap();
        assert!(Normalizer::fit(&s, 0..10, NormMode::Global).is_err());
        assert!(Normalizer::fit(&s, 0..10, NormMode::PerSensor).is_err());
    }

    #[test]
    fn per_sensor_mode() {
        let s = SpeedSeries::new(3, 2, 12, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let n = Normalizer::fit(&s, 0..3, NormMode::PerSensor).unwrap();
        assert_eq!(n.mode(), NormMode::PerSensor);
        assert_eq!(n.mean(), &[2.0, 20.0]);
        assert_eq!(n.normalize(20.0, 1), 0.0);
    }

    #[test]
    fn synthesis_is_deterministic_and_connected() {
        let cfg = SynthConfig::default();
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.distances, b.distances);
        let g = crate::graph::build_adjacency(&a.distances, cfg.n_nodes, 0.1, 0.5).unwrap();
        assert!(g.is_connected());
        let c = synthesize(&SynthConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn noiseless_series_is_weekly_periodic() {
        let cfg = SynthConfig {
            n_nodes: 4,
            n_days: 15,
            ..Default::default()
        }
        .noiseless();
        let s = synthesize(&cfg).unwrap().series;
        for t in 0..s.n_steps() - 2016 {
            assert_eq!(s.row(t), s.row(t + 2016));
        }
    }

    #[test]
    fn synthesis_validation() {
        let too_short = SynthConfig {
            n_days: 5,
            ..Default::default()
        };
        assert!(synthesize(&too_short).is_err());
        let one_node = SynthConfig {
            n_nodes: 1,
            ..Default::default()
        };
        assert!(synthesize(&one_node).is_err());
    }
}
