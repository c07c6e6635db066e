//! Run configuration (TOML), dataset presets, and the data pipeline that
//! turns input files into windows ready for training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, NormMode, Normalizer, SpeedSeries, SplitPlan, WindowSet, WindowSpec};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_MASK_FLOOR, REPORT_STEPS};
use crate::graph::{build_adjacency, khop_neighborhoods, DistanceTable, HopNeighborhoods, IdMap, SensorGraph};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub speeds: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    pub hr_sample: u32,
    pub horizons: Vec<usize>,
    pub stride: usize,
    pub split: SplitPlan,
    pub normalization: NormMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            speeds: None,
            distances: None,
            hr_sample: 12,
            horizons: (1..=12).collect(),
            stride: 1,
            split: SplitPlan::Fractions { train: 0.7, val: 0.1 },
            normalization: NormMode::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub delta: f64,
    pub epsilon: f64,
    /// Distances are multiplied by this before the kernel is applied.
    pub distance_scale: f64,
    /// One sensor id per line; maps ids in the distance file to columns.
    pub id_map: Option<PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            epsilon: 0.5,
            distance_scale: 1.0,
            id_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub report_steps: Vec<usize>,
    pub mask_floor: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            report_steps: REPORT_STEPS.to_vec(),
            mask_floor: DEFAULT_MASK_FLOOR,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Named dataset settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Weekday-only district 7 data; training on the first month (23 weekdays).
    Pemsd7,
    Pemsd4,
    Pemsd8,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pemsd7" => Ok(Self::Pemsd7),
            "pemsd4" => Ok(Self::Pemsd4),
            "pemsd8" => Ok(Self::Pemsd8),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected pemsd7, pemsd4 or pemsd8)"
            ))),
        }
    }
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let (k_hops, train_days) = match self {
            Self::Pemsd7 => (2, 23),
            Self::Pemsd4 => (4, 47),
            Self::Pemsd8 => (4, 50),
        };
        let mut cfg = RunConfig::default();
        cfg.model.k_hops = k_hops;
        cfg.data.split = SplitPlan::TrainDays(train_days);
        cfg
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file; relative data paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::default().merge_file(path)
    }

    /// Overlays the keys present in a TOML file onto `self`.
    pub fn merge_file(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let located = |e: String| Error::Config(format!("{}: {e}", path.display()));
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| located(e.to_string()))?;
        let mut merged = toml::Table::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, overlay);
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| located(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.speeds,
            &mut cfg.data.distances,
            &mut cfg.graph.id_map,
        ] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    /// The same settings without file locations, for embedding in checkpoints.
    pub fn portable(&self) -> Self {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        cfg.data.speeds = None;
        cfg.data.distances = None;
        cfg.graph.id_map = None;
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            t_len: self.model.t_len,
            p_days: self.model.p_days,
            horizons: self.data.horizons.clone(),
            stride: self.data.stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.window_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.model.n_out != self.data.horizons.len() {
            return Err(Error::Config(format!(
                "model.n_out = {} but data.horizons lists {} steps",
                self.model.n_out,
                self.data.horizons.len()
            )));
        }
        if self.model.hr_sample != self.data.hr_sample {
            return Err(Error::Config(format!(
                "model.hr_sample = {} differs from data.hr_sample = {}",
                self.model.hr_sample, self.data.hr_sample
            )));
        }
        if let Some(s) = self.eval.report_steps.iter().find(|s| !self.data.horizons.contains(s)) {
            return Err(Error::Config(format!(
                "eval.report_steps contains {s}, which is not among data.horizons"
            )));
        }
        if !(self.graph.distance_scale > 0.0) {
            return Err(Error::Config("graph.distance_scale must be > 0".into()));
        }
        Ok(())
    }

    fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("no {what} file configured")))
    }

    pub fn load_series(&self) -> Result<SpeedSeries> {
        SpeedSeries::load_csv(Self::require(&self.data.speeds, "speed")?, self.data.hr_sample)
    }

    /// Loads the distance table, resolving sensor ids through the id map or the speed header.
    pub fn load_distances(&self, series: &SpeedSeries) -> Result<DistanceTable> {
        let path = Self::require(&self.data.distances, "distance")?;
        let ids = match &self.graph.id_map {
            Some(p) => Some(IdMap::load(p)?),
            None => series.sensor_ids().map(IdMap::from_ids),
        };
        DistanceTable::load_csv(path, ids.as_ref())
    }

    pub fn build_graph(&self, dist: &DistanceTable, n_nodes: usize) -> Result<SensorGraph> {
        let scaled = dist.scaled(self.graph.distance_scale);
        build_adjacency(&scaled, n_nodes, self.graph.delta, self.graph.epsilon)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Graph, split, normalizer, and window sets. `normalizer` overrides fitting
    /// (evaluation reuses the statistics stored with a model).
    pub fn prepare(
        &self,
        series: SpeedSeries,
        dist: &DistanceTable,
        normalizer: Option<Normalizer>,
    ) -> Result<Prepared> {
        self.validate()?;
        let graph = self.build_graph(dist, series.n_nodes())?;
        if !graph.is_connected() {
            log::warn!(
                "sensor graph is disconnected ({} edges over {} nodes)",
                graph.n_edges(),
                graph.n_nodes()
            );
        }
        let hops = khop_neighborhoods(&graph, self.model.k_hops)?;
        let spec = self.window_spec();
        let split = DatasetSplit::plan(&series, &spec, self.data.split)?;
        let normalizer = match normalizer {
            Some(n) => n,
            None => Normalizer::fit(&series, split.train_rows.clone(), self.data.normalization)?,
        };
        let series = Arc::new(series);
        let (train, val, test) = split.windows(&series, &spec);
        Ok(Prepared {
            series,
            graph,
            hops,
            split,
            normalizer,
            train,
            val,
            test,
        })
    }
}

/// Merges sections key by key; a key's value (e.g. `data.split`) is replaced whole.
fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => b.extend(o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub struct Prepared {
    pub series: Arc<SpeedSeries>,
    pub graph: SensorGraph,
    pub hops: HopNeighborhoods,
    pub split: DatasetSplit,
    pub normalizer: Normalizer,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = RunConfig::parse("[model]\nk_hops = 3\n[data]\nsplit = { train_days = 10 }\n").unwrap();
        assert_eq!(cfg.model.k_hops, 3);
        assert_eq!(cfg.model.d_h, 64);
        assert_eq!(cfg.data.split, SplitPlan::TrainDays(10));
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\nhops = 3\n").is_err());
    }

    #[test]
    fn file_overlays_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nd_h = 8\n[train]\nepochs = 3\n").unwrap();
        let cfg = Preset::Pemsd4.config().merge_file(&path).unwrap();
        assert_eq!((cfg.model.k_hops, cfg.model.d_h, cfg.train.epochs), (4, 8, 3));
        assert_eq!(cfg.data.split, SplitPlan::TrainDays(47));

        fs::write(&path, "[data]\nsplit = { fractions = { train = 0.6, val = 0.2 } }\n").unwrap();
        let cfg = Preset::Pemsd7.config().merge_file(&path).unwrap();
        assert_eq!(cfg.data.split, SplitPlan::Fractions { train: 0.6, val: 0.2 });

        fs::write(&path, "[model]\nd_h = \"wide\"\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("d_h"), "{err}");
    }

    #[test]
    fn presets() {
        let c = "PeMSD4".parse::<Preset>().unwrap().config();
        assert_eq!(c.model.k_hops, 4);
        assert_eq!(c.data.split, SplitPlan::TrainDays(47));
        assert_eq!(Preset::Pemsd7.config().model.k_hops, 2);
        assert_eq!(Preset::Pemsd8.config().data.split, SplitPlan::TrainDays(50));
        assert!("metr".parse::<Preset>().is_err());
    }

    #[test]
    fn horizon_count_must_match_outputs() {
        let mut cfg = RunConfig::default();
        cfg.data.horizons = vec![1, 2, 3];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.model.n_out = 3;
        cfg.eval.report_steps = vec![3];
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\nspeeds = \"s.csv\"\ndistances = \"/abs/d.csv\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.speeds.unwrap(), dir.path().join("s.csv"));
        assert_eq!(cfg.data.distances.unwrap(), PathBuf::from("/abs/d.csv"));
    }
}
