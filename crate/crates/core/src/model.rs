//! The two-branch spatio-temporal forward computation.
//!
//! Each branch walks the `T` in-window timestamps. At timestamp `t` it forms
//!
//! ```text
//! S_t  = Σ_k (D_k⁻¹ A_k X_t) W_k,t
//! Z̃_t  = ReLU(Σ_{i<t} Z_i W_i)          (zero at t = 1)
//! Z_t  = ReLU([X_t ‖ S_t ‖ Z̃_t] W_sptemp,t) + pe(t)
//! ```
//!
//! and the head maps the concatenation of every `Z_t` of every enabled
//! branch through `W_F` and a two-layer per-node network.
//!
//! Rows of every matrix are `window × node`, so a batch of windows is a
//! block-stacked graph and all weights are shared across nodes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SampleWindow};
use crate::encoding::PositionalEncoder;
use crate::error::{Error, Result};
use crate::graph::HopNeighborhoods;
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Historical,
    Current,
    #[default]
    Both,
}

impl Branches {
    pub fn historical(self) -> bool {
        matches!(self, Branches::Historical | Branches::Both)
    }

    pub fn current(self) -> bool {
        matches!(self, Branches::Current | Branches::Both)
    }

    pub fn count(self) -> usize {
        usize::from(self.historical()) + usize::from(self.current())
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "historical" => Ok(Branches::Historical),
            "current" => Ok(Branches::Current),
            "both" => Ok(Branches::Both),
            other => Err(Error::Config(format!(
                "unknown branches {other:?}; expected historical|current|both"
            ))),
        }
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::Historical => "historical",
            Branches::Current => "current",
            Branches::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_len: usize,
    pub k_hops: usize,
    pub p_days: usize,
    pub d_h: usize,
    pub d_f: usize,
    pub d_head: usize,
    pub n_out: usize,
    pub branches: Branches,
    /// Tie spatial and combination weights across timestamps.
    pub share_weights: bool,
    pub hr_sample: u32,
    pub t0_offset: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_len: 12,
            k_hops: 2,
            p_days: 7,
            d_h: 64,
            d_f: 128,
            d_head: 128,
            n_out: 12,
            branches: Branches::Both,
            share_weights: false,
            hr_sample: 12,
            t0_offset: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("t_len", self.t_len),
            ("k_hops", self.k_hops),
            ("d_h", self.d_h),
            ("d_f", self.d_f),
            ("d_head", self.d_head),
            ("n_out", self.n_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if self.hr_sample == 0 {
            return Err(Error::Config("model.hr_sample must be >= 1".into()));
        }
        if self.branches.historical() && self.p_days == 0 {
            return Err(Error::Config(
                "historical branch needs p_days >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn encoder(&self) -> PositionalEncoder {
        PositionalEncoder::with_offset(self.hr_sample, self.t0_offset)
    }

    fn has_historical_params(&self) -> bool {
        self.p_days > 0
    }

    fn head_input_width(&self) -> usize {
        self.branches.count() * self.t_len * self.d_h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BranchKind {
    Historical,
    Current,
}

impl BranchKind {
    fn prefix(self) -> &'static str {
        match self {
            BranchKind::Historical => "hist",
            BranchKind::Current => "cur",
        }
    }

    fn d_in(self, cfg: &ModelConfig) -> usize {
        match self {
            BranchKind::Historical => cfg.p_days,
            BranchKind::Current => 1,
        }
    }
}

/// Parameter names and shapes in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let mut out = Vec::new();
    let kinds: &[BranchKind] = if cfg.has_historical_params() {
        &[BranchKind::Historical, BranchKind::Current]
    } else {
        &[BranchKind::Current]
    };
    for &kind in kinds {
        let p = kind.prefix();
        let d_in = kind.d_in(cfg);
        let per_t = if cfg.share_weights { 1 } else { cfg.t_len };
        for t in 1..=per_t {
            for k in 1..=cfg.k_hops {
                let name = if cfg.share_weights {
                    format!("{p}.spatial.k{k}")
                } else {
                    format!("{p}.spatial.t{t}.k{k}")
                };
                out.push((name, [d_in, cfg.d_h]));
            }
        }
        for i in 1..cfg.t_len {
            out.push((format!("{p}.temporal.i{i}"), [cfg.d_h, cfg.d_h]));
        }
        for t in 1..=per_t {
            let name = if cfg.share_weights {
                format!("{p}.combine")
            } else {
                format!("{p}.combine.t{t}")
            };
            out.push((name, [d_in + 2 * cfg.d_h, cfg.d_h]));
        }
    }
    out.push(("head.w_f".into(), [cfg.head_input_width(), cfg.d_f]));
    out.push(("head.w1".into(), [cfg.d_f, cfg.d_head]));
    out.push(("head.b1".into(), [1, cfg.d_head]));
    out.push(("head.w2".into(), [cfg.d_head, cfg.n_out]));
    out.push(("head.b2".into(), [1, cfg.n_out]));
    out
}

/// Weights of one branch, indexed by timestamp (0-based).
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub d_in: usize,
    /// `spatial[t][k - 1]`, `d_in × d_h`.
    pub spatial: Vec<Vec<ParamId>>,
    /// `temporal[i]` weights source timestamp `i` for every later consumer.
    pub temporal: Vec<ParamId>,
    /// `combine[t]`, `(d_in + 2 d_h) × d_h`.
    pub combine: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_f: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

fn resolve_branch(cfg: &ModelConfig, store: &ParamStore, kind: BranchKind) -> Result<BranchParams> {
    let p = kind.prefix();
    let mut spatial = Vec::with_capacity(cfg.t_len);
    let mut combine = Vec::with_capacity(cfg.t_len);
    for t in 1..=cfg.t_len {
        let mut ks = Vec::with_capacity(cfg.k_hops);
        for k in 1..=cfg.k_hops {
            ks.push(if cfg.share_weights {
                lookup(store, &format!("{p}.spatial.k{k}"))?
            } else {
                lookup(store, &format!("{p}.spatial.t{t}.k{k}"))?
            });
        }
        spatial.push(ks);
        combine.push(if cfg.share_weights {
            lookup(store, &format!("{p}.combine"))?
        } else {
            lookup(store, &format!("{p}.combine.t{t}"))?
        });
    }
    let temporal = (1..cfg.t_len)
        .map(|i| lookup(store, &format!("{p}.temporal.i{i}")))
        .collect::<Result<_>>()?;
    Ok(BranchParams {
        d_in: kind.d_in(cfg),
        spatial,
        temporal,
        combine,
    })
}

/// Model input: per-timestamp feature matrices with `window × node` rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n_nodes: usize,
    pub n_windows: usize,
    /// `T` matrices of `[B·n × 1]`.
    pub current: Vec<Tensor>,
    /// `T` matrices of `[B·n × P]`; empty when `P = 0`.
    pub historical: Vec<Tensor>,
    /// `time_indices[b][t]`.
    pub time_indices: Vec<Vec<u64>>,
    /// Normalized targets, `[B·n × horizons]`.
    pub target: Tensor,
}

impl Batch {
    /// Stacks windows and maps speeds through `norm`.
    pub fn from_windows(windows: &[SampleWindow], norm: &Normalizer) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let n = first.n_nodes();
        let t_len = first.t_len();
        let p = first.p_days();
        let n_h = first.target.shape()[1];
        let b = windows.len();
        for w in windows {
            if w.n_nodes() != n || w.t_len() != t_len || w.p_days() != p || w.target.shape()[1] != n_h
            {
                return Err(Error::Contract("windows in a batch must share a shape".into()));
            }
        }
        let mut current = vec![Vec::with_capacity(b * n); t_len];
        let mut historical = vec![Vec::with_capacity(b * n * p); if p > 0 { t_len } else { 0 }];
        let mut target = Vec::with_capacity(b * n * n_h);
        for w in windows {
            for u in 0..n {
                for (tau, cur) in current.iter_mut().enumerate() {
                    cur.push(norm.normalize(w.current_x.at(&[u, tau, 0]), u));
                }
                if let Some(h) = &w.historical_x {
                    for (tau, hist) in historical.iter_mut().enumerate() {
                        for c in 0..p {
                            hist.push(norm.normalize(h.at(&[u, tau, c]), u));
                        }
                    }
                }
                for j in 0..n_h {
                    target.push(norm.normalize(w.target.get(u, j), u));
                }
            }
        }
        Ok(Self {
            n_nodes: n,
            n_windows: b,
            current: current
                .into_iter()
                .map(|v| Tensor::matrix(b * n, 1, v))
                .collect::<Result<_>>()?,
            historical: historical
                .into_iter()
                .map(|v| Tensor::matrix(b * n, p, v))
                .collect::<Result<_>>()?,
            time_indices: windows.iter().map(|w| w.time_indices.clone()).collect(),
            target: Tensor::matrix(b * n, n_h, target)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_nodes * self.n_windows
    }
}

/// `Σ_k hop_mean_k(X_t) · W_k`; no nonlinearity.
pub fn spatial_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    x_t: Var,
    hops: &HopNeighborhoods,
    weights: &[ParamId],
) -> Result<Var> {
    if weights.len() > hops.k_max() {
        return Err(Error::Contract(format!(
            "{} hop weights but only {} hop levels",
            weights.len(),
            hops.k_max()
        )));
    }
    let mut acc: Option<Var> = None;
    for (k, &w) in weights.iter().enumerate() {
        let agg = tape.gather_mean(x_t, hops.lists(k + 1))?;
        let wv = tape.param(store, w);
        let term = tape.matmul(agg, wv)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("spatial aggregation needs K >= 1".into()))
}

/// `ReLU(Σ_i Z_i W_i)` over the given prior embeddings; zero when there are none.
pub fn temporal_aggregate(
    tape: &mut Tape,
    store: &ParamStore,
    prior: &[Var],
    weights: &[ParamId],
    rows: usize,
    d_h: usize,
) -> Result<Var> {
    if weights.len() < prior.len() {
        return Err(Error::Contract(format!(
            "{} prior embeddings but {} temporal weights",
            prior.len(),
            weights.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&z, &w) in prior.iter().zip(weights) {
        let wv = tape.param(store, w);
        let term = tape.matmul(z, wv)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(match acc {
        Some(a) => tape.relu(a),
        None => tape.input(Tensor::zeros(&[rows, d_h])),
    })
}

/// `ReLU([X ‖ S ‖ Z̃] W) + pe`, with one `pe` value per window block of `n_nodes` rows.
pub fn st_embed(
    tape: &mut Tape,
    store: &ParamStore,
    x_t: Var,
    s_t: Var,
    z_tilde: Var,
    w: ParamId,
    pe: &[f64],
    n_nodes: usize,
) -> Result<Var> {
    let cat = tape.concat(&[x_t, s_t, z_tilde], 1)?;
    let wv = tape.param(store, w);
    let h = tape.matmul(cat, wv)?;
    let h = tape.relu(h);
    let (rows, cols) = (tape.value(h).rows(), tape.value(h).cols());
    if pe.len() * n_nodes != rows {
        return Err(Error::dim("st_embed", &[pe.len() * n_nodes], &[rows]));
    }
    if let [single] = pe {
        return Ok(tape.add_scalar(h, *single));
    }
    let shift: Vec<f64> = pe
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, n_nodes * cols))
        .collect();
    let shift = tape.input(Tensor::matrix(rows, cols, shift)?);
    tape.add(h, shift)
}

/// Runs one branch over all timestamps and returns `Z_1..Z_T`.
pub fn branch_forward(
    tape: &mut Tape,
    store: &ParamStore,
    features: &[Var],
    pe: &[Vec<f64>],
    n_nodes: usize,
    hops: &HopNeighborhoods,
    params: &BranchParams,
    d_h: usize,
) -> Result<Vec<Var>> {
    let t_len = features.len();
    if params.spatial.len() != t_len || pe.len() != t_len {
        return Err(Error::Contract(format!(
            "branch built for {} timestamps, got {t_len} features and {} encodings",
            params.spatial.len(),
            pe.len()
        )));
    }
    let mut zs: Vec<Var> = Vec::with_capacity(t_len);
    let mut running: Option<Var> = None;
    for t in 0..t_len {
        let x_t = features[t];
        let rows = tape.value(x_t).rows();
        let s_t = spatial_aggregate(tape, store, x_t, hops, &params.spatial[t])?;
        // Z̃_t reuses the running sum over earlier timestamps.
        let z_tilde = match running {
            Some(acc) => tape.relu(acc),
            None => temporal_aggregate(tape, store, &[], &[], rows, d_h)?,
        };
        let z = st_embed(tape, store, x_t, s_t, z_tilde, params.combine[t], &pe[t], n_nodes)?;
        if t + 1 < t_len {
            let wv = tape.param(store, params.temporal[t]);
            let term = tape.matmul(z, wv)?;
            running = Some(match running {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        zs.push(z);
    }
    Ok(zs)
}

/// Concatenates every branch's embeddings, projects with `W_F`, and applies the two-layer head.
pub fn final_embed_and_predict(
    tape: &mut Tape,
    store: &ParamStore,
    branches: &[&[Var]],
    head: &HeadParams,
) -> Result<(Var, Var, Var)> {
    let parts: Vec<Var> = branches.iter().flat_map(|b| b.iter().copied()).collect();
    let w_f = tape.param(store, head.w_f);
    let z_f_tilde = tape.concat(&parts, 1)?;
    if tape.value(z_f_tilde).cols() != tape.value(w_f).rows() {
        return Err(Error::Contract(format!(
            "final embedding width {} does not match W_F rows {}",
            tape.value(z_f_tilde).cols(),
            tape.value(w_f).rows()
        )));
    }
    let z_f = tape.matmul(z_f_tilde, w_f)?;
    let w1 = tape.param(store, head.w1);
    let b1 = tape.param(store, head.b1);
    let h = tape.matmul(z_f, w1)?;
    let h = tape.add_row_bias(h, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(store, head.w2);
    let b2 = tape.param(store, head.b2);
    let out = tape.matmul(h, w2)?;
    let out = tape.add_row_bias(out, b2)?;
    Ok((z_f_tilde, z_f, out))
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub historical: Vec<Var>,
    pub current: Vec<Var>,
    pub z_f_tilde: Var,
    pub z_f: Var,
    pub prediction: Var,
}

/// Intermediate embeddings of one forward pass.
#[derive(Clone, Debug)]
pub struct EmbeddingTrace {
    pub historical: Vec<Tensor>,
    pub current: Vec<Tensor>,
    pub z_f_tilde: Tensor,
    pub z_f: Tensor,
    pub predictions: Tensor,
}

#[derive(Clone, Debug)]
pub struct SstGnn {
    config: ModelConfig,
    store: ParamStore,
    historical: Option<BranchParams>,
    current: BranchParams,
    head: HeadParams,
}

impl SstGnn {
    /// Scaled-uniform initialization, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, [rows, cols]) in layout(&config) {
            let value = if name.starts_with("head.b") {
                Tensor::zeros(&[rows, cols])
            } else {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
                Tensor::matrix(rows, cols, data)?
            };
            store.insert(name, value)?;
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing parameter set; names and shapes must match `config` exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let id = lookup(&store, name)?;
            if store.get(id).value.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    store.get(id).value.shape()
                )));
            }
        }
        let historical = if config.has_historical_params() {
            Some(resolve_branch(&config, &store, BranchKind::Historical)?)
        } else {
            None
        };
        let current = resolve_branch(&config, &store, BranchKind::Current)?;
        let head = HeadParams {
            w_f: lookup(&store, "head.w_f")?,
            w1: lookup(&store, "head.w1")?,
            b1: lookup(&store, "head.b1")?,
            w2: lookup(&store, "head.w2")?,
            b2: lookup(&store, "head.b2")?,
        };
        Ok(Self {
            config,
            store,
            historical,
            current,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_params(self) -> ParamStore {
        self.store
    }

    pub fn historical_params(&self) -> Option<&BranchParams> {
        self.historical.as_ref()
    }

    pub fn current_params(&self) -> &BranchParams {
        &self.current
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    /// Ids of every parameter belonging to the historical branch.
    pub fn historical_param_ids(&self) -> Vec<ParamId> {
        self.branch_ids("hist.")
    }

    pub fn current_param_ids(&self) -> Vec<ParamId> {
        self.branch_ids("cur.")
    }

    fn branch_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name().starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    fn check_batch(&self, batch: &Batch, hops: &HopNeighborhoods) -> Result<()> {
        let cfg = &self.config;
        if hops.n_nodes() != batch.n_nodes {
            return Err(Error::dim("forward", &[hops.n_nodes()], &[batch.n_nodes]));
        }
        if hops.k_max() < cfg.k_hops {
            return Err(Error::Contract(format!(
                "model needs {} hop levels, graph provides {}",
                cfg.k_hops,
                hops.k_max()
            )));
        }
        if batch.current.len() != cfg.t_len {
            return Err(Error::dim("forward", &[cfg.t_len], &[batch.current.len()]));
        }
        if cfg.branches.historical() {
            let p = batch.historical.first().map_or(0, Tensor::cols);
            if batch.historical.len() != cfg.t_len || p != cfg.p_days {
                return Err(Error::dim(
                    "forward",
                    &[cfg.t_len, cfg.p_days],
                    &[batch.historical.len(), p],
                ));
            }
        }
        Ok(())
    }

    pub fn record(&self, batch: &Batch, hops: &HopNeighborhoods) -> Result<ForwardPass> {
        self.check_batch(batch, hops)?;
        let cfg = &self.config;
        let enc = cfg.encoder();
        let pe: Vec<Vec<f64>> = (0..cfg.t_len)
            .map(|t| batch.time_indices.iter().map(|ti| enc.encode(ti[t])).collect())
            .collect();
        let mut tape = Tape::new();
        let mut historical = Vec::new();
        if cfg.branches.historical() {
            let params = self
                .historical
                .as_ref()
                .ok_or_else(|| Error::Contract("historical branch has no parameters".into()))?;
            let feats: Vec<Var> = batch.historical.iter().map(|x| tape.input(x.clone())).collect();
            historical = branch_forward(
                &mut tape, &self.store, &feats, &pe, batch.n_nodes, hops, params, cfg.d_h,
            )?;
        }
        let mut current = Vec::new();
        if cfg.branches.current() {
            let feats: Vec<Var> = batch.current.iter().map(|x| tape.input(x.clone())).collect();
            current = branch_forward(
                &mut tape, &self.store, &feats, &pe, batch.n_nodes, hops, &self.current, cfg.d_h,
            )?;
        }
        let lists: Vec<&[Var]> = [historical.as_slice(), current.as_slice()]
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        let (z_f_tilde, z_f, prediction) =
            final_embed_and_predict(&mut tape, &self.store, &lists, &self.head)?;
        Ok(ForwardPass {
            tape,
            historical,
            current,
            z_f_tilde,
            z_f,
            prediction,
        })
    }

    /// Normalized predictions, `[B·n × n_out]`.
    pub fn predict(&self, batch: &Batch, hops: &HopNeighborhoods) -> Result<Tensor> {
        let pass = self.record(batch, hops)?;
        Ok(pass.tape.value(pass.prediction).clone())
    }

    pub fn trace(&self, batch: &Batch, hops: &HopNeighborhoods) -> Result<EmbeddingTrace> {
        let pass = self.record(batch, hops)?;
        let get = |v: &Var| pass.tape.value(*v).clone();
        Ok(EmbeddingTrace {
            historical: pass.historical.iter().map(get).collect(),
            current: pass.current.iter().map(get).collect(),
            z_f_tilde: get(&pass.z_f_tilde),
            z_f: get(&pass.z_f),
            predictions: get(&pass.prediction),
        })
    }

    fn check_target(&self, batch: &Batch) -> Result<()> {
        if batch.target.cols() != self.config.n_out {
            return Err(Error::dim(
                "loss",
                &[batch.rows(), self.config.n_out],
                batch.target.shape(),
            ));
        }
        Ok(())
    }

    /// MSE of the batch predictions against its normalized targets.
    pub fn loss(&self, batch: &Batch, hops: &HopNeighborhoods) -> Result<f64> {
        self.check_target(batch)?;
        Tensor::mse(&self.predict(batch, hops)?, &batch.target)
    }

    /// Zeroes gradients, runs forward and backward, and returns the loss.
    pub fn loss_and_grad(&mut self, batch: &Batch, hops: &HopNeighborhoods) -> Result<f64> {
        self.check_target(batch)?;
        let mut pass = self.record(batch, hops)?;
        let loss = pass.tape.mse(pass.prediction, batch.target.clone())?;
        self.store.zero_grads();
        pass.tape.backward(loss, &mut self.store)?;
        Ok(pass.tape.value(loss).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{khop_neighborhoods, SensorGraph};

    fn path_hops() -> HopNeighborhoods {
        khop_neighborhoods(&SensorGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 2).unwrap()
    }

    fn one_by_one(store: &mut ParamStore, name: &str, v: f64) -> ParamId {
        store.insert(name, Tensor::matrix(1, 1, vec![v]).unwrap()).unwrap()
    }

    #[test]
    fn spatial_aggregate_path_example() {
        let hops = path_hops();
        let mut store = ParamStore::new();
        let w1 = one_by_one(&mut store, "w1", 2.0);
        let w2 = one_by_one(&mut store, "w2", 3.0);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(3, 1, vec![1.0, 10.0, 100.0]).unwrap());
        let s = spatial_aggregate(&mut tape, &store, x, &hops, &[w1, w2]).unwrap();
        // node 1: 2 * mean(1, 100), no 2-hop neighbor
        assert_eq!(tape.value(s).data(), &[320.0, 101.0, 23.0]);

        let zero = tape.input(Tensor::zeros(&[3, 1]));
        let s0 = spatial_aggregate(&mut tape, &store, zero, &hops, &[w1, w2]).unwrap();
        assert_eq!(tape.value(s0).data(), &[0.0; 3]);
    }

    #[test]
    fn spatial_aggregate_identity_on_constant() {
        let g = SensorGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let hops = khop_neighborhoods(&g, 1).unwrap();
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::eye(2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[4, 2], 7.5));
        let s = spatial_aggregate(&mut tape, &store, x, &hops, &[w]).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn temporal_aggregate_examples() {
        let mut store = ParamStore::new();
        let a = one_by_one(&mut store, "a", 1.0);
        let b = one_by_one(&mut store, "b", -1.0);
        let mut tape = Tape::new();
        let empty = temporal_aggregate(&mut tape, &store, &[], &[], 2, 3).unwrap();
        assert_eq!(tape.value(empty), &Tensor::zeros(&[2, 3]));

        let z1 = tape.input(Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let z2 = tape.input(Tensor::matrix(1, 1, vec![7.0]).unwrap());
        let zt = temporal_aggregate(&mut tape, &store, &[z1, z2], &[a, b], 1, 1).unwrap();
        assert_eq!(tape.value(zt).data(), &[0.0]);

        let zeros = tape.input(Tensor::zeros(&[1, 1]));
        let zt0 = temporal_aggregate(&mut tape, &store, &[zeros, zeros], &[a, b], 1, 1).unwrap();
        assert_eq!(tape.value(zt0).data(), &[0.0]);
    }

    #[test]
    fn st_embed_examples() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let s = tape.input(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let zt = tape.input(Tensor::matrix(1, 1, vec![4.0]).unwrap());
        let z = st_embed(&mut tape, &store, x, s, zt, w, &[-0.25], 1).unwrap();
        assert_eq!(tape.value(z).data(), &[8.75]);

        let w4 = store
            .insert("w4", Tensor::filled(&[3, 4], 0.3))
            .unwrap();
        let zero = tape.input(Tensor::zeros(&[2, 1]));
        let z = st_embed(&mut tape, &store, zero, zero, zero, w4, &[0.5], 2).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn st_embed_broadcasts_per_window() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::filled(&[3, 2], 1.0)).unwrap();
        let mut tape = Tape::new();
        let zero = tape.input(Tensor::zeros(&[4, 1]));
        let z = st_embed(&mut tape, &store, zero, zero, zero, w, &[0.5, -1.0], 2).unwrap();
        assert_eq!(tape.value(z).data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
        assert!(st_embed(&mut tape, &store, zero, zero, zero, w, &[0.5, 1.0, 2.0], 2).is_err());
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            t_len: 3,
            k_hops: 2,
            p_days: 2,
            d_h: 4,
            d_f: 5,
            d_head: 6,
            n_out: 2,
            ..Default::default()
        }
    }

    fn zero_batch(n: usize, t_len: usize, p: usize, n_out: usize) -> Batch {
        Batch {
            n_nodes: n,
            n_windows: 1,
            current: vec![Tensor::zeros(&[n, 1]); t_len],
            historical: vec![Tensor::zeros(&[n, p]); t_len],
            time_indices: vec![vec![0; t_len]],
            target: Tensor::zeros(&[n, n_out]),
        }
    }

    #[test]
    fn zero_inputs_reduce_to_bias_pathway() {
        let cfg = small_config();
        let mut model = SstGnn::new(cfg.clone(), 3).unwrap();
        let head = model.head_params().clone();
        let b1 = Tensor::new(&[1, 6], vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5]).unwrap();
        let b2 = Tensor::new(&[1, 2], vec![1.5, -0.7]).unwrap();
        model.params_mut().get_mut(head.b1).value = b1.clone();
        model.params_mut().get_mut(head.b2).value = b2.clone();
        let hops = path_hops();
        // time index 0 -> pe = 0, so every Z is zero
        let trace = model.trace(&zero_batch(3, 3, 2, 2), &hops).unwrap();
        for z in trace.historical.iter().chain(&trace.current) {
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
        let w2 = model.params().get(head.w2).value.clone();
        let want = b1.relu().matmul(&w2).unwrap().add(&b2).unwrap();
        for u in 0..3 {
            for j in 0..2 {
                assert!((trace.predictions.get(u, j) - want.get(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn doubling_output_weights_doubles_offset_predictions() {
        let cfg = small_config();
        let mut model = SstGnn::new(cfg, 5).unwrap();
        let head = model.head_params().clone();
        model.params_mut().get_mut(head.b2).value = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
        let hops = path_hops();
        let mut batch = zero_batch(3, 3, 2, 2);
        batch.time_indices = vec![vec![100, 101, 102]];
        batch.current = (0..3)
            .map(|t| Tensor::matrix(3, 1, vec![0.5 + t as f64, -0.3, 1.1]).unwrap())
            .collect();
        let b2 = model.params().get(head.b2).value.clone();
        let p1 = model.predict(&batch, &hops).unwrap();
        let w2 = model.params().get(head.w2).value.scale(2.0);
        model.params_mut().get_mut(head.w2).value = w2;
        let p2 = model.predict(&batch, &hops).unwrap();
        for u in 0..3 {
            for j in 0..2 {
                let a = p1.get(u, j) - b2.data()[j];
                let b = p2.get(u, j) - b2.data()[j];
                assert!((b - 2.0 * a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_minimal_chain() {
        // n = 1 node (no neighbors), T = 2, d_h = 1, current branch only.
        let cfg = ModelConfig {
            t_len: 2,
            k_hops: 1,
            p_days: 0,
            d_h: 1,
            d_f: 1,
            d_head: 1,
            n_out: 1,
            branches: Branches::Current,
            ..Default::default()
        };
        let mut model = SstGnn::new(cfg, 0).unwrap();
        let set = |m: &mut SstGnn, name: &str, v: Vec<f64>| {
            let id = m.params().id(name).unwrap();
            let shape = m.params().get(id).value.shape().to_vec();
            m.params_mut().get_mut(id).value = Tensor::new(&shape, v).unwrap();
        };
        set(&mut model, "cur.spatial.t1.k1", vec![9.0]);
        set(&mut model, "cur.spatial.t2.k1", vec![9.0]);
        set(&mut model, "cur.temporal.i1", vec![0.5]);
        set(&mut model, "cur.combine.t1", vec![2.0, 1.0, 1.0]);
        set(&mut model, "cur.combine.t2", vec![1.0, 1.0, 3.0]);
        set(&mut model, "head.w_f", vec![1.0, -1.0]);
        set(&mut model, "head.w1", vec![2.0]);
        set(&mut model, "head.b1", vec![1.0]);
        set(&mut model, "head.w2", vec![0.5]);
        set(&mut model, "head.b2", vec![0.25]);

        let enc = PositionalEncoder::new(12);
        let (t1, t2) = (30u64, 31u64);
        let (x1, x2) = (1.5f64, 4.0f64);
        // isolated node: S = 0
        let z1 = (2.0 * x1).max(0.0) + enc.encode(t1);
        let zt2 = (0.5 * z1).max(0.0);
        let z2 = (x2 + 3.0 * zt2).max(0.0) + enc.encode(t2);
        let zf = z1 - z2;
        let h = (2.0 * zf + 1.0).max(0.0);
        let want = 0.5 * h + 0.25;

        let batch = Batch {
            n_nodes: 1,
            n_windows: 1,
            current: vec![
                Tensor::matrix(1, 1, vec![x1]).unwrap(),
                Tensor::matrix(1, 1, vec![x2]).unwrap(),
            ],
            historical: vec![],
            time_indices: vec![vec![t1, t2]],
            target: Tensor::zeros(&[1, 1]),
        };
        let hops = khop_neighborhoods(&SensorGraph::empty(1), 1).unwrap();
        let got = model.predict(&batch, &hops).unwrap();
        assert!((got.data()[0] - want).abs() < 1e-12, "{} vs {want}", got.data()[0]);
    }

    #[test]
    fn checkpoint_layout_mismatch_is_rejected() {
        let model = SstGnn::new(small_config(), 1).unwrap();
        let other = ModelConfig {
            d_h: 5,
            ..small_config()
        };
        assert!(SstGnn::from_store(other, model.params().clone()).is_err());
        assert!(SstGnn::from_store(small_config(), model.into_params()).is_ok());
    }

    #[test]
    fn shared_weights_reduce_parameter_count() {
        let shared = SstGnn::new(
            ModelConfig {
                share_weights: true,
                ..small_config()
            },
            1,
        )
        .unwrap();
        let full = SstGnn::new(small_config(), 1).unwrap();
        assert!(shared.params().len() < full.params().len());
        let sp = shared.current_params();
        assert_eq!(sp.spatial[0], sp.spatial[2]);
        assert_eq!(sp.combine[0], sp.combine[1]);
    }

    #[test]
    fn branches_parse() {
        assert_eq!("current".parse::<Branches>().unwrap(), Branches::Current);
        assert!("neither".parse::<Branches>().is_err());
        assert_eq!(Branches::Historical.to_string(), "historical");
    }
}
