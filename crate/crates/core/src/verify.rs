//! Seeded end-to-end gradient check on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_windows, Normalizer, SpeedSeries, WindowSpec};
use crate::error::Result;
use crate::graph::{khop_neighborhoods, HopNeighborhoods, SensorGraph};
use crate::model::{Batch, Branches, ModelConfig, SstGnn};
use crate::numcore::{finite_difference_check, GradCheckReport, GradCheckTolerance};

#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub n_nodes: usize,
    pub n_windows: usize,
    pub edge_prob: f64,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    /// 6 nodes, T=3, K=2, P=2, d_h=4, two horizons, both branches.
    fn default() -> Self {
        Self {
            n_nodes: 6,
            n_windows: 2,
            edge_prob: 0.4,
            model: ModelConfig {
                t_len: 3,
                k_hops: 2,
                p_days: 2,
                d_h: 4,
                d_f: 5,
                d_head: 6,
                n_out: 2,
                branches: Branches::Both,
                share_weights: false,
                hr_sample: 1,
                t0_offset: 0,
            },
            seed: 7,
        }
    }
}

pub struct GradCheckFixture {
    pub model: SstGnn,
    pub batch: Batch,
    pub hops: HopNeighborhoods,
}

/// Random graph, random series, and a freshly initialized model, all from `setup.seed`.
pub fn gradcheck_fixture(setup: &GradCheckSetup) -> Result<GradCheckFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let n = setup.n_nodes;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(setup.edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let graph = SensorGraph::from_edges(n, &edges)?;
    let hops = khop_neighborhoods(&graph, setup.model.k_hops)?;

    let cfg = &setup.model;
    let spec = WindowSpec {
        t_len: cfg.t_len,
        p_days: cfg.p_days,
        horizons: (1..=cfg.n_out).collect(),
        stride: 1,
    };
    let day = 24 * cfg.hr_sample as usize;
    let steps = spec.first_start(day) + spec.span() + setup.n_windows;
    let values = (0..steps * n).map(|_| rng.gen_range(20.0..70.0)).collect();
    let series = SpeedSeries::new(steps, n, cfg.hr_sample, values)?;
    let windows = make_windows(&series, &spec)?;
    let norm = Normalizer::new(vec![45.0], vec![15.0])?;
    let batch = Batch::from_windows(&windows[..setup.n_windows.min(windows.len())], &norm)?;
    let model = SstGnn::new(cfg.clone(), setup.seed.wrapping_add(1))?;
    Ok(GradCheckFixture { model, batch, hops })
}

/// Analytic gradients of the batch MSE against central differences, every entry.
pub fn check_model_gradients(fx: &mut GradCheckFixture, tol: GradCheckTolerance) -> Result<GradCheckReport> {
    fx.model.loss_and_grad(&fx.batch, &fx.hops)?;
    let config = fx.model.config().clone();
    let (batch, hops) = (&fx.batch, &fx.hops);
    finite_difference_check(
        fx.model.params_mut(),
        |store| SstGnn::from_store(config.clone(), store.clone())?.loss(batch, hops),
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_weight_model_passes() {
        let mut setup = GradCheckSetup::default();
        setup.model.share_weights = true;
        setup.model.branches = Branches::Current;
        let mut fx = gradcheck_fixture(&setup).unwrap();
        let r = check_model_gradients(&mut fx, GradCheckTolerance::default()).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
