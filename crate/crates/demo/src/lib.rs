//! Browser demo. Each export takes plain numbers and returns a JSON string
//! that `www/main.js` draws on a canvas.

use serde::Serialize;
use sstgnn::data::{synthesize, SynthConfig};
use sstgnn::eval::{metrics, Metrics, DEFAULT_MASK_FLOOR};
use sstgnn::graph::{build_adjacency, khop_neighborhoods};
use sstgnn::{PositionalEncoder, Result};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct EncodingCurve {
    pub samples_per_day: u64,
    pub total: Vec<f64>,
    pub daily: Vec<f64>,
    pub weekly: Vec<f64>,
}

/// Encoding of `n` consecutive samples, with its daily and weekly terms.
pub fn encoding_curve(hr_sample: u32, t0_offset: u64, n: usize) -> EncodingCurve {
    let enc = PositionalEncoder::with_offset(hr_sample.max(1), t0_offset);
    let daily_only = |t: u64| {
        let day = enc.day_len();
        let r = (t + t0_offset) % day;
        (std::f64::consts::TAU * r as f64 / day as f64).sin()
    };
    let total: Vec<f64> = (0..n as u64).map(|t| enc.encode(t)).collect();
    let daily: Vec<f64> = (0..n as u64).map(daily_only).collect();
    let weekly = total.iter().zip(&daily).map(|(a, b)| a - b).collect();
    EncodingCurve {
        samples_per_day: enc.day_len(),
        total,
        daily,
        weekly,
    }
}

#[derive(Debug, Serialize)]
pub struct GraphView {
    pub positions: Vec<(f64, f64)>,
    pub edges: Vec<(usize, usize)>,
    /// Exact hop distance from the source, `None` beyond `k_max` or unreachable.
    pub hop: Vec<Option<usize>>,
    pub hop_sizes: Vec<usize>,
    /// Largest distance that still yields an edge.
    pub cutoff: f64,
    pub connected: bool,
}

/// Synthetic sensor layout, its kernel graph, and the k-hop rings around `source`.
pub fn graph_view(
    n_nodes: usize,
    seed: u64,
    delta: f64,
    epsilon: f64,
    source: usize,
    k_max: usize,
) -> Result<GraphView> {
    let data = synthesize(&SynthConfig {
        n_nodes,
        n_days: 9,
        seed,
        ..SynthConfig::default().noiseless()
    })?;
    let graph = build_adjacency(&data.distances, n_nodes, delta, epsilon)?;
    let hops = khop_neighborhoods(&graph, k_max.max(1))?;
    let source = source.min(n_nodes - 1);
    let mut hop = vec![None; n_nodes];
    hop[source] = Some(0);
    let mut hop_sizes = Vec::with_capacity(hops.k_max());
    for k in 1..=hops.k_max() {
        let ring = hops.lists(k).neighbors(source);
        for &v in ring {
            hop[v] = Some(k);
        }
        hop_sizes.push(ring.len());
    }
    let edges = (0..n_nodes)
        .flat_map(|i| graph.neighbors(i).filter(move |&j| j > i).map(move |j| (i, j)))
        .collect();
    Ok(GraphView {
        positions: data.positions,
        edges,
        hop,
        hop_sizes,
        cutoff: (-delta * epsilon.ln()).sqrt(),
        connected: graph.is_connected(),
    })
}

#[derive(Debug, Serialize)]
pub struct SeriesView {
    pub samples_per_day: usize,
    pub truth: Vec<f64>,
    pub average: Vec<f64>,
    pub metrics: Metrics,
}

/// One day of one sensor against the mean of the same slots over the previous `p_days` days.
pub fn series_view(
    n_nodes: usize,
    seed: u64,
    noise_std: f64,
    sensor: usize,
    day: usize,
    p_days: usize,
) -> Result<SeriesView> {
    let p_days = p_days.clamp(1, 7);
    let data = synthesize(&SynthConfig {
        n_nodes,
        n_days: 14,
        seed,
        noise_std,
        ..SynthConfig::default()
    })?;
    let s = &data.series;
    let per_day = s.day_len();
    let day = day.clamp(p_days, 13);
    let sensor = sensor.min(n_nodes - 1);
    let truth: Vec<f64> = (0..per_day).map(|i| s.get(day * per_day + i, sensor)).collect();
    let average: Vec<f64> = (0..per_day)
        .map(|i| (1..=p_days).map(|p| s.get((day - p) * per_day + i, sensor)).sum::<f64>() / p_days as f64)
        .collect();
    let metrics = metrics(&average, &truth, DEFAULT_MASK_FLOOR)?;
    Ok(SeriesView {
        samples_per_day: per_day,
        truth,
        average,
        metrics,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    match r {
        Ok(v) => serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())),
        Err(e) => Err(JsValue::from_str(&e.to_string())),
    }
}

#[wasm_bindgen(js_name = encodingCurve)]
pub fn encoding_curve_js(hr_sample: u32, t0_offset: u32, n: usize) -> std::result::Result<String, JsValue> {
    to_js(Ok(encoding_curve(hr_sample, u64::from(t0_offset), n)))
}

#[wasm_bindgen(js_name = graphView)]
pub fn graph_view_js(
    n_nodes: usize,
    seed: u32,
    delta: f64,
    epsilon: f64,
    source: usize,
    k_max: usize,
) -> std::result::Result<String, JsValue> {
    to_js(graph_view(n_nodes, u64::from(seed), delta, epsilon, source, k_max))
}

#[wasm_bindgen(js_name = seriesView)]
pub fn series_view_js(
    n_nodes: usize,
    seed: u32,
    noise_std: f64,
    sensor: usize,
    day: usize,
    p_days: usize,
) -> std::result::Result<String, JsValue> {
    to_js(series_view(n_nodes, u64::from(seed), noise_std, sensor, day, p_days))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_terms_add_up() {
        let c = encoding_curve(12, 30, 2016 * 2);
        assert_eq!(c.samples_per_day, 288);
        for t in 0..c.total.len() {
            assert!((c.daily[t] + c.weekly[t] - c.total[t]).abs() < 1e-12);
        }
        assert_eq!(c.total[5], c.total[5 + 2016]);
    }

    #[test]
    fn graph_rings_partition_reachable_nodes() {
        let v = graph_view(20, 3, 0.1, 0.5, 0, 3).unwrap();
        assert_eq!(v.hop[0], Some(0));
        for k in 1..=3 {
            let count = v.hop.iter().filter(|h| **h == Some(k)).count();
            assert_eq!(count, v.hop_sizes[k - 1]);
        }
        // every edge joins nodes whose hop distances differ by at most one
        for &(i, j) in &v.edges {
            if let (Some(a), Some(b)) = (v.hop[i], v.hop[j]) {
                assert!(a.abs_diff(b) <= 1);
            }
        }
        assert!((v.cutoff - 0.26327).abs() < 1e-5);
    }

    #[test]
    fn series_and_average_cover_one_day() {
        let v = series_view(4, 1, 0.0, 2, 9, 3).unwrap();
        assert_eq!((v.truth.len(), v.average.len()), (288, 288));
        assert_eq!(v.metrics.count, 288);
        assert!(v.metrics.mae.is_finite() && v.metrics.mape.is_some());
    }

    #[test]
    fn bad_parameters_are_errors() {
        assert!(graph_view(5, 1, 0.0, 0.5, 0, 2).is_err());
        assert!(series_view(1, 1, 1.0, 0, 8, 3).is_err());
    }
}
