//! Rolling-window evaluation, the quantile-based metric suite, and the naive
//! last-value baseline.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::etl::TimeSeriesRecord;
use crate::features::{window_batch_at, NormStats};
use crate::heads::{
    predictive_quantiles, sample_forecast, unnormalize_forecast, ForecastDistribution,
    MC_SAMPLES, QUANTILE_LEVELS,
};
use crate::model::{forward, ForwardMode, ModelConfig};
use crate::rng;
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Clone, Serialize)]
pub struct EvalPlan {
    pub h: usize,
    pub stride: usize,
    pub windows: usize,
    pub levels: Vec<f64>,
    /// Monte-Carlo sample count for parametric-head quantiles.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            h: 48,
            stride: 48,
            windows: 12,
            levels: QUANTILE_LEVELS.to_vec(),
            n_samples: MC_SAMPLES,
            seed: 0,
        }
    }
}

/// Per-series symmetric MAPE over one window, dims averaged. Zero-denominator
/// terms contribute zero.
pub fn smape(y: &[f32], yhat: &[f32], h: usize, d_y: usize) -> f64 {
    assert_eq!(y.len(), h * d_y);
    assert_eq!(yhat.len(), h * d_y);
    let mut per_dim = vec![0.0f64; d_y];
    for p in 0..h {
        for k in 0..d_y {
            let (a, b) = (y[p * d_y + k] as f64, yhat[p * d_y + k] as f64);
            let denom = a.abs() + b.abs();
            if denom > 0.0 {
                per_dim[k] += (a - b).abs() / denom;
            }
        }
    }
    per_dim.iter().map(|s| 200.0 * s / h as f64).sum::<f64>() / d_y as f64
}

/// Quantile (pinball) loss at level `alpha`.
pub fn pinball(alpha: f64, q: f64, y: f64) -> f64 {
    if y >= q {
        alpha * (y - q)
    } else {
        (alpha - 1.0) * (y - q)
    }
}

/// Weighted quantile loss over an aggregation set: `2 * sum(pinball) /
/// sum(|y|)`.
pub fn wql(q: &[f32], y: &[f32], alpha: f64) -> Result<f64> {
    assert_eq!(q.len(), y.len());
    let denom: f64 = y.iter().map(|&v| (v as f64).abs()).sum();
    if denom == 0.0 {
        return Err(Error::Eval(format!(
            "wQL[{alpha}] undefined: zero total target mass over {} observations",
            y.len()
        )));
    }
    let num: f64 = q
        .iter()
        .zip(y)
        .map(|(&qv, &yv)| pinball(alpha, qv as f64, yv as f64))
        .sum();
    Ok(2.0 * num / denom)
}

/// CRPS approximation: mean wQL over the quantile levels. `qs` is `N x K`
/// row-major, `y` is `N`.
pub fn crps(qs: &[f32], y: &[f32], levels: &[f64]) -> Result<f64> {
    let k = levels.len();
    assert_eq!(qs.len(), y.len() * k);
    let mut acc = 0.0;
    let mut col = vec![0.0f32; y.len()];
    for (li, &alpha) in levels.iter().enumerate() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = qs[i * k + li];
        }
        acc += wql(&col, y, alpha)?;
    }
    Ok(acc / k as f64)
}

/// CRPS of the sum across dimensions, from joint samples. `samples` is
/// `S x N x d_y`, `y` is `N x d_y`.
pub fn crps_sum(
    samples: &[f32],
    s: usize,
    n: usize,
    d_y: usize,
    y: &[f32],
    levels: &[f64],
) -> Result<f64> {
    if s < levels.len() {
        return Err(Error::contract(format!(
            "crps_sum needs at least {} samples, got {s}",
            levels.len()
        )));
    }
    assert_eq!(samples.len(), s * n * d_y);
    assert_eq!(y.len(), n * d_y);
    let y_sum: Vec<f32> = (0..n)
        .map(|i| (0..d_y).map(|k| y[i * d_y + k]).sum())
        .collect();
    let k = levels.len();
    let mut qs = vec![0.0f32; n * k];
    let mut buf = vec![0.0f64; s];
    for i in 0..n {
        for (si, b) in buf.iter_mut().enumerate() {
            *b = (0..d_y)
                .map(|kd| samples[(si * n + i) * d_y + kd] as f64)
                .sum();
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (li, &lvl) in levels.iter().enumerate() {
            let pos = lvl * (s - 1) as f64;
            let lo = pos.floor() as usize;
            let w = pos - lo as f64;
            let hi = (lo + 1).min(s - 1);
            qs[i * k + li] = (buf[lo] * (1.0 - w) + buf[hi] * w) as f32;
        }
    }
    crps(&qs, &y_sum, levels)
}

/// Last-value baseline with Gaussian intervals from one-step residuals,
/// widened by sqrt(h). `context` is `d_y` rows; dims `[1, h, d_y]`.
pub fn naive_forecast(context: &[Vec<f32>], h: usize) -> ForecastDistribution {
    let d_y = context.len();
    let mut mean = vec![0.0f32; h * d_y];
    let mut std = vec![0.0f32; h * d_y];
    for (k, row) in context.iter().enumerate() {
        let last = *row.last().expect("non-empty context");
        let sigma = if row.len() >= 2 {
            let diffs: Vec<f64> = row.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt()
        } else {
            0.0
        };
        for p in 0..h {
            mean[p * d_y + k] = last;
            std[p * d_y + k] = (sigma * ((p + 1) as f64).sqrt()) as f32;
        }
    }
    ForecastDistribution::Normal { mean, std, dims: [1, h, d_y] }
}

pub enum Forecaster<'a> {
    Model {
        store: &'a ParamStore<f32>,
        cfg: &'a ModelConfig,
    },
    Naive,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesWindowRow {
    pub series_id: String,
    pub window: usize,
    pub smape: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub smape: f64,
    pub crps: f64,
    pub crps_sum: Option<f64>,
    /// (level, pooled wQL)
    pub wql: Vec<(f64, f64)>,
    pub series_count: usize,
    pub windows: usize,
    pub config_fingerprint: String,
    pub rows: Vec<SeriesWindowRow>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// One row per series-window plus a trailing summary row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(["series_id", "window", "smape", "crps"])?;
            for r in &self.rows {
                w.write_record([
                    r.series_id.as_str(),
                    &r.window.to_string(),
                    &format!("{:.6}", r.smape),
                    &format!("{:.6}", r.crps),
                ])?;
            }
            w.write_record([
                "__summary__",
                &self.windows.to_string(),
                &format!("{:.6}", self.smape),
                &format!("{:.6}", self.crps),
            ])?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Forecast one end-aligned batch in the original scale.
fn forecast_batch(
    forecaster: &Forecaster,
    collection: &[TimeSeriesRecord],
    l: usize,
    h: usize,
    end_offset: usize,
    stats_out: &mut Vec<NormStats>,
) -> Result<ForecastDistribution> {
    match forecaster {
        Forecaster::Model { store, cfg } => {
            let batch = window_batch_at(collection, l, h, end_offset)?;
            let mut g: Graph<f32> = Graph::new();
            let out = forward(&mut g, store, cfg, &batch, ForwardMode::Infer)?;
            let dist = out.to_distribution(&g, [batch.b, h, batch.d_y]);
            let un = unnormalize_forecast(&dist, &batch.stats);
            *stats_out = batch.stats;
            Ok(un)
        }
        Forecaster::Naive => {
            let d_y = collection[0].dim();
            let b = collection.len();
            let mut mean = vec![0.0f32; b * h * d_y];
            let mut std = vec![0.0f32; b * h * d_y];
            for (slot, rec) in collection.iter().enumerate() {
                let t = rec.len();
                let end = t - end_offset - h;
                let start = end.saturating_sub(l);
                let ctx: Vec<Vec<f32>> = rec
                    .targets
                    .iter()
                    .map(|row| row[start..end].to_vec())
                    .collect();
                let f = naive_forecast(&ctx, h);
                let ForecastDistribution::Normal { mean: m, std: s, .. } = f else {
                    unreachable!()
                };
                for p in 0..h * d_y {
                    mean[(slot * h * d_y) + p] = m[p];
                    std[(slot * h * d_y) + p] = s[p];
                }
            }
            Ok(ForecastDistribution::Normal { mean, std, dims: [b, h, d_y] })
        }
    }
}

/// Evaluate a model or baseline over the last `plan.windows` non-overlapping
/// horizons of every series.
pub fn rolling_evaluate(
    forecaster: &Forecaster,
    collection: &[TimeSeriesRecord],
    l: usize,
    plan: &EvalPlan,
    fingerprint: &str,
) -> Result<MetricsReport> {
    if collection.is_empty() {
        return Err(Error::contract("rolling_evaluate on an empty collection"));
    }
    let (h, m) = (plan.h, plan.windows);
    let d_y = collection[0].dim();
    let b = collection.len();
    let k = plan.levels.len();
    let mid = plan
        .levels
        .iter()
        .position(|&lv| (lv - 0.5).abs() < 1e-9)
        .ok_or_else(|| Error::contract("evaluation levels must include the median"))?;

    let mut rows = Vec::with_capacity(b * m);
    let mut smape_per_series = vec![0.0f64; b];
    // pooled pinball numerators per level and the shared |y| denominator
    let mut pin = vec![0.0f64; k];
    let mut denom = 0.0f64;
    let mut sum_samples: Vec<f32> = Vec::new();
    let mut sum_targets: Vec<f32> = Vec::new();
    let multivariate = d_y > 1;

    for w in 0..m {
        let end_offset = (m - 1 - w) * plan.stride;
        let mut stats = Vec::new();
        let dist = forecast_batch(forecaster, collection, l, h, end_offset, &mut stats)?;
        let seed = rng::mix(plan.seed ^ rng::mix(w as u64));
        let qs = predictive_quantiles(&dist, &plan.levels, plan.n_samples, seed)?;
        // ground truth in original scale
        let mut y = vec![0.0f32; b * h * d_y];
        for (slot, rec) in collection.iter().enumerate() {
            let t = rec.len();
            let end = t - end_offset;
            for p in 0..h {
                for kd in 0..d_y {
                    y[(slot * h + p) * d_y + kd] = rec.targets[kd][end - h + p];
                }
            }
        }
        for (slot, rec) in collection.iter().enumerate() {
            let y_s = &y[slot * h * d_y..(slot + 1) * h * d_y];
            let q_s = &qs[slot * h * d_y * k..(slot + 1) * h * d_y * k];
            let point: Vec<f32> = (0..h * d_y).map(|i| q_s[i * k + mid]).collect();
            let sm = smape(y_s, &point, h, d_y);
            smape_per_series[slot] += sm;
            let win_crps = crps(q_s, y_s, &plan.levels).unwrap_or(f64::NAN);
            rows.push(SeriesWindowRow {
                series_id: rec.series_id.clone(),
                window: w,
                smape: sm,
                crps: win_crps,
            });
        }
        for i in 0..b * h * d_y {
            denom += (y[i] as f64).abs();
            for (li, &alpha) in plan.levels.iter().enumerate() {
                pin[li] += pinball(alpha, qs[i * k + li] as f64, y[i] as f64);
            }
        }
        if multivariate {
            let s = plan.n_samples.max(k);
            let samples = sample_forecast(&dist, s, seed);
            sum_samples.extend_from_slice(&samples);
            sum_targets.extend_from_slice(&y);
        }
    }

    if denom == 0.0 {
        return Err(Error::Eval(
            "pooled wQL undefined: zero total target mass".into(),
        ));
    }
    let wql_levels: Vec<(f64, f64)> = plan
        .levels
        .iter()
        .zip(&pin)
        .map(|(&lv, &p)| (lv, 2.0 * p / denom))
        .collect();
    let crps_val = wql_levels.iter().map(|(_, v)| v).sum::<f64>() / k as f64;
    let crps_sum_val = if multivariate {
        let s = plan.n_samples.max(k);
        let n = sum_targets.len() / d_y;
        // samples were appended per window: reshape as windows of S x (b*h)
        let per_win = s * b * h * d_y;
        let n_win = sum_samples.len() / per_win;
        let mut joined = vec![0.0f32; s * n * d_y];
        for wi in 0..n_win {
            for si in 0..s {
                for pos in 0..b * h {
                    for kd in 0..d_y {
                        joined[((si * n) + (wi * b * h + pos)) * d_y + kd] =
                            sum_samples[wi * per_win + (si * b * h + pos) * d_y + kd];
                    }
                }
            }
        }
        Some(crps_sum(&joined, s, n, d_y, &sum_targets, &plan.levels)?)
    } else {
        None
    };

    let smape_mean = smape_per_series.iter().map(|s| s / m as f64).sum::<f64>() / b as f64;
    Ok(MetricsReport {
        smape: smape_mean,
        crps: crps_val,
        crps_sum: crps_sum_val,
        wql: wql_levels,
        series_count: b,
        windows: m,
        config_fingerprint: fingerprint.to_string(),
        rows,
    })
}

/// Write the pooled metric summary as a single CSV row (used by harness
/// commands to assemble comparison tables).
pub fn append_summary_csv(w: &mut dyn Write, label: &str, report: &MetricsReport) -> Result<()> {
    writeln!(
        w,
        "{label},{:.6},{:.6},{}",
        report.smape,
        report.crps,
        report
            .crps_sum
            .map_or("".to_string(), |v| format!("{v:.6}")),
    )?;
    Ok(())
}
