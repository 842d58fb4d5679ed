//! Window sampling and the input feature pipeline: instance normalization,
//! log-scale static feature, date/time features, lag features, and final
//! input assembly.

use chrono::{DateTime, Datelike, Timelike, Utc};
use rand::Rng;

use crate::error::{Error, Result};
use crate::etl::TimeSeriesRecord;
use crate::rng;

/// Variance floor added inside the square root of the instance scale.
pub const NORM_EPS: f64 = 1e-10;

/// Lag offsets used at 5-minute frequency: sub-hour steps, multi-hour steps,
/// and daily multiples up to 1200.
pub const LAGS: [usize; 17] = [
    1, 2, 3, 4, 5, 6, 7, 12, 24, 36, 48, 96, 144, 288, 576, 864, 1200,
];

pub const N_DATETIME_FEATS: usize = 5;

/// Per-window normalization statistics, one (loc, scale) pair per target dim.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub loc: Vec<f32>,
    pub scale: Vec<f32>,
    pub eps: f64,
}

impl NormStats {
    pub fn identity(d_y: usize) -> Self {
        NormStats {
            loc: vec![0.0; d_y],
            scale: vec![1.0; d_y],
            eps: NORM_EPS,
        }
    }
}

/// Normalize a `d_y x L` context window: subtract the window mean and divide
/// by sqrt(mean squared deviation + eps), per target dimension.
pub fn instance_normalize(window: &[Vec<f32>]) -> (Vec<Vec<f32>>, NormStats) {
    let mut out = Vec::with_capacity(window.len());
    let mut loc = Vec::with_capacity(window.len());
    let mut scale = Vec::with_capacity(window.len());
    for row in window {
        assert!(!row.is_empty(), "instance_normalize requires a non-empty window");
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = (var + NORM_EPS).sqrt();
        out.push(row.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect());
        loc.push(mean as f32);
        scale.push(sd as f32);
    }
    (out, NormStats { loc, scale, eps: NORM_EPS })
}

/// Invert [`instance_normalize`] on plain values.
pub fn unnormalize_values(values: &[Vec<f32>], stats: &NormStats) -> Vec<Vec<f32>> {
    values
        .iter()
        .zip(stats.loc.iter().zip(&stats.scale))
        .map(|(row, (&loc, &scale))| row.iter().map(|&v| v * scale + loc).collect())
        .collect()
}

/// Static real feature: log of the per-dimension instance scale.
pub fn log_scale_feature(stats: &NormStats) -> Vec<f32> {
    stats.scale.iter().map(|&s| (s as f64).ln() as f32).collect()
}

/// Five calendar features per timestamp, each shifted into [-0.5, 0.5]:
/// minute-of-hour, hour-of-day, day-of-week, day-of-month, day-of-year.
pub fn datetime_features<I: IntoIterator<Item = DateTime<Utc>>>(timestamps: I) -> Vec<f32> {
    let mut out = Vec::new();
    for ts in timestamps {
        out.push(ts.minute() as f32 / 59.0 - 0.5);
        out.push(ts.hour() as f32 / 23.0 - 0.5);
        out.push(ts.weekday().num_days_from_monday() as f32 / 6.0 - 0.5);
        out.push((ts.day() - 1) as f32 / 30.0 - 0.5);
        out.push((ts.ordinal() - 1) as f32 / 365.0 - 0.5);
    }
    out
}

/// Lagged copies of `history` for window positions `[anchor, anchor + len)`,
/// row-major `len x lags.len()`. Positions reaching before the history start
/// are zero-filled.
pub fn lag_features(history: &[f32], anchor: usize, len: usize, lags: &[usize]) -> Vec<f32> {
    let mut out = vec![0.0f32; len * lags.len()];
    for p in 0..len {
        let tau = anchor + p;
        for (k, &lag) in lags.iter().enumerate() {
            if tau >= lag {
                if let Some(&v) = history.get(tau - lag) {
                    out[p * lags.len() + k] = v;
                }
            }
        }
    }
    out
}

/// One sampled training batch. All target-derived fields are in normalized
/// scale; `pad_mask` marks left-padded context positions of short series.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub b: usize,
    pub l: usize,
    pub h: usize,
    pub d_y: usize,
    pub d_pd: usize,
    /// `B x L x d_y`
    pub context_targets: Vec<f32>,
    /// `B x H x d_y`
    pub future_targets: Vec<f32>,
    /// `B x (L+H) x 5`
    pub dynamic_feats: Vec<f32>,
    /// `B x L x d_pd`
    pub past_dynamic: Vec<f32>,
    /// `B x (L+H) x (lags * d_y)`, normalized with the window stats
    pub lag_feats: Vec<f32>,
    /// `B x d_y`, log instance scale
    pub static_feats: Vec<f32>,
    /// `B x L`, true where the context was zero-padded
    pub pad_mask: Vec<bool>,
    pub stats: Vec<NormStats>,
    pub series_ids: Vec<String>,
}

/// Draw a batch of context/horizon windows. Series are selected with
/// probability proportional to their length, window starts uniformly over the
/// valid range; the RNG stream is keyed by `(seed, counter, slot)` so results
/// do not depend on who prepares the batch.
pub fn sample_windows(
    collection: &[TimeSeriesRecord],
    b: usize,
    l: usize,
    h: usize,
    seed: u64,
    counter: u64,
) -> Result<WindowBatch> {
    if collection.is_empty() {
        return Err(Error::contract("sample_windows on an empty collection"));
    }
    let d_y = collection[0].dim();
    let d_pd = collection[0].past_dynamic.len();
    let cumlen: Vec<u64> = collection
        .iter()
        .scan(0u64, |acc, s| {
            *acc += s.len() as u64;
            Some(*acc)
        })
        .collect();
    let total = *cumlen.last().unwrap();

    let n_lags = LAGS.len();
    let mut batch = WindowBatch {
        b,
        l,
        h,
        d_y,
        d_pd,
        context_targets: vec![0.0; b * l * d_y],
        future_targets: vec![0.0; b * h * d_y],
        dynamic_feats: vec![0.0; b * (l + h) * N_DATETIME_FEATS],
        past_dynamic: vec![0.0; b * l * d_pd],
        lag_feats: vec![0.0; b * (l + h) * n_lags * d_y],
        static_feats: vec![0.0; b * d_y],
        pad_mask: vec![false; b * l],
        stats: Vec::with_capacity(b),
        series_ids: Vec::with_capacity(b),
    };

    for slot in 0..b {
        let mut r = rng::stream(seed, counter, slot as u64);
        let u = r.gen_range(0..total);
        let si = cumlen.partition_point(|&c| c <= u);
        let rec = &collection[si];
        let t = rec.len();
        // Short series are left-padded with zeros up to L+H.
        let (start, pad) = if t >= l + h {
            (r.gen_range(0..=(t - (l + h))), 0)
        } else {
            (0, (l + h) - t)
        };
        write_window(&mut batch, slot, rec, start, pad);
    }
    Ok(batch)
}

/// Fill one batch slot with the window of `rec` whose observed part starts
/// at `start` and is left-padded by `pad` positions.
fn write_window(batch: &mut WindowBatch, slot: usize, rec: &TimeSeriesRecord, start: usize, pad: usize) {
    let (l, h, d_y, d_pd) = (batch.l, batch.h, batch.d_y, batch.d_pd);
    let n_lags = LAGS.len();
    let pad = pad.min(l);

    // Normalization stats over the observed part of the context.
    let ctx_rows: Vec<Vec<f32>> = rec
        .targets
        .iter()
        .map(|row| row[start..start + (l - pad)].to_vec())
        .collect();
    let (_, stats) = instance_normalize(&ctx_rows);

    for k in 0..d_y {
        let (loc, scale) = (stats.loc[k], stats.scale[k]);
        let norm = |v: f32| (v - loc) / scale;
        for p in pad..l {
            batch.context_targets[(slot * l + p) * d_y + k] =
                norm(rec.targets[k][start + p - pad]);
        }
        for p in 0..h {
            let idx = start + (l - pad) + p;
            batch.future_targets[(slot * h + p) * d_y + k] = rec.targets[k]
                .get(idx)
                .map_or(0.0, |&v| norm(v));
        }
        // Lags read the full normalized history up to the window.
        let hist: Vec<f32> = rec.targets[k].iter().map(|&v| norm(v)).collect();
        let lagged = lag_features(&hist, start, l + h - pad, &LAGS);
        for p in 0..(l + h - pad) {
            for g in 0..n_lags {
                batch.lag_feats[((slot * (l + h)) + pad + p) * n_lags * d_y + g * d_y + k] =
                    lagged[p * n_lags + g];
            }
        }
        batch.static_feats[slot * d_y + k] = (scale as f64).ln() as f32;
    }
    for p in 0..pad {
        batch.pad_mask[slot * l + p] = true;
    }
    for (k, row) in rec.past_dynamic.iter().enumerate() {
        // Past covariates get their own instance normalization.
        let seg = &row[start..start + (l - pad)];
        let (normed, _) = instance_normalize(std::slice::from_ref(&seg.to_vec()));
        for (p, &v) in normed[0].iter().enumerate() {
            batch.past_dynamic[(slot * l + pad + p) * d_pd + k] = v;
        }
    }
    let step = rec.freq_seconds as i64;
    let win_start =
        rec.start + chrono::Duration::seconds(step * start as i64 - step * pad as i64);
    let times = (0..(l + h)).map(|p| win_start + chrono::Duration::seconds(step * p as i64));
    let feats = datetime_features(times);
    batch.dynamic_feats
        [slot * (l + h) * N_DATETIME_FEATS..(slot + 1) * (l + h) * N_DATETIME_FEATS]
        .copy_from_slice(&feats);
    batch.stats.push(stats);
    batch.series_ids.push(rec.series_id.clone());
}

/// Deterministic end-aligned batch: one slot per series, with the forecast
/// window's last step landing `end_offset` steps before the series end.
/// Contexts reaching past the series start are zero-padded.
pub fn window_batch_at(
    collection: &[TimeSeriesRecord],
    l: usize,
    h: usize,
    end_offset: usize,
) -> Result<WindowBatch> {
    if collection.is_empty() {
        return Err(Error::contract("window_batch_at on an empty collection"));
    }
    let b = collection.len();
    let d_y = collection[0].dim();
    let d_pd = collection[0].past_dynamic.len();
    let n_lags = LAGS.len();
    let mut batch = WindowBatch {
        b,
        l,
        h,
        d_y,
        d_pd,
        context_targets: vec![0.0; b * l * d_y],
        future_targets: vec![0.0; b * h * d_y],
        dynamic_feats: vec![0.0; b * (l + h) * N_DATETIME_FEATS],
        past_dynamic: vec![0.0; b * l * d_pd],
        lag_feats: vec![0.0; b * (l + h) * n_lags * d_y],
        static_feats: vec![0.0; b * d_y],
        pad_mask: vec![false; b * l],
        stats: Vec::with_capacity(b),
        series_ids: Vec::with_capacity(b),
    };
    for (slot, rec) in collection.iter().enumerate() {
        let t = rec.len();
        if t < end_offset + h + 1 {
            return Err(Error::contract(format!(
                "series '{}' (len {t}) too short for horizon {h} at offset {end_offset}",
                rec.series_id
            )));
        }
        let end = t - end_offset;
        let avail = end - h; // observations available as context
        let (start, pad) = if avail >= l { (avail - l, 0) } else { (0, l - avail) };
        write_window(&mut batch, slot, rec, start, pad);
    }
    Ok(batch)
}

/// Dense model input assembled from a batch, `B x (L+H) x d_in`.
#[derive(Debug, Clone)]
pub struct AssembledInputs {
    pub data: Vec<f32>,
    pub b: usize,
    pub t: usize,
    pub d_in: usize,
}

pub fn input_dim(d_y: usize, d_pd: usize, use_datetime: bool) -> usize {
    d_y + if use_datetime { N_DATETIME_FEATS } else { 0 } + LAGS.len() * d_y + d_y + d_pd
}

/// Concatenate per-position channels: targets, date/time features, lag
/// features, broadcast log-scale, past covariates. Target and past-covariate
/// channels are zero in the prediction range; lag channels there keep only
/// offsets >= H so no future value leaks in.
pub fn assemble_inputs(
    batch: &WindowBatch,
    use_datetime: bool,
    expected_d_in: Option<usize>,
) -> Result<AssembledInputs> {
    let (b, l, h, d_y, d_pd) = (batch.b, batch.l, batch.h, batch.d_y, batch.d_pd);
    let t = l + h;
    let n_lags = LAGS.len();
    let d_in = input_dim(d_y, d_pd, use_datetime);
    if let Some(expect) = expected_d_in {
        if expect != d_in {
            return Err(Error::contract(format!(
                "assembled input dim {d_in} does not match model config {expect}"
            )));
        }
    }
    let mut data = vec![0.0f32; b * t * d_in];
    for slot in 0..b {
        for p in 0..t {
            let dst = &mut data[(slot * t + p) * d_in..(slot * t + p + 1) * d_in];
            let mut c = 0;
            if p < l {
                for k in 0..d_y {
                    dst[c + k] = batch.context_targets[(slot * l + p) * d_y + k];
                }
            }
            c += d_y;
            if use_datetime {
                for k in 0..N_DATETIME_FEATS {
                    dst[c + k] =
                        batch.dynamic_feats[(slot * t + p) * N_DATETIME_FEATS + k];
                }
                c += N_DATETIME_FEATS;
            }
            for g in 0..n_lags {
                for k in 0..d_y {
                    if p >= l && LAGS[g] < h {
                        continue; // would reach into the prediction range
                    }
                    dst[c + g * d_y + k] =
                        batch.lag_feats[(slot * t + p) * n_lags * d_y + g * d_y + k];
                }
            }
            c += n_lags * d_y;
            for k in 0..d_y {
                dst[c + k] = batch.static_feats[slot * d_y + k];
            }
            c += d_y;
            if p < l {
                for k in 0..d_pd {
                    dst[c + k] = batch.past_dynamic[(slot * l + p) * d_pd + k];
                }
            }
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("assembled inputs contain non-finite values".into()));
    }
    Ok(AssembledInputs { data, b, t, d_in })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etl::{gen_synthetic, SyntheticParams};
    use approx::assert_abs_diff_eq;
    use chrono::TimeZone;
    use proptest::prelude::*;

    #[test]
    fn normalize_constant_window() {
        let (out, stats) = instance_normalize(&[vec![7.0; 10]]);
        assert!(out[0].iter().all(|&v| v == 0.0));
        assert_eq!(stats.loc[0], 7.0);
        assert_abs_diff_eq!(stats.scale[0] as f64, NORM_EPS.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn normalize_two_points() {
        let (out, stats) = instance_normalize(&[vec![0.0, 2.0]]);
        assert_abs_diff_eq!(stats.loc[0], 1.0);
        assert_abs_diff_eq!(stats.scale[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out[0][0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(out[0][1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn log_scale_values() {
        let mk = |s: f32| NormStats { loc: vec![0.0], scale: vec![s], eps: NORM_EPS };
        assert_abs_diff_eq!(log_scale_feature(&mk(1.0))[0], 0.0);
        assert_abs_diff_eq!(log_scale_feature(&mk(std::f32::consts::E))[0], 1.0, epsilon = 1e-6);
        let constant = log_scale_feature(&mk(NORM_EPS.sqrt() as f32))[0];
        assert!(constant.is_finite());
    }

    #[test]
    fn datetime_feature_endpoints() {
        let ts = |h: u32, m: u32| Utc.with_ymd_and_hms(2020, 1, 1, h, m, 0).unwrap();
        let f = datetime_features([ts(0, 0)]);
        assert_abs_diff_eq!(f[0], -0.5); // minute 0
        let f = datetime_features([ts(0, 59)]);
        assert_abs_diff_eq!(f[0], 0.5); // minute 59
        let f = datetime_features([ts(12, 0)]);
        assert_abs_diff_eq!(f[1], 12.0 / 23.0 - 0.5, epsilon = 1e-6);
    }

    #[test]
    fn lag_one_is_shift() {
        let y: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let out = lag_features(&y, 5, 4, &[1]);
        assert_eq!(out, vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn lag_before_start_is_zero() {
        let y: Vec<f32> = (1..=10).map(|i| i as f32).collect();
        let out = lag_features(&y, 0, 3, &[2]);
        assert_eq!(out, vec![0.0, 0.0, 1.0]);
    }

    fn tiny_collection() -> Vec<crate::etl::TimeSeriesRecord> {
        gen_synthetic(4, 400, 11, &SyntheticParams::default())
    }

    #[test]
    fn sampling_is_length_proportional() {
        let mut coll = gen_synthetic(2, 100, 0, &SyntheticParams::default());
        coll[1] = gen_synthetic(1, 300, 1, &SyntheticParams::default()).remove(0);
        coll[1].series_id = "long".into();
        let mut counts = [0usize; 2];
        let n = 100_000;
        let b = 10;
        for counter in 0..(n / b) {
            let batch = sample_windows(&coll, b, 48, 12, 9, counter as u64).unwrap();
            for id in &batch.series_ids {
                counts[if id == "long" { 1 } else { 0 }] += 1;
            }
        }
        let frac = counts[1] as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.01, "long-series fraction {frac}");
    }

    #[test]
    fn single_series_always_chosen() {
        let coll = gen_synthetic(1, 200, 0, &SyntheticParams::default());
        let batch = sample_windows(&coll, 8, 48, 12, 0, 0).unwrap();
        assert!(batch.series_ids.iter().all(|s| s == &coll[0].series_id));
    }

    #[test]
    fn same_seed_counter_identical_batch() {
        let coll = tiny_collection();
        let a = sample_windows(&coll, 4, 96, 24, 5, 77).unwrap();
        let b = sample_windows(&coll, 4, 96, 24, 5, 77).unwrap();
        assert_eq!(a.context_targets, b.context_targets);
        assert_eq!(a.future_targets, b.future_targets);
        let c = sample_windows(&coll, 4, 96, 24, 5, 78).unwrap();
        assert_ne!(a.context_targets, c.context_targets);
    }

    #[test]
    fn short_series_left_padded() {
        let coll = gen_synthetic(1, 100, 0, &SyntheticParams::default());
        let batch = sample_windows(&coll, 2, 96, 24, 0, 0).unwrap();
        // L+H = 120 > 100, so 20 leading positions are padded
        assert!(batch.pad_mask[..20].iter().all(|&m| m));
        assert!(batch.pad_mask[20..96].iter().all(|&m| !m));
        assert!(batch.context_targets[..20].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assembled_dims_and_finiteness() {
        let coll = tiny_collection();
        let batch = sample_windows(&coll, 3, 96, 24, 1, 0).unwrap();
        let x = assemble_inputs(&batch, true, Some(24)).unwrap();
        assert_eq!(x.d_in, 24); // 1 target + 5 datetime + 17 lags + 1 log-scale
        assert_eq!(x.data.len(), 3 * 120 * 24);
        let x = assemble_inputs(&batch, false, None).unwrap();
        assert_eq!(x.d_in, 19);
        assert!(assemble_inputs(&batch, true, Some(30)).is_err());
    }

    #[test]
    fn prediction_range_has_no_short_lags() {
        let coll = tiny_collection();
        let batch = sample_windows(&coll, 2, 96, 24, 1, 0).unwrap();
        let x = assemble_inputs(&batch, true, None).unwrap();
        // channel of lag 1 (first lag) must be zero at every prediction position
        let lag1_channel = 1 + N_DATETIME_FEATS;
        for slot in 0..2 {
            for p in 96..120 {
                assert_eq!(x.data[(slot * 120 + p) * x.d_in + lag1_channel], 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trip(values in proptest::collection::vec(-1e4f32..1e4, 2..64)) {
            let (normed, stats) = instance_normalize(std::slice::from_ref(&values));
            let back = unnormalize_values(&normed, &stats);
            let tol = 1e-3f32.max(stats.scale[0].abs() * 1e-4);
            for (a, b) in values.iter().zip(&back[0]) {
                prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }

        #[test]
        fn datetime_features_in_range(secs in 0i64..4_000_000_000) {
            let ts = Utc.timestamp_opt(secs, 0).unwrap();
            for f in datetime_features([ts]) {
                prop_assert!((-0.5..=0.5).contains(&f));
            }
        }
    }
}
