//! Cluster-trace ETL: row-format trace parsing, per-entity aggregation onto a
//! fixed 5-minute grid, cleaning filters, and leakage-free pre-train /
//! train-test splits.

mod store;
mod synth;

pub use store::{export_store, import_store};
pub use synth::{gen_synthetic, SyntheticParams};

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const FREQ_SECONDS: i64 = 300;

/// Minimum cleaned series length: 12 test windows + 1 validation horizon +
/// 1 training horizon, each of 48 steps.
pub const MIN_SERIES_LEN: usize = 48 * (12 + 1 + 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Azure2017,
    Borg2011,
    Ali2018,
    Synthetic,
}

impl DatasetKind {
    /// Maximum tolerated fraction of missing values.
    pub fn missing_threshold(self) -> f64 {
        match self {
            DatasetKind::Azure2017 => 0.00125,
            _ => 0.01,
        }
    }

    /// Anchor for the dataset's relative timestamps.
    pub fn reference_datetime(self) -> DateTime<Utc> {
        match self {
            DatasetKind::Azure2017 => Utc.with_ymd_and_hms(2016, 11, 15, 0, 0, 0).unwrap(),
            DatasetKind::Borg2011 => Utc.with_ymd_and_hms(2011, 5, 1, 19, 0, 0).unwrap(),
            DatasetKind::Ali2018 => Utc.with_ymd_and_hms(2018, 1, 1, 12, 0, 0).unwrap(),
            DatasetKind::Synthetic => Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    /// Irregularly sampled traces are averaged into 5-minute bins; regular
    /// traces keep the first observation on duplicate timestamps.
    pub fn irregular(self) -> bool {
        matches!(self, DatasetKind::Ali2018)
    }
}

/// Column layout of a row-format trace CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSchema {
    pub kind: DatasetKind,
    pub time_col: String,
    pub entity_col: String,
    pub attr_col: String,
    /// Metrics forecast as targets.
    pub target_cols: Vec<String>,
    /// Metrics kept as past-only dynamic covariates.
    pub past_dynamic_cols: Vec<String>,
}

impl TraceSchema {
    pub fn default_for(kind: DatasetKind) -> Self {
        let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        match kind {
            DatasetKind::Azure2017 => TraceSchema {
                kind,
                time_col: "timestamp".into(),
                entity_col: "vm_id".into(),
                attr_col: "subscription_id".into(),
                target_cols: s(&["avg_cpu"]),
                past_dynamic_cols: s(&["min_cpu", "max_cpu"]),
            },
            DatasetKind::Borg2011 => TraceSchema {
                kind,
                time_col: "timestamp".into(),
                entity_col: "task_id".into(),
                attr_col: "user".into(),
                target_cols: s(&["cpu_rate", "canonical_memory"]),
                past_dynamic_cols: s(&[
                    "assigned_memory",
                    "unmapped_page_cache",
                    "total_page_cache",
                    "local_disk_space",
                    "sample_portion",
                ]),
            },
            DatasetKind::Ali2018 => TraceSchema {
                kind,
                time_col: "timestamp".into(),
                entity_col: "container_id".into(),
                attr_col: "app_du".into(),
                target_cols: s(&["cpu_util_percent", "mem_util_percent"]),
                past_dynamic_cols: s(&[
                    "cpi",
                    "mem_gps",
                    "mpki",
                    "net_in",
                    "net_out",
                    "disk_io_percent",
                ]),
            },
            DatasetKind::Synthetic => TraceSchema {
                kind,
                time_col: "timestamp".into(),
                entity_col: "series_id".into(),
                attr_col: "attr".into(),
                target_cols: s(&["value"]),
                past_dynamic_cols: vec![],
            },
        }
    }

    fn metric_cols(&self) -> Vec<&str> {
        self.target_cols
            .iter()
            .chain(self.past_dynamic_cols.iter())
            .map(|s| s.as_str())
            .collect()
    }
}

/// One typed trace observation. `metrics` is aligned with
/// `target_cols ++ past_dynamic_cols` of the schema it was parsed under.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub entity_id: String,
    pub top_level_attr: String,
    /// Seconds relative to the dataset reference point.
    pub timestamp: i64,
    pub metrics: Vec<Option<f64>>,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct ParseReport {
    pub rows_parsed: usize,
    pub rows_skipped: usize,
}

/// One cleaned, grid-aligned series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRecord {
    pub series_id: String,
    pub top_level_attr: String,
    pub start: DateTime<Utc>,
    pub freq_seconds: u32,
    /// Row-major `d_y x T`.
    pub targets: Vec<Vec<f32>>,
    /// Row-major `d_pd x T`.
    pub past_dynamic: Vec<Vec<f32>>,
    pub static_real: Vec<f32>,
    /// True where the target observation was missing before imputation
    /// (`d_y x T`).
    pub missing_mask: Vec<Vec<bool>>,
}

impl TimeSeriesRecord {
    pub fn len(&self) -> usize {
        self.targets.first().map_or(0, |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.targets.len()
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start
            + chrono::Duration::seconds(self.freq_seconds as i64 * (self.len() as i64 - 1))
    }

    pub fn timestamps(&self) -> impl Iterator<Item = DateTime<Utc>> + '_ {
        let start = self.start;
        let step = self.freq_seconds as i64;
        (0..self.len()).map(move |i| start + chrono::Duration::seconds(step * i as i64))
    }

    pub fn missing_fraction(&self) -> f64 {
        let total: usize = self.missing_mask.iter().map(|r| r.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let missing: usize = self
            .missing_mask
            .iter()
            .map(|r| r.iter().filter(|&&m| m).count())
            .sum();
        missing as f64 / total as f64
    }

    /// Drop observations after `cutoff`, returning None if nothing remains.
    pub fn truncated_at(&self, cutoff: DateTime<Utc>) -> Option<TimeSeriesRecord> {
        if self.end() <= cutoff {
            return Some(self.clone());
        }
        if self.start > cutoff {
            return None;
        }
        let keep = ((cutoff - self.start).num_seconds() / self.freq_seconds as i64) as usize + 1;
        let mut out = self.clone();
        for row in out.targets.iter_mut().chain(out.past_dynamic.iter_mut()) {
            row.truncate(keep);
        }
        for row in out.missing_mask.iter_mut() {
            row.truncate(keep);
        }
        Some(out)
    }
}

/// Parse a row-format trace CSV. Unparseable rows are counted, not fatal;
/// missing mandatory columns are a schema error.
pub fn parse_trace<R: Read>(reader: R, schema: &TraceSchema) -> Result<(Vec<TraceRow>, ParseReport)> {
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = csv.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing mandatory column '{name}'")))
    };
    let time_idx = col(&schema.time_col)?;
    let entity_idx = col(&schema.entity_col)?;
    let attr_idx = col(&schema.attr_col)?;
    let metric_idx: Vec<usize> = schema
        .metric_cols()
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut report = ParseReport::default();
    for record in csv.records() {
        let Ok(record) = record else {
            report.rows_skipped += 1;
            continue;
        };
        let field = |i: usize| record.get(i).unwrap_or("");
        let Ok(timestamp) = field(time_idx).trim().parse::<i64>() else {
            report.rows_skipped += 1;
            continue;
        };
        if timestamp < 0 || field(entity_idx).is_empty() {
            report.rows_skipped += 1;
            continue;
        }
        let metrics = metric_idx
            .iter()
            .map(|&i| {
                let f = field(i).trim();
                if f.is_empty() {
                    None
                } else {
                    f.parse::<f64>().ok()
                }
            })
            .collect();
        rows.push(TraceRow {
            entity_id: field(entity_idx).to_string(),
            top_level_attr: field(attr_idx).to_string(),
            timestamp,
            metrics,
        });
        report.rows_parsed += 1;
    }
    Ok((rows, report))
}

/// Group rows per entity onto the 5-minute grid. Duplicate timestamps keep
/// the first occurrence; irregular traces are averaged per bin; gaps become
/// nulls in the missing mask. Output is sorted by series id.
pub fn aggregate_series(rows: Vec<TraceRow>, schema: &TraceSchema) -> Vec<TimeSeriesRecord> {
    let d_y = schema.target_cols.len();
    let d_pd = schema.past_dynamic_cols.len();
    let d = d_y + d_pd;
    let mut groups: BTreeMap<(String, String), Vec<(i64, Vec<Option<f64>>)>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.entity_id, row.top_level_attr))
            .or_default()
            .push((row.timestamp, row.metrics));
    }
    let reference = schema.kind.reference_datetime();
    let mut out = Vec::with_capacity(groups.len());
    for ((entity, attr), mut obs) in groups {
        obs.sort_by_key(|(t, _)| *t);
        // bin -> per-metric (sum, count)
        let mut bins: BTreeMap<i64, Vec<(f64, u32)>> = BTreeMap::new();
        for (t, metrics) in obs {
            let bin = t / FREQ_SECONDS;
            let entry = bins.entry(bin).or_insert_with(|| vec![(0.0, 0); d]);
            if !schema.kind.irregular() && entry.iter().any(|&(_, c)| c > 0) {
                // duplicate timestamp on a regular trace: keep first
                continue;
            }
            for (slot, m) in entry.iter_mut().zip(metrics) {
                if let Some(v) = m {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
        let Some((&first_bin, _)) = bins.first_key_value() else {
            continue;
        };
        let (&last_bin, _) = bins.last_key_value().unwrap();
        let t_len = (last_bin - first_bin + 1) as usize;
        let mut targets = vec![vec![f32::NAN; t_len]; d_y];
        let mut past_dynamic = vec![vec![f32::NAN; t_len]; d_pd];
        let mut missing_mask = vec![vec![true; t_len]; d_y];
        for (&bin, vals) in &bins {
            let idx = (bin - first_bin) as usize;
            for (k, &(sum, count)) in vals.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let v = (sum / count as f64) as f32;
                if k < d_y {
                    targets[k][idx] = v;
                    missing_mask[k][idx] = false;
                } else {
                    past_dynamic[k - d_y][idx] = v;
                }
            }
        }
        out.push(TimeSeriesRecord {
            series_id: entity,
            top_level_attr: attr,
            start: reference + chrono::Duration::seconds(first_bin * FREQ_SECONDS),
            freq_seconds: FREQ_SECONDS as u32,
            targets,
            past_dynamic,
            static_real: vec![],
            missing_mask,
        });
    }
    out
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct RejectionReport {
    pub kept: usize,
    pub too_short: usize,
    pub too_missing: usize,
    pub constant: usize,
}

fn impute_carry_forward(row: &mut [f32]) {
    let first_valid = row.iter().position(|v| !v.is_nan());
    let Some(first_valid) = first_valid else { return };
    let mut last = row[first_valid];
    for v in row.iter_mut() {
        if v.is_nan() {
            *v = last;
        } else {
            last = *v;
        }
    }
}

fn is_constant(row: &[f32]) -> bool {
    let mut iter = row.iter().filter(|v| !v.is_nan());
    let Some(&first) = iter.next() else { return true };
    iter.all(|&v| v == first)
}

/// Apply the cleaning filters (too short, too missing, constant) and impute
/// surviving nulls by previous-value carry-forward.
pub fn clean_series(
    series: Vec<TimeSeriesRecord>,
    min_len: usize,
    missing_thresh: f64,
) -> Result<(Vec<TimeSeriesRecord>, RejectionReport)> {
    let mut report = RejectionReport::default();
    let mut kept = Vec::new();
    for mut rec in series {
        if rec.len() < min_len {
            report.too_short += 1;
            continue;
        }
        if rec.missing_fraction() > missing_thresh {
            report.too_missing += 1;
            continue;
        }
        if rec.targets.iter().any(|row| is_constant(row)) {
            report.constant += 1;
            continue;
        }
        for row in rec.targets.iter_mut().chain(rec.past_dynamic.iter_mut()) {
            impute_carry_forward(row);
        }
        report.kept += 1;
        kept.push(rec);
    }
    if kept.is_empty() {
        return Err(Error::contract(
            "cleaning rejected every series in the collection",
        ));
    }
    Ok((kept, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pretrain_attrs: BTreeSet<String>,
    pub traintest_attrs: BTreeSet<String>,
    pub end_timestamp: DateTime<Utc>,
    pub seed: u64,
    /// Number of test steps (`H * m`) removed from the pre-train series.
    pub test_len: usize,
}

/// Select top-level attributes for the train-test set uniformly at random
/// with `n = round(n_valid_attrs * frac * n_series / n_valid_series)`.
pub fn make_split(
    series: &[TimeSeriesRecord],
    frac: f64,
    seed: u64,
    test_len: usize,
) -> Result<SplitPlan> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {frac}"
        )));
    }
    if series.is_empty() {
        return Err(Error::contract("cannot split an empty collection"));
    }
    let mut attrs: Vec<&str> = series
        .iter()
        .map(|s| s.top_level_attr.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // All series here already passed cleaning, so the valid counts coincide
    // with the totals and the selection formula reduces to round(attrs*frac).
    let n_series = series.len() as f64;
    let n_valid_series = n_series;
    let n = ((attrs.len() as f64) * (frac * n_series) / n_valid_series).round() as usize;
    let n = n.clamp(1, attrs.len().saturating_sub(1).max(1));
    let mut rng = rng::stream(seed, 0, 0);
    attrs.shuffle(&mut rng);
    let traintest_attrs: BTreeSet<String> = attrs[..n].iter().map(|s| s.to_string()).collect();
    let pretrain_attrs: BTreeSet<String> = attrs[n..].iter().map(|s| s.to_string()).collect();
    let end_timestamp = series.iter().map(|s| s.end()).max().unwrap();
    Ok(SplitPlan {
        pretrain_attrs,
        traintest_attrs,
        end_timestamp,
        seed,
        test_len,
    })
}

/// Materialize a split plan: end-aligned train-test series, and pre-train
/// series with the test time-range removed.
pub fn apply_split(
    series: &[TimeSeriesRecord],
    plan: &SplitPlan,
) -> (Vec<TimeSeriesRecord>, Vec<TimeSeriesRecord>) {
    assert!(
        plan.pretrain_attrs.is_disjoint(&plan.traintest_attrs),
        "split plan attribute sets overlap"
    );
    let cutoff = plan.end_timestamp
        - chrono::Duration::seconds(FREQ_SECONDS * plan.test_len as i64);
    let mut pretrain = Vec::new();
    let mut traintest = Vec::new();
    for rec in series {
        if plan.traintest_attrs.contains(&rec.top_level_attr) {
            // Series not end-aligned to the final timestamp are dropped.
            if rec.end() == plan.end_timestamp {
                traintest.push(rec.clone());
            }
        } else if let Some(truncated) = rec.truncated_at(cutoff) {
            if !truncated.is_empty() {
                pretrain.push(truncated);
            }
        }
    }
    (pretrain, traintest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn azure_schema() -> TraceSchema {
        TraceSchema::default_for(DatasetKind::Azure2017)
    }

    fn mk_series(id: &str, attr: &str, values: Vec<f32>) -> TimeSeriesRecord {
        let t = values.len();
        TimeSeriesRecord {
            series_id: id.into(),
            top_level_attr: attr.into(),
            start: DatasetKind::Synthetic.reference_datetime(),
            freq_seconds: FREQ_SECONDS as u32,
            targets: vec![values],
            past_dynamic: vec![],
            static_real: vec![],
            missing_mask: vec![vec![false; t]],
        }
    }

    #[test]
    fn parse_valid_azure_row() {
        let csv = "timestamp,vm_id,subscription_id,avg_cpu,min_cpu,max_cpu\n300,vm1,sub1,10.5,1.0,50.0\n";
        let (rows, report) = parse_trace(csv.as_bytes(), &azure_schema()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(report.rows_parsed, 1);
        assert_eq!(rows[0].metrics.len(), 3);
        assert_eq!(rows[0].metrics[0], Some(10.5));
    }

    #[test]
    fn parse_empty_metric_is_null() {
        let csv = "timestamp,vm_id,subscription_id,avg_cpu,min_cpu,max_cpu\n300,vm1,sub1,,1.0,50.0\n";
        let (rows, _) = parse_trace(csv.as_bytes(), &azure_schema()).unwrap();
        assert_eq!(rows[0].metrics[0], None);
    }

    #[test]
    fn parse_malformed_timestamp_skipped() {
        let csv = "timestamp,vm_id,subscription_id,avg_cpu,min_cpu,max_cpu\nnot_a_ts,vm1,sub1,10,1,50\n600,vm1,sub1,11,1,50\n";
        let (rows, report) = parse_trace(csv.as_bytes(), &azure_schema()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(report.rows_skipped, 1);
    }

    #[test]
    fn parse_missing_mandatory_column_is_schema_error() {
        let csv = "timestamp,vm_id,avg_cpu,min_cpu,max_cpu\n300,vm1,10,1,50\n";
        let err = parse_trace(csv.as_bytes(), &azure_schema()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn aggregate_duplicate_timestamp_keeps_first() {
        let rows = vec![
            TraceRow {
                entity_id: "vm1".into(),
                top_level_attr: "s1".into(),
                timestamp: 300,
                metrics: vec![Some(1.0), None, None],
            },
            TraceRow {
                entity_id: "vm1".into(),
                top_level_attr: "s1".into(),
                timestamp: 300,
                metrics: vec![Some(99.0), None, None],
            },
        ];
        let recs = aggregate_series(rows, &azure_schema());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].targets[0], vec![1.0]);
    }

    #[test]
    fn aggregate_gap_inserts_null_and_mask() {
        let mk = |t: i64, v: f64| TraceRow {
            entity_id: "vm1".into(),
            top_level_attr: "s1".into(),
            timestamp: t,
            metrics: vec![Some(v), None, None],
        };
        let recs = aggregate_series(vec![mk(0, 1.0), mk(600, 3.0)], &azure_schema());
        assert_eq!(recs[0].len(), 3);
        assert!(recs[0].targets[0][1].is_nan());
        assert_eq!(recs[0].missing_mask[0], vec![false, true, false]);
    }

    #[test]
    fn aggregate_irregular_bins_average() {
        let schema = TraceSchema::default_for(DatasetKind::Ali2018);
        let mk = |t: i64, v: f64| TraceRow {
            entity_id: "c1".into(),
            top_level_attr: "app1".into(),
            timestamp: t,
            metrics: vec![Some(v), Some(0.0), None, None, None, None, None, None],
        };
        let recs = aggregate_series(vec![mk(10, 1.0), mk(100, 2.0), mk(250, 6.0)], &schema);
        assert_eq!(recs[0].len(), 1);
        assert_eq!(recs[0].targets[0][0], 3.0);
    }

    #[test]
    fn clean_rejects_short_series() {
        let good = mk_series("a", "s1", (0..MIN_SERIES_LEN).map(|i| i as f32).collect());
        let short = mk_series("b", "s1", (0..MIN_SERIES_LEN - 1).map(|i| i as f32).collect());
        let (kept, report) = clean_series(vec![good, short], MIN_SERIES_LEN, 0.01).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.too_short, 1);
        assert_eq!(kept[0].series_id, "a");
    }

    #[test]
    fn clean_keeps_exact_min_length() {
        let rec = mk_series("a", "s1", (0..MIN_SERIES_LEN).map(|i| (i % 7) as f32).collect());
        let (kept, report) = clean_series(vec![rec], MIN_SERIES_LEN, 0.01).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.kept, 1);
    }

    #[test]
    fn clean_rejects_constant_series() {
        let constant = mk_series("a", "s1", vec![7.0; MIN_SERIES_LEN]);
        let good = mk_series("b", "s1", (0..MIN_SERIES_LEN).map(|i| i as f32).collect());
        let (kept, report) = clean_series(vec![constant, good], MIN_SERIES_LEN, 0.01).unwrap();
        assert_eq!(report.constant, 1);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn clean_imputes_carry_forward_and_leading() {
        let mut rec = mk_series("a", "s1", (0..MIN_SERIES_LEN).map(|i| i as f32).collect());
        rec.targets[0][0] = f32::NAN;
        rec.targets[0][5] = f32::NAN;
        rec.missing_mask[0][0] = true;
        rec.missing_mask[0][5] = true;
        let (kept, _) = clean_series(vec![rec], MIN_SERIES_LEN, 0.01).unwrap();
        assert_eq!(kept[0].targets[0][0], 1.0); // leading null takes first observed
        assert_eq!(kept[0].targets[0][5], 4.0); // carry forward
    }

    #[test]
    fn clean_is_idempotent() {
        let mut rec = mk_series("a", "s1", (0..MIN_SERIES_LEN).map(|i| (i % 13) as f32).collect());
        rec.targets[0][3] = f32::NAN;
        rec.missing_mask[0][3] = true;
        let (once, _) = clean_series(vec![rec], MIN_SERIES_LEN, 0.01).unwrap();
        let (twice, _) = clean_series(once.clone(), MIN_SERIES_LEN, 0.01).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn clean_empty_output_is_error() {
        let constant = mk_series("a", "s1", vec![7.0; MIN_SERIES_LEN]);
        assert!(clean_series(vec![constant], MIN_SERIES_LEN, 0.01).is_err());
    }

    #[test]
    fn split_formula_selects_expected_count() {
        // 100 attrs, 10 series each, frac 0.10 -> 10 train-test attrs
        let mut series = Vec::new();
        for a in 0..100 {
            for i in 0..10 {
                series.push(mk_series(
                    &format!("s{a}_{i}"),
                    &format!("attr{a}"),
                    (0..MIN_SERIES_LEN).map(|j| (j % 11) as f32).collect(),
                ));
            }
        }
        let plan = make_split(&series, 0.10, 42, 48 * 12).unwrap();
        assert_eq!(plan.traintest_attrs.len(), 10);
        assert_eq!(plan.pretrain_attrs.len(), 90);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let series: Vec<_> = (0..50)
            .map(|a| mk_series(&format!("s{a}"), &format!("attr{a}"), (0..MIN_SERIES_LEN).map(|j| (j % 5) as f32).collect()))
            .collect();
        let p1 = make_split(&series, 0.2, 7, 48).unwrap();
        let p2 = make_split(&series, 0.2, 7, 48).unwrap();
        assert_eq!(p1.traintest_attrs, p2.traintest_attrs);
    }

    #[test]
    fn split_disjoint_and_no_leakage() {
        let series: Vec<_> = (0..40)
            .map(|a| {
                mk_series(
                    &format!("s{a}"),
                    &format!("attr{}", a % 20),
                    (0..MIN_SERIES_LEN).map(|j| ((j + a) % 17) as f32).collect(),
                )
            })
            .collect();
        let plan = make_split(&series, 0.25, 3, 48 * 12).unwrap();
        assert!(plan.pretrain_attrs.is_disjoint(&plan.traintest_attrs));
        let (pretrain, traintest) = apply_split(&series, &plan);
        let test_start = plan.end_timestamp
            - chrono::Duration::seconds(FREQ_SECONDS * (48 * 12 - 1));
        for rec in &traintest {
            assert_eq!(rec.end(), plan.end_timestamp);
        }
        for rec in &pretrain {
            assert!(rec.end() < test_start, "temporal leakage in pre-train set");
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let series = vec![mk_series("a", "s1", (0..MIN_SERIES_LEN).map(|j| j as f32).collect())];
        assert!(matches!(make_split(&series, 0.0, 1, 48), Err(Error::Config(_))));
        assert!(matches!(make_split(&series, 1.5, 1, 48), Err(Error::Config(_))));
    }
}
