//! Experiment harnesses: one-axis ablation sweeps and the size-by-data
//! scaling study. Both produce flat rows ready for CSV emission.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::etl::TimeSeriesRecord;
use crate::eval::{rolling_evaluate, EvalPlan, Forecaster, MetricsReport};
use crate::heads::HeadKind;
use crate::model::{AttnMask, ModelConfig, PosEnc, Variant};
use crate::train::{pretrain, validation_loss, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Architecture,
    Head,
    Pe,
    Mask,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub smape: f64,
    pub crps: f64,
}

fn enum_label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn axis_grid(axis: AblationAxis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match axis {
        AblationAxis::Architecture => [
            Variant::EncDecIms,
            Variant::EncDecDms,
            Variant::EncoderMean,
            Variant::EncoderCls,
            Variant::EncoderFlatten,
            Variant::MaskedEncoder,
        ]
        .iter()
        .map(|&variant| {
            let cfg = ModelConfig { variant, ..base.clone() };
            (enum_label(&variant), cfg)
        })
        .collect(),
        AblationAxis::Head => [HeadKind::StudentT, HeadKind::MvStudentT, HeadKind::Quantile]
            .iter()
            .map(|&head| (enum_label(&head), ModelConfig { head, ..base.clone() }))
            .collect(),
        AblationAxis::Pe => [
            PosEnc::DatetimeOnly,
            PosEnc::Sinusoidal,
            PosEnc::Learned,
            PosEnc::Rope,
        ]
        .iter()
        .map(|&pe| (enum_label(&pe), ModelConfig { pe, ..base.clone() }))
        .collect(),
        AblationAxis::Mask => [AttnMask::Full, AttnMask::FullCausal, AttnMask::MaskCausal]
            .iter()
            .map(|&attn_mask| {
                (
                    enum_label(&attn_mask),
                    ModelConfig { attn_mask, ..base.clone() },
                )
            })
            .collect(),
    }
}

/// Train every grid point of one ablation axis from scratch and evaluate it
/// zero-shot on the held-out collection.
pub fn ablate(
    axis: AblationAxis,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    pretrain_set: &[TimeSeriesRecord],
    eval_set: &[TimeSeriesRecord],
    plan: &EvalPlan,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<AblationRow>> {
    if plan.h != base.h {
        return Err(Error::Config(format!(
            "evaluation horizon {} does not match model horizon {}",
            plan.h, base.h
        )));
    }
    let mut rows = Vec::new();
    for (name, cfg) in axis_grid(axis, base) {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "# ablate {}: {name}", enum_label(&axis))?;
        }
        let out = pretrain(pretrain_set, &cfg, train_cfg, None, None, None)?;
        let val_loss = validation_loss(&out.store, &cfg, eval_set)?;
        let report = rolling_evaluate(
            &Forecaster::Model { store: &out.store, cfg: &cfg },
            eval_set,
            cfg.l,
            plan,
            &name,
        )?;
        rows.push(AblationRow {
            name,
            params: out.store.total_parameters(),
            final_train_loss: *out.losses.last().unwrap_or(&f64::NAN),
            val_loss,
            smape: report.smape,
            crps: report.crps,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(w: &mut dyn Write, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "name,params,final_train_loss,val_loss,smape,crps")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.name, r.params, r.final_train_loss, r.val_loss, r.smape, r.crps
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub size: String,
    pub frac: f64,
    /// Total training observations available at this data fraction.
    pub observations: u64,
    pub seed: u64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingCell {
    pub size: String,
    pub frac: f64,
    pub observations: u64,
    pub median_val_loss: f64,
}

/// Deterministic data subset: the first `round(frac * n)` series (the
/// collection order is already shuffled by the split step).
pub fn data_fraction(collection: &[TimeSeriesRecord], frac: f64) -> &[TimeSeriesRecord] {
    let n = ((collection.len() as f64) * frac).round() as usize;
    &collection[..n.clamp(1, collection.len())]
}

/// Cross every model size with every data fraction and seed; the metric is
/// validation loss on a common held-out collection.
pub fn scaling_study(
    sizes: &[(String, ModelConfig)],
    fracs: &[f64],
    seeds: &[u64],
    train_set: &[TimeSeriesRecord],
    val_set: &[TimeSeriesRecord],
    train_cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<ScalingRow>> {
    if sizes.is_empty() || fracs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("scaling study needs sizes, fracs, and seeds".into()));
    }
    let mut rows = Vec::new();
    for (size, cfg) in sizes {
        for &frac in fracs {
            if !(0.0..=1.0).contains(&frac) || frac <= 0.0 {
                return Err(Error::Config(format!("data fraction {frac} out of (0, 1]")));
            }
            let subset = data_fraction(train_set, frac);
            let observations: u64 = subset.iter().map(|r| (r.len() * r.dim()) as u64).sum();
            for &seed in seeds {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "# scaling {size} frac={frac} seed={seed}")?;
                }
                let cfg_run = cfg.clone();
                let tc = TrainConfig { seed, ..train_cfg.clone() };
                let out = pretrain(subset, &cfg_run, &tc, None, None, None)?;
                let val_loss = validation_loss(&out.store, &cfg_run, val_set)?;
                rows.push(ScalingRow {
                    size: size.clone(),
                    frac,
                    observations,
                    seed,
                    val_loss,
                });
            }
        }
    }
    Ok(rows)
}

/// Collapse seed replicates to the per-cell median.
pub fn scaling_medians(rows: &[ScalingRow]) -> Vec<ScalingCell> {
    let mut cells: Vec<ScalingCell> = Vec::new();
    for r in rows {
        if cells
            .iter()
            .any(|c| c.size == r.size && c.frac == r.frac)
        {
            continue;
        }
        let mut vals: Vec<f64> = rows
            .iter()
            .filter(|x| x.size == r.size && x.frac == r.frac)
            .map(|x| x.val_loss)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        let median = if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
        cells.push(ScalingCell {
            size: r.size.clone(),
            frac: r.frac,
            observations: r.observations,
            median_val_loss: median,
        });
    }
    cells
}

pub fn write_scaling_csv(w: &mut dyn Write, rows: &[ScalingRow]) -> Result<()> {
    writeln!(w, "size,frac,observations,seed,val_loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6}",
            r.size, r.frac, r.observations, r.seed, r.val_loss
        )?;
    }
    Ok(())
}

pub fn write_scaling_summary_csv(w: &mut dyn Write, cells: &[ScalingCell]) -> Result<()> {
    writeln!(w, "size,frac,observations,median_val_loss")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{:.6}",
            c.size, c.frac, c.observations, c.median_val_loss
        )?;
    }
    Ok(())
}

/// Zero-shot vs fine-tuned vs scratch comparison on one adaptation target.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptationRow {
    pub mode: String,
    pub smape: f64,
    pub crps: f64,
}

pub fn write_adaptation_csv(w: &mut dyn Write, rows: &[AdaptationRow]) -> Result<()> {
    writeln!(w, "mode,smape,crps")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6}", r.mode, r.smape, r.crps)?;
    }
    Ok(())
}

/// Convenience evaluation wrapper used by the CLI adaptation command.
pub fn evaluate_model(
    store: &crate::tensor::ParamStore<f32>,
    cfg: &ModelConfig,
    eval_set: &[TimeSeriesRecord],
    plan: &EvalPlan,
    label: &str,
) -> Result<MetricsReport> {
    rolling_evaluate(&Forecaster::Model { store, cfg }, eval_set, cfg.l, plan, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etl::{gen_synthetic, SyntheticParams};
    use crate::heads::QUANTILE_LEVELS;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            d_kv: 8,
            l: 24,
            h: 6,
            ..ModelConfig::preset("tiny").unwrap()
        }
    }

    fn micro_train() -> TrainConfig {
        TrainConfig {
            iterations: 4,
            batch_size: 4,
            peak_lr: 1e-3,
            warmup_steps: 1,
            weight_decay: 0.1,
            seed: 0,
            eval_every: 0,
        }
    }

    fn micro_plan() -> EvalPlan {
        EvalPlan {
            h: 6,
            stride: 6,
            windows: 2,
            levels: QUANTILE_LEVELS.to_vec(),
            n_samples: 30,
            seed: 0,
        }
    }

    #[test]
    fn architecture_axis_covers_all_variants() {
        let grid = axis_grid(AblationAxis::Architecture, &micro_cfg());
        let names: Vec<&str> = grid.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "enc_dec_ims",
                "enc_dec_dms",
                "encoder_mean",
                "encoder_cls",
                "encoder_flatten",
                "masked_encoder"
            ]
        );
    }

    #[test]
    fn other_axes_have_expected_sizes() {
        let base = micro_cfg();
        assert_eq!(axis_grid(AblationAxis::Head, &base).len(), 3);
        assert_eq!(axis_grid(AblationAxis::Pe, &base).len(), 4);
        assert_eq!(axis_grid(AblationAxis::Mask, &base).len(), 3);
        // non-swept fields stay fixed
        for (_, cfg) in axis_grid(AblationAxis::Pe, &base) {
            assert_eq!(cfg.variant, base.variant);
            assert_eq!(cfg.head, base.head);
        }
    }

    #[test]
    fn ablate_mask_axis_produces_finite_rows() {
        let coll = gen_synthetic(6, 120, 3, &SyntheticParams::default());
        let rows = ablate(
            AblationAxis::Mask,
            &micro_cfg(),
            &micro_train(),
            &coll,
            &coll,
            &micro_plan(),
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.val_loss.is_finite(), "{}: {}", r.name, r.val_loss);
            assert!(r.smape.is_finite() && r.smape >= 0.0);
            assert!(r.params > 0);
        }
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("mask_causal"));
    }

    #[test]
    fn ablate_rejects_horizon_mismatch() {
        let coll = gen_synthetic(4, 120, 3, &SyntheticParams::default());
        let plan = EvalPlan { h: 48, ..micro_plan() };
        assert!(ablate(
            AblationAxis::Mask,
            &micro_cfg(),
            &micro_train(),
            &coll,
            &coll,
            &plan,
            None
        )
        .is_err());
    }

    #[test]
    fn scaling_rows_and_medians() {
        let coll = gen_synthetic(8, 120, 7, &SyntheticParams::default());
        let sizes = vec![("micro".to_string(), micro_cfg())];
        let rows = scaling_study(
            &sizes,
            &[0.5, 1.0],
            &[0, 1, 2],
            &coll,
            &coll,
            &micro_train(),
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let obs_half = rows.iter().find(|r| r.frac == 0.5).unwrap().observations;
        let obs_full = rows.iter().find(|r| r.frac == 1.0).unwrap().observations;
        assert!(obs_half < obs_full);
        assert_eq!(obs_full, 8 * 120);
        let cells = scaling_medians(&rows);
        assert_eq!(cells.len(), 2);
        for c in &cells {
            let mut vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.frac == c.frac)
                .map(|r| r.val_loss)
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(c.median_val_loss, vals[1]);
        }
        let mut buf = Vec::new();
        write_scaling_summary_csv(&mut buf, &cells).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("size,frac"));
    }

    #[test]
    fn data_fraction_never_empty() {
        let coll = gen_synthetic(3, 120, 1, &SyntheticParams::default());
        assert_eq!(data_fraction(&coll, 0.01).len(), 1);
        assert_eq!(data_fraction(&coll, 1.0).len(), 3);
    }
}
