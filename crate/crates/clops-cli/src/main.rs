//! `clops` command-line interface: trace ingestion, splitting, synthetic data,
//! pre-training, adaptation, evaluation, and the ablation/scaling harnesses.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clops_core::error::{Error, Result};
use clops_core::etl::{
    aggregate_series, apply_split, clean_series, export_store, gen_synthetic, import_store,
    make_split, parse_trace, DatasetKind, SyntheticParams, TimeSeriesRecord, TraceSchema,
    FREQ_SECONDS, MIN_SERIES_LEN,
};
use clops_core::eval::{rolling_evaluate, EvalPlan, Forecaster};
use clops_core::harness::{
    ablate, scaling_medians, scaling_study, write_ablation_csv, write_scaling_csv,
    write_scaling_summary_csv, AblationAxis,
};
use clops_core::heads::{HeadKind, QUANTILE_LEVELS};
use clops_core::model::{AttnMask, ModelConfig, PosEnc, Variant};
use clops_core::train::{
    finetune, load_checkpoint, pretrain, save_checkpoint, TrainConfig, FINETUNE_LR_GRID,
};
use clops_core::util::Crc32;

#[derive(Parser)]
#[command(name = "clops", version, about = "Cluster-trace forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (meaning is command-specific).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. `--override train.iterations=100`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Azure2017,
    Borg2011,
    Ali2018,
    Synthetic,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> DatasetKind {
        match k {
            KindArg::Azure2017 => DatasetKind::Azure2017,
            KindArg::Borg2011 => DatasetKind::Borg2011,
            KindArg::Ali2018 => DatasetKind::Ali2018,
            KindArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Architecture,
    Head,
    Pe,
    Mask,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AdaptMode {
    ZeroShot,
    Finetune,
    Scratch,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a raw trace CSV into a cleaned series store.
    Ingest {
        /// Trace CSV path.
        input: PathBuf,
        #[arg(long)]
        kind: KindArg,
        /// Minimum cleaned series length.
        #[arg(long, default_value_t = MIN_SERIES_LEN)]
        min_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Split a store into pre-train and train-test collections by attribute.
    Split {
        input: PathBuf,
        /// Fraction of top-level attributes assigned to pre-training.
        #[arg(long, default_value_t = 0.8)]
        frac: f64,
        /// Test-region length in steps removed from pre-train series.
        #[arg(long, default_value_t = 576)]
        test_len: usize,
        #[arg(long)]
        out_pretrain: PathBuf,
        #[arg(long)]
        out_traintest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic collection store.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_series: usize,
        #[arg(long, default_value_t = 1000)]
        t_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train a model; writes a checkpoint and a JSONL training log.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a pre-trained checkpoint to the train-test collection.
    Adapt {
        #[arg(long)]
        mode: AdaptMode,
        /// Pre-trained checkpoint (required for zero_shot/finetune).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rolling-window evaluation of a checkpoint or the naive baseline.
    Evaluate {
        #[arg(long, conflicts_with = "naive")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the last-value baseline instead of a model.
        #[arg(long)]
        naive: bool,
        /// Store to evaluate on (defaults to `data.traintest` from config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// One-axis ablation sweep with a comparison-table CSV.
    Ablate {
        #[arg(long)]
        axis: AxisArg,
        #[command(flatten)]
        common: Common,
    },
    /// Model-size by data-fraction scaling grid.
    Scaling {
        /// Comma-separated preset names.
        #[arg(long, default_value = "tiny,small")]
        sizes: String,
        /// Comma-separated data fractions in (0, 1].
        #[arg(long, default_value = "0.1,1.0")]
        fracs: String,
        /// Seed replicates per grid cell.
        #[arg(long, default_value_t = 3)]
        replicates: u64,
        #[command(flatten)]
        common: Common,
    },
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    pretrain: Option<PathBuf>,
    traintest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    preset: String,
    variant: Option<Variant>,
    pe: Option<PosEnc>,
    head: Option<HeadKind>,
    attn_mask: Option<AttnMask>,
    use_datetime: Option<bool>,
    layers: Option<usize>,
    d_model: Option<usize>,
    d_ff: Option<usize>,
    n_heads: Option<usize>,
    d_kv: Option<usize>,
    l: Option<usize>,
    h: Option<usize>,
    d_y: Option<usize>,
    d_pd: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            variant: None,
            pe: None,
            head: None,
            attn_mask: None,
            use_datetime: None,
            layers: None,
            d_model: None,
            d_ff: None,
            n_heads: None,
            d_kv: None,
            l: None,
            h: None,
            d_y: None,
            d_pd: None,
        }
    }
}

impl ModelSection {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(variant, pe, head, attn_mask, use_datetime, layers, d_model, d_ff, n_heads, d_kv, l, h, d_y, d_pd);
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    stride: Option<usize>,
    windows: usize,
    n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { stride: None, windows: 12, n_samples: 100 }
    }
}

impl EvalSection {
    fn plan(&self, model: &ModelConfig, seed: u64) -> EvalPlan {
        EvalPlan {
            h: model.h,
            stride: self.stride.unwrap_or(model.h),
            windows: self.windows,
            levels: QUANTILE_LEVELS.to_vec(),
            n_samples: self.n_samples,
            seed,
        }
    }

    fn test_len(&self, model: &ModelConfig) -> usize {
        self.stride.unwrap_or(model.h) * (self.windows - 1) + model.h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthSection {
    #[serde(flatten)]
    params: SyntheticParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { params: SyntheticParams::default() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    data: DataSection,
    model: ModelSection,
    train: TrainConfig,
    eval: EvalSection,
    synth: SynthSection,
}

impl RunConfig {
    /// Fully resolved TOML text plus its hash, embedded in every artifact.
    fn resolved(&self) -> Result<(String, String)> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))?;
        let hash = format!("{:08x}", Crc32::of(text.as_bytes()));
        Ok((text, hash))
    }
}

fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(p.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?;
    }
    unreachable!()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut table: toml::Table = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| Error::Config(format!("invalid TOML in {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for ov in &common.overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{ov}' is not KEY=VALUE")))?;
        // try typed TOML first, fall back to a bare string
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        set_dotted(&mut table, k.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.train.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// helpers

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_config_sidecar(artifact: &Path, cfg: &RunConfig) -> Result<()> {
    let (text, hash) = cfg.resolved()?;
    let side = artifact.with_extension("config.toml");
    write_atomic(&side, format!("# config_hash = \"{hash}\"\n{text}").as_bytes())
}

fn load_store(path: &Path, what: &str) -> Result<Vec<TimeSeriesRecord>> {
    let (series, _) = import_store(path)
        .map_err(|e| Error::Store(format!("{what} store {}: {e}", path.display())))?;
    Ok(series)
}

fn require<'a>(opt: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what} path in config")))
}

/// Drop the test region (the last `test_len` steps) from every series.
fn strip_test_region(series: &[TimeSeriesRecord], test_len: usize) -> Result<Vec<TimeSeriesRecord>> {
    let out: Vec<TimeSeriesRecord> = series
        .iter()
        .filter_map(|r| {
            let cutoff = r.end() - chrono::Duration::seconds(test_len as i64 * FREQ_SECONDS);
            r.truncated_at(cutoff)
        })
        .collect();
    if out.is_empty() {
        return Err(Error::contract("no series remain after removing the test region"));
    }
    Ok(out)
}

fn evaluate_and_write(
    forecaster: &Forecaster,
    series: &[TimeSeriesRecord],
    l: usize,
    plan: &EvalPlan,
    hash: &str,
    out: &Path,
) -> Result<()> {
    let report = rolling_evaluate(forecaster, series, l, plan, hash)?;
    report.write_json(&out.with_extension("json"))?;
    report.write_csv(&out.with_extension("csv"))?;
    println!(
        "smape {:.4}  crps {:.4}  series {}  windows {}",
        report.smape, report.crps, report.series_count, report.windows
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// commands

fn cmd_ingest(input: &Path, kind: DatasetKind, min_len: usize, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "ingested.store");
    let schema = TraceSchema::default_for(kind);
    let file = File::open(input)?;
    let (rows, parse_report) = parse_trace(file, &schema)?;
    let aggregated = aggregate_series(rows, &schema);
    let (cleaned, reject_report) = clean_series(aggregated, min_len, kind.missing_threshold())?;
    export_store(&cleaned, kind, &out)?;
    write_config_sidecar(&out, &cfg)?;
    println!(
        "{}",
        serde_json::json!({ "parse": parse_report, "rejections": reject_report })
    );
    Ok(())
}

fn cmd_split(
    input: &Path,
    frac: f64,
    test_len: usize,
    out_pretrain: &Path,
    out_traintest: &Path,
    common: &Common,
) -> Result<()> {
    let cfg = load_config(common)?;
    let (series, kind) = import_store(input)?;
    let plan = make_split(&series, frac, cfg.seed, test_len)?;
    let (pre, tt) = apply_split(&series, &plan);
    export_store(&pre, kind, out_pretrain)?;
    export_store(&tt, kind, out_traintest)?;
    write_config_sidecar(out_pretrain, &cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "pretrain_attrs": plan.pretrain_attrs.len(),
            "traintest_attrs": plan.traintest_attrs.len(),
            "pretrain_series": pre.len(),
            "traintest_series": tt.len(),
            "end_timestamp": plan.end_timestamp.to_rfc3339(),
        })
    );
    Ok(())
}

fn cmd_synth(n_series: usize, t_len: usize, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "synthetic.store");
    let series = gen_synthetic(n_series, t_len, cfg.seed, &cfg.synth.params);
    export_store(&series, DatasetKind::Synthetic, &out)?;
    write_config_sidecar(&out, &cfg)?;
    println!("wrote {} series of length {t_len} to {}", series.len(), out.display());
    Ok(())
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "pretrained.ckpt");
    let model = cfg.model.resolve()?;
    let series = load_store(require(&cfg.data.pretrain, "data.pretrain")?, "pretrain")?;
    let log_path = out.with_extension("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = pretrain(&series, &model, &cfg.train, None, None, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(&out, &model, &outcome.store, Some(&outcome.opt), cfg.train.iterations as u64)?;
    write_config_sidecar(&out, &cfg)?;
    println!(
        "final loss {:.4} after {} steps -> {}",
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        cfg.train.iterations,
        out.display()
    );
    Ok(())
}

fn cmd_adapt(mode: AdaptMode, checkpoint: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "adapted.ckpt");
    let series = load_store(require(&cfg.data.traintest, "data.traintest")?, "traintest")?;
    match mode {
        AdaptMode::ZeroShot => {
            let ckpt = load_checkpoint(
                checkpoint.ok_or_else(|| Error::Config("zero_shot needs --checkpoint".into()))?,
            )?;
            save_checkpoint(&out, &ckpt.model, &ckpt.store, None, ckpt.step)?;
            println!("zero-shot handle (parameters unchanged) -> {}", out.display());
        }
        AdaptMode::Finetune => {
            let ckpt = load_checkpoint(
                checkpoint.ok_or_else(|| Error::Config("finetune needs --checkpoint".into()))?,
            )?;
            let test_len = cfg.eval.test_len(&ckpt.model);
            let (store, report) = finetune(
                &ckpt.store,
                &ckpt.model,
                &series,
                &cfg.train,
                test_len,
                &FINETUNE_LR_GRID,
            )?;
            save_checkpoint(&out, &ckpt.model, &store, None, ckpt.step)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        AdaptMode::Scratch => {
            let model = cfg.model.resolve()?;
            let test_len = cfg.eval.test_len(&model);
            let train_region = strip_test_region(&series, test_len)?;
            let outcome = pretrain(&train_region, &model, &cfg.train, None, None, None)?;
            save_checkpoint(&out, &model, &outcome.store, None, cfg.train.iterations as u64)?;
            println!(
                "scratch model trained on {} series -> {}",
                train_region.len(),
                out.display()
            );
        }
    }
    write_config_sidecar(&out, &cfg)?;
    Ok(())
}

fn cmd_evaluate(
    checkpoint: Option<&Path>,
    naive: bool,
    data: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "metrics");
    let (_, hash) = cfg.resolved()?;
    let series = match data {
        Some(p) => load_store(p, "evaluation")?,
        None => load_store(require(&cfg.data.traintest, "data.traintest")?, "traintest")?,
    };
    if naive {
        let model = cfg.model.resolve()?;
        let plan = cfg.eval.plan(&model, cfg.seed);
        evaluate_and_write(&Forecaster::Naive, &series, model.l, &plan, &hash, &out)
    } else {
        let ckpt = load_checkpoint(
            checkpoint.ok_or_else(|| Error::Config("evaluate needs --checkpoint or --naive".into()))?,
        )?;
        let plan = cfg.eval.plan(&ckpt.model, cfg.seed);
        evaluate_and_write(
            &Forecaster::Model { store: &ckpt.store, cfg: &ckpt.model },
            &series,
            ckpt.model.l,
            &plan,
            &hash,
            &out,
        )
    }
}

fn cmd_ablate(axis: AblationAxis, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "ablation.csv");
    let (_, hash) = cfg.resolved()?;
    let model = cfg.model.resolve()?;
    let pretrain_set = load_store(require(&cfg.data.pretrain, "data.pretrain")?, "pretrain")?;
    let eval_set = load_store(require(&cfg.data.traintest, "data.traintest")?, "traintest")?;
    let plan = cfg.eval.plan(&model, cfg.seed);
    let mut stderr = std::io::stderr();
    let rows = ablate(
        axis,
        &model,
        &cfg.train,
        &pretrain_set,
        &eval_set,
        &plan,
        Some(&mut stderr),
    )?;
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash}")?;
    write_ablation_csv(&mut buf, &rows)?;
    write_atomic(&out, &buf)?;
    write_config_sidecar(&out, &cfg)?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_scaling(sizes: &str, fracs: &str, replicates: u64, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, "scaling.csv");
    let (_, hash) = cfg.resolved()?;
    let train_set = load_store(require(&cfg.data.pretrain, "data.pretrain")?, "pretrain")?;
    let val_set = match &cfg.data.traintest {
        Some(p) => load_store(p, "traintest")?,
        None => train_set.clone(),
    };
    let size_cfgs: Vec<(String, ModelConfig)> = sizes
        .split(',')
        .map(|name| {
            let name = name.trim();
            let mut section = cfg.model.clone();
            section.preset = name.to_string();
            Ok((name.to_string(), section.resolve()?))
        })
        .collect::<Result<_>>()?;
    let fracs: Vec<f64> = fracs
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad data fraction '{f}': {e}")))
        })
        .collect::<Result<_>>()?;
    if replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    let seeds: Vec<u64> = (0..replicates).map(|i| cfg.seed + i).collect();
    let mut stderr = std::io::stderr();
    let rows = scaling_study(
        &size_cfgs,
        &fracs,
        &seeds,
        &train_set,
        &val_set,
        &cfg.train,
        Some(&mut stderr),
    )?;
    let cells = scaling_medians(&rows);
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash}")?;
    write_scaling_csv(&mut buf, &rows)?;
    write_atomic(&out, &buf)?;
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash}")?;
    write_scaling_summary_csv(&mut buf, &cells)?;
    let summary = out.with_extension("summary.csv");
    write_atomic(&summary, &buf)?;
    write_config_sidecar(&out, &cfg)?;
    println!("{} runs, {} cells -> {}", rows.len(), cells.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Ingest { input, kind, min_len, common } => {
            cmd_ingest(input, (*kind).into(), *min_len, common)
        }
        Cmd::Split { input, frac, test_len, out_pretrain, out_traintest, common } => {
            cmd_split(input, *frac, *test_len, out_pretrain, out_traintest, common)
        }
        Cmd::Synth { n_series, t_len, common } => cmd_synth(*n_series, *t_len, common),
        Cmd::Pretrain { common } => cmd_pretrain(common),
        Cmd::Adapt { mode, checkpoint, common } => {
            cmd_adapt(*mode, checkpoint.as_deref(), common)
        }
        Cmd::Evaluate { checkpoint, naive, data, common } => {
            cmd_evaluate(checkpoint.as_deref(), *naive, data.as_deref(), common)
        }
        Cmd::Ablate { axis, common } => {
            let axis = match axis {
                AxisArg::Architecture => AblationAxis::Architecture,
                AxisArg::Head => AblationAxis::Head,
                AxisArg::Pe => AblationAxis::Pe,
                AxisArg::Mask => AblationAxis::Mask,
            };
            cmd_ablate(axis, common)
        }
        Cmd::Scaling { sizes, fracs, replicates, common } => {
            cmd_scaling(sizes, fracs, *replicates, common)
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("CLOPS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Schema(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
