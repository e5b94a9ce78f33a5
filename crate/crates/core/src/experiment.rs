//! Experiment configuration, run layout and the drivers behind each CLI subcommand.
//!
//! A run is one `(config, seed)` pair and owns the directory
//! `<output_dir>/<mode>-seed<seed>/` holding `manifest.json`, `epochs.csv`,
//! `summary.json`, `checkpoints/` and `masks/`. Everything except the wall-time
//! fields of `summary.json` is a pure function of the configuration and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{load_csv, make_synthetic, prepare, PreparedData, RawSeries, SplitSpec, SyntheticConfig};
use crate::diagnostics::{self, KlRow, MaskedSharpness};
use crate::error::{config_err, Error, Result};
use crate::models::{ModelConfig, SnrPlacement};
use crate::scam_loss::LossBreakdown;
use crate::sharpness::{sharpness_report, HvpContext, SharpnessReport};
use crate::training::{
    evaluate, evaluate_with, init_models, spread_indices, train_grid_search, train_mode, EpochRecord,
    GridRecord, Metrics, TrainConfig, TrainMode,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_true() -> bool {
    true
}

/// Where the series comes from: exactly one of `csv` or `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub has_date_column: bool,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Windows whose masks are dumped after training and by `diagnose`.
    pub mask_windows: usize,
    /// Size of the fixed held-out batch used for sharpness.
    pub sharpness_windows: usize,
    /// Windows used for the channel-alignment table.
    pub alignment_windows: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            mask_windows: 4,
            sharpness_windows: 512,
            alignment_windows: 1024,
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "SplitSpec::ett")]
    pub split: SplitSpec,
    /// Stride between training windows; evaluation splits always use 1.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub model: ModelConfig,
    /// `train.seed` is ignored by the drivers: every entry of `seeds` is one run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Also report metrics in the original units of the data.
    #[serde(default)]
    pub raw_metrics: bool,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub snr: Option<SnrPlacement>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err!("{}", e.message()))?;
        Ok(cfg)
    }

    /// Parses and validates a config file; relative dataset paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => config_err!("{}: {msg}", path.display()),
            other => other,
        })?;
        if let Some(csv) = &cfg.dataset.csv {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.csv = Some(base.join(csv));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(snr) = o.snr {
            self.model.snr = snr;
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.csv, &self.dataset.synthetic) {
            (Some(_), None) => {}
            (None, Some(s)) => s.validate()?,
            _ => return Err(config_err!("dataset needs exactly one of `csv` or `synthetic`")),
        }
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(config_err!("seeds must not be empty"));
        }
        if self.stride == 0 {
            return Err(config_err!("stride must be at least 1"));
        }
        Ok(())
    }

    /// Hash of the resolved configuration, independent of where outputs go.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// The raw series and a content hash of its source.
    pub fn load_series(&self) -> Result<(RawSeries, String)> {
        match (&self.dataset.csv, &self.dataset.synthetic) {
            (Some(path), _) => {
                let bytes = std::fs::read(path)?;
                Ok((load_csv(path, self.dataset.has_date_column)?, content_hash(&bytes)))
            }
            (None, Some(s)) => {
                let bytes = serde_json::to_vec(s)?;
                Ok((make_synthetic(s)?, content_hash(&bytes)))
            }
            (None, None) => Err(config_err!("no dataset configured")),
        }
    }

    pub fn prepare(&self) -> Result<(PreparedData, String)> {
        let (series, hash) = self.load_series()?;
        let data = prepare(&series, &self.split, self.model.lookback, self.model.horizon, self.stride)?;
        Ok((data, hash))
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.train.mode.as_str())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_epochs_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EpochRecord::CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub run_id: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val: Metrics,
    pub test: Metrics,
    pub raw_test: Option<Metrics>,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run_id: String,
    pub mode: TrainMode,
    pub config_hash: String,
    pub input_hash: String,
    pub seeds: Vec<SeedSummary>,
    pub files: Vec<String>,
}

/// Runs `job` for every seed on a pool of `threads` workers (0 = one per core).
pub fn for_each_seed<T: Send>(seeds: &[u64], threads: usize, job: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_err!("cannot build worker pool: {e}"))?;
    pool.install(|| seeds.par_iter().map(|s| job(*s)).collect())
}

/// Trains every seed of the configured mode and writes each run directory.
pub fn run_training(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<SeedSummary>> {
    cfg.validate()?;
    if cfg.train.mode == TrainMode::GridSearch {
        return Err(config_err!("mode grid_search is run by the grid-search command"));
    }
    let (data, input_hash) = cfg.prepare()?;
    let summaries = for_each_seed(&cfg.seeds, threads, |seed| train_one(cfg, &data, &input_hash, seed))?;
    if summaries.len() > 1 {
        let mean = |f: &dyn Fn(&SeedSummary) -> f64| summaries.iter().map(f).sum::<f64>() / summaries.len() as f64;
        let sweep = serde_json::json!({
            "mode": cfg.train.mode,
            "config_hash": cfg.config_hash(),
            "mean_test_mse": mean(&|s| s.test.mse),
            "mean_test_mae": mean(&|s| s.test.mae),
            "runs": summaries,
        });
        write_json(&cfg.output_dir.join(format!("{}-sweep.json", cfg.train.mode.as_str())), &sweep)?;
    }
    Ok(summaries)
}

fn train_one(cfg: &ExperimentConfig, data: &PreparedData, input_hash: &str, seed: u64) -> Result<SeedSummary> {
    let started = Instant::now();
    let run_id = cfg.run_id(seed);
    let dir = cfg.output_dir.join(&run_id);
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let out = train_mode(data, &cfg.model, &tcfg)?;

    let mut files = vec!["epochs.csv".to_string(), "summary.json".to_string(), "checkpoints/best.ckpt".to_string()];
    write_epochs_csv(&dir.join("epochs.csv"), &out.records)?;
    save_checkpoint(
        &dir.join("checkpoints/best.ckpt"),
        &cfg.model,
        data.train.channels(),
        cfg.train.mode,
        seed,
        out.best_epoch,
        cfg.echo(),
        &out.predictor,
        out.recon.as_ref(),
    )?;
    if let Some(g) = &out.recon {
        let windows = spread_indices(data.test.len(), cfg.diagnostics.mask_windows);
        for p in diagnostics::dump_masks(&dir.join("masks"), &out.predictor, g, &data.test, &windows)? {
            files.push(format!("masks/{}", p.file_name().expect("file").to_string_lossy()));
        }
    } else {
        std::fs::create_dir_all(dir.join("masks"))?;
    }
    let best = out.best_record();
    let summary = SeedSummary {
        seed,
        run_id: run_id.clone(),
        best_epoch: out.best_epoch,
        epochs_run: out.records.len(),
        best_val: best.val,
        test: best.test,
        raw_test: if cfg.raw_metrics {
            Some(evaluate_with(&out.predictor, &data.test, Some(&data.scaler))?)
        } else {
            None
        },
        skipped_steps: out.skipped_steps,
    };
    let epoch_times: Vec<f64> = out.records.iter().map(|r| r.wall_time_s).collect();
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "summary": summary,
            "config": cfg.echo(),
            "wall_time_s": started.elapsed().as_secs_f64(),
            "epoch_wall_time_s": epoch_times,
        }),
    )?;
    files.sort();
    write_json(
        &dir.join("manifest.json"),
        &RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            run_id,
            mode: cfg.train.mode,
            config_hash: cfg.config_hash(),
            input_hash: input_hash.to_string(),
            seeds: vec![summary.clone()],
            files,
        },
    )?;
    Ok(summary)
}

/// Runs the candidate grid search for every seed; each run writes `grid.csv`.
pub fn run_grid_search(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<Vec<GridRecord>>> {
    cfg.validate()?;
    let (data, input_hash) = cfg.prepare()?;
    let mut cfg = cfg.clone();
    cfg.train.mode = TrainMode::GridSearch;
    let cfg = &cfg;
    for_each_seed(&cfg.seeds, threads, |seed| {
        let run_id = cfg.run_id(seed);
        let dir = cfg.output_dir.join(&run_id);
        let channels = data.train.channels();
        let (_, g) = init_models(&cfg.model, channels, seed)?;
        let g = if cfg.train.grid.identity_init {
            crate::models::ReconstructionNet::identity(&cfg.model)?
        } else {
            g
        };
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let out = train_grid_search(&data, g, |s| Ok(init_models(&cfg.model, channels, s)?.0), &tcfg)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["candidate", "l_rec", "l_pred", "l_target", "test_mse", "test_mae", "inner_steps", "final_grad_rms"])?;
        for r in &out.records {
            w.write_record([
                r.candidate.to_string(),
                r.l_rec.to_string(),
                r.l_pred.to_string(),
                r.l_target.to_string(),
                r.test.mse.to_string(),
                r.test.mae.to_string(),
                r.inner_steps.to_string(),
                r.final_grad_rms.to_string(),
            ])?;
        }
        write_atomic(&dir.join("grid.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        write_json(
            &dir.join("manifest.json"),
            &serde_json::json!({
                "tool_version": TOOL_VERSION,
                "run_id": run_id,
                "mode": TrainMode::GridSearch,
                "config_hash": cfg.config_hash(),
                "input_hash": input_hash,
                "files": ["grid.csv"],
            }),
        )?;
        Ok(out.records)
    })
}

/// Loads a checkpoint and checks it against the experiment's window sizes.
pub fn load_for(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let m = &ck.header.model;
    if m.lookback != cfg.model.lookback || m.horizon != cfg.model.horizon {
        return Err(config_err!(
            "checkpoint windows {}→{} differ from config {}→{}",
            m.lookback,
            m.horizon,
            cfg.model.lookback,
            cfg.model.horizon
        ));
    }
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub val: Metrics,
    pub test: Metrics,
    pub raw_test: Option<Metrics>,
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ck = load_for(cfg, checkpoint)?;
    let (data, _) = cfg.prepare()?;
    Ok(EvalReport {
        val: evaluate(&ck.predictor, &data.val)?,
        test: evaluate(&ck.predictor, &data.test)?,
        raw_test: if cfg.raw_metrics {
            Some(evaluate_with(&ck.predictor, &data.test, Some(&data.scaler))?)
        } else {
            None
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub sharpness: SharpnessReport,
    pub masked_sharpness: Option<MaskedSharpness>,
    pub breakdown: Vec<(String, LossBreakdown)>,
    pub alignment: Vec<KlRow>,
}

/// Writes `breakdown.csv`, `sharpness.json`, `alignment.csv` and `masks/` into `dir`.
/// Mask-based outputs need a checkpoint with a reconstruction network.
pub fn run_diagnose(cfg: &ExperimentConfig, checkpoint: &Path, dir: &Path) -> Result<DiagnoseReport> {
    let ck = load_for(cfg, checkpoint)?;
    let (data, _) = cfg.prepare()?;
    let f = &ck.predictor;
    let seed = ck.header.seed;
    let sharp_windows = spread_indices(data.test.len(), cfg.diagnostics.sharpness_windows);
    let (x, y) = data.test.batch(&sharp_windows);
    let ones = crate::autodiff::Array::ones(y.shape());
    let sharpness = sharpness_report(&HvpContext::for_predictor(f, x, y, ones), seed)?;

    let mut report = DiagnoseReport {
        sharpness,
        masked_sharpness: None,
        breakdown: Vec::new(),
        alignment: Vec::new(),
    };
    if let Some(g) = &ck.recon {
        report.masked_sharpness = Some(diagnostics::masked_target_sharpness(f, g, &data.test, &sharp_windows, seed)?);
        for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            report.breakdown.push((name.to_string(), diagnostics::breakdown_over_split(f, g, split)?));
        }
        let align_windows = spread_indices(data.test.len(), cfg.diagnostics.alignment_windows);
        report.alignment = diagnostics::kl_alignment_table(g, &data.test, &align_windows)?;
        let mask_windows = spread_indices(data.test.len(), cfg.diagnostics.mask_windows);
        diagnostics::dump_masks(&dir.join("masks"), f, g, &data.test, &mask_windows)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "split", "rec_corrected", "pred_corrected", "sup_in_mask", "sup_out_mask", "total", "l_rec", "l_pred",
            "l_target",
        ])?;
        for (name, b) in &report.breakdown {
            let mut row = vec![name.clone()];
            row.extend(
                [b.rec_corrected, b.pred_corrected, b.sup_in_mask, b.sup_out_mask, b.l_rec + b.l_pred, b.l_rec, b.l_pred, b.l_target]
                    .iter()
                    .map(|v| v.to_string()),
            );
            w.write_record(row)?;
        }
        write_atomic(&dir.join("breakdown.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["channel_a", "channel_b", "kl_raw", "kl_intermediate", "kl_reconstructed"])?;
        for r in &report.alignment {
            w.write_record([
                r.channel_a.to_string(),
                r.channel_b.to_string(),
                r.raw.to_string(),
                r.intermediate.to_string(),
                r.reconstructed.to_string(),
            ])?;
        }
        write_atomic(&dir.join("alignment.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    }
    write_json(
        &dir.join("sharpness.json"),
        &serde_json::json!({ "supervised": report.sharpness, "masked": report.masked_sharpness }),
    )?;
    Ok(report)
}

/// Writes the configured synthetic series as CSV.
pub fn run_synth(cfg: &ExperimentConfig, seed: Option<u64>, path: &Path) -> Result<RawSeries> {
    let mut synth = cfg
        .dataset
        .synthetic
        .clone()
        .ok_or_else(|| config_err!("synth needs a [dataset.synthetic] section"))?;
    if let Some(s) = seed {
        synth.seed = s;
    }
    let series = make_synthetic(&synth)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    series.write_csv(path)?;
    Ok(series)
}
