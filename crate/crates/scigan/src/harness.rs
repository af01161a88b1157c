//! Experiment driver: structured run configs, the pipeline commands
//! (simulate, train, evaluate, sweep, hpo, oracle-check) and deterministic
//! result tables.
//!
//! A run directory holds one dataset bundle per seed, one subdirectory per
//! `(model, seed)` pair, and `results.csv` / `summary.csv` at the top.
//! All numeric output is written through plain `Display` formatting so a
//! repeated run with the same master seeds is byte-identical; measured
//! durations live in a separate `timings.csv` to keep it that way.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_fit, BaselineConfig, BaselineNet, BaselineVariant};
use crate::error::{Error, Result};
use crate::gan::{train_scigan, SciganModel, TrainConfig, Variant};
use crate::metrics::{evaluate_model, ConstantModel, DoseResponse, DEFAULT_GRID_N};
use crate::random::{self, rng_from_seed};
use crate::simulate::{
    discretize_dosages, load_dataset, load_features, make_dataset, save_dataset, synth_features,
    Dataset, Manifest, ResponseModel, SimulationConfig,
};
use crate::tensor::Tensor2;
use crate::theory::{
    builtin_fixtures, exact_disc_loss, hierarchical_factorization_check, kl_identity_check,
    optimal_discriminator, perturb_discriminator,
};

pub const OUTPUT_ROOT_ENV: &str = "SCIGAN_OUTPUT_ROOT";

const RESULT_HEADER: &str =
    "run_id,model,seed,kappa,alpha,sqrt_mise,sqrt_dpe,sqrt_pe,grid_n,wall_time_s";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub feature_dim: usize,
    /// Optional real feature matrix; synthetic features are drawn otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features_csv: Option<PathBuf>,
    /// Snap factual dosages to an even grid with this many levels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_levels: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 1000,
            feature_dim: 10,
            features_csv: None,
            beta_levels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub id: String,
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub grid_n: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            id: "run".into(),
            models: vec!["scigan".into(), "mlp_m".into()],
            seeds: vec![1],
            output_dir: PathBuf::from("runs/default"),
            grid_n: DEFAULT_GRID_N,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub simulation: SimulationConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        if self.data.n == 0 || self.data.feature_dim == 0 {
            return Err(Error::Config("data.n and data.feature_dim must be positive".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must be nonempty".into()));
        }
        if self.run.models.is_empty() {
            return Err(Error::Config("run.models must be nonempty".into()));
        }
        for name in &self.run.models {
            ModelKind::by_name(name)?;
        }
        if self.run.grid_n < 2 {
            return Err(Error::Config("run.grid_n must be at least 2".into()));
        }
        if let Some(levels) = self.data.beta_levels {
            if levels < 2 {
                return Err(Error::Config("data.beta_levels must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Output directory, with relative paths anchored at `SCIGAN_OUTPUT_ROOT`
    /// when that variable is set.
    pub fn output_dir(&self) -> PathBuf {
        if self.run.output_dir.is_relative() {
            if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
                return PathBuf::from(root).join(&self.run.output_dir);
            }
        }
        self.run.output_dir.clone()
    }

    pub fn dataset_dir(&self, seed: u64) -> PathBuf {
        self.output_dir().join("dataset").join(format!("seed{seed}"))
    }

    pub fn model_dir(&self, model: &str, seed: u64) -> PathBuf {
        self.output_dir()
            .join("models")
            .join(model)
            .join(format!("seed{seed}"))
    }

    /// Training-time dosage restriction follows the dataset's grid unless
    /// overridden explicitly.
    fn effective_train(&self) -> TrainConfig {
        let mut train = self.train.clone();
        if train.dosage_levels.is_none() {
            train.dosage_levels = self.data.beta_levels;
        }
        train
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Scigan(Variant),
    Baseline(BaselineVariant),
    Constant,
    Oracle,
}

impl ModelKind {
    pub fn by_name(name: &str) -> Result<ModelKind> {
        Ok(match name {
            "scigan" => ModelKind::Scigan(Variant::full()),
            "scigan-single" => ModelKind::Scigan(Variant::single_disc()),
            "scigan-baseline" => ModelKind::Scigan(Variant::baseline()),
            "scigan-supervised" => ModelKind::Scigan(Variant::plus_supervised()),
            "scigan-multitask" => ModelKind::Scigan(Variant::plus_multitask()),
            "scigan-hierarchical" => ModelKind::Scigan(Variant::plus_hierarchical()),
            "mlp" | "mlp_m" => ModelKind::Baseline(BaselineVariant::by_name(name)?),
            "constant" => ModelKind::Constant,
            "oracle" => ModelKind::Oracle,
            other => {
                return Err(Error::Config(format!(
                    "unknown model '{other}' (expected scigan, scigan-single, \
                     scigan-baseline, scigan-supervised, scigan-multitask, \
                     scigan-hierarchical, mlp, mlp_m, constant or oracle)"
                )))
            }
        })
    }
}

// Per-component seeds derived from one master seed: stage index in the low
// bits keeps the streams disjoint across seeds and stages.
fn data_seed(master: u64) -> u64 {
    master.wrapping_mul(3)
}

fn train_seed(master: u64) -> u64 {
    master.wrapping_mul(3).wrapping_add(1)
}

fn search_seed(master: u64) -> u64 {
    master.wrapping_mul(3).wrapping_add(2)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Simulate one dataset bundle per master seed.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let file_features = match &config.data.features_csv {
        Some(path) => Some(load_features(path)?),
        None => None,
    };
    let mut dirs = Vec::new();
    for &master in &config.run.seeds {
        let dir = config.dataset_dir(master);
        create_dir(&dir)?;
        let mut rng = rng_from_seed(data_seed(master));
        let features = match &file_features {
            Some(f) => f.clone(),
            None => synth_features(&mut rng, config.data.n, config.data.feature_dim)?,
        };
        let model = ResponseModel::sample(config.simulation.clone(), features.cols(), &mut rng)?;
        let mut dataset = make_dataset(&features, &model, &mut rng)?;
        if let Some(levels) = config.data.beta_levels {
            dataset = discretize_dosages(&dataset, &model, levels)?;
        }
        save_dataset(&dataset, &dir.join("data.csv"))?;
        let manifest = Manifest::new(
            master,
            dataset.n(),
            features.cols(),
            model,
            config.data.beta_levels,
        );
        manifest.save(&dir.join("manifest.json"))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn load_bundle(config: &RunConfig, master: u64) -> Result<(Dataset, Manifest)> {
    let dir = config.dataset_dir(master);
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let dataset = load_dataset(
        &dir.join("data.csv"),
        Some(manifest.model.num_treatments()),
    )?;
    Ok((dataset, manifest))
}

#[derive(Serialize, Deserialize)]
struct TrainStamp {
    wall_time_s: f64,
}

fn write_stamp(dir: &Path, seconds: f64) -> Result<()> {
    let path = dir.join("train_meta.json");
    let text = serde_json::to_string_pretty(&TrainStamp { wall_time_s: seconds })
        .map_err(|e| Error::contract("write_stamp", e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_stamp(dir: &Path) -> f64 {
    std::fs::read_to_string(dir.join("train_meta.json"))
        .ok()
        .and_then(|text| serde_json::from_str::<TrainStamp>(&text).ok())
        .map_or(0.0, |s| s.wall_time_s)
}

/// Train one model for one master seed; returns the model directory.
pub fn cmd_train(config: &RunConfig, model_name: &str, master: u64) -> Result<PathBuf> {
    let kind = ModelKind::by_name(model_name)?;
    let dir = config.model_dir(model_name, master);
    create_dir(&dir)?;
    let (dataset, _) = load_bundle(config, master)?;
    let started = Instant::now();
    match kind {
        ModelKind::Scigan(variant) => {
            let train = TrainConfig {
                variant,
                ..config.effective_train()
            };
            let out = train_scigan(&dataset, &train, train_seed(master))?;
            out.model.save(&dir)?;
            out.gan_log.save(&dir.join("gan_log.csv"))?;
            let mut text = String::from("iteration,loss\n");
            for (iteration, loss) in &out.inference_log {
                let _ = writeln!(text, "{iteration},{loss}");
            }
            let log_path = dir.join("inference_log.csv");
            std::fs::write(&log_path, text)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        ModelKind::Baseline(variant) => {
            let fit = baseline_fit(&dataset, variant, &config.baseline, train_seed(master))?;
            fit.net.save(&dir)?;
            let mut text = String::from("iteration,val_mse\n");
            for (iteration, mse) in &fit.val_curve {
                let _ = writeln!(text, "{iteration},{mse}");
            }
            let log_path = dir.join("val_curve.csv");
            std::fs::write(&log_path, text)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        }
        ModelKind::Constant => {
            let train = &dataset.split.train;
            let mean =
                train.iter().map(|&i| dataset.y_f[i]).sum::<f64>() / train.len() as f64;
            let model = ConstantModel {
                value: mean,
                num_treatments: dataset.num_treatments,
            };
            let text = serde_json::to_string_pretty(&model)
                .map_err(|e| Error::contract("cmd_train", e.to_string()))?;
            let path = dir.join("model.json");
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        // The oracle is the manifest's response model; nothing to fit.
        ModelKind::Oracle => {}
    }
    write_stamp(&dir, started.elapsed().as_secs_f64())?;
    Ok(dir)
}

fn load_model(config: &RunConfig, model_name: &str, master: u64, manifest: &Manifest) -> Result<Box<dyn DoseResponse>> {
    let dir = config.model_dir(model_name, master);
    Ok(match ModelKind::by_name(model_name)? {
        ModelKind::Scigan(_) => Box::new(SciganModel::load(&dir)?),
        ModelKind::Baseline(_) => Box::new(BaselineNet::load(&dir)?),
        ModelKind::Constant => {
            let path = dir.join("model.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let model: ConstantModel = serde_json::from_str(&text).map_err(|e| {
                Error::parse(path.display().to_string(), e.line(), e.to_string())
            })?;
            Box::new(model)
        }
        ModelKind::Oracle => Box::new(manifest.model.clone()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub model: String,
    pub seed: u64,
    pub kappa: f64,
    pub alpha: f64,
    pub sqrt_mise: f64,
    pub sqrt_dpe: f64,
    pub sqrt_pe: f64,
    pub grid_n: usize,
    /// Always zero in `results.csv` so repeated runs stay byte-identical;
    /// measured durations are reported in `timings.csv` instead.
    pub wall_time_s: f64,
}

impl ResultRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.model,
            self.seed,
            self.kappa,
            self.alpha,
            self.sqrt_mise,
            self.sqrt_dpe,
            self.sqrt_pe,
            self.grid_n,
            self.wall_time_s
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub model: String,
    pub seeds: usize,
    pub sqrt_mise_mean: f64,
    pub sqrt_mise_std: f64,
    pub sqrt_dpe_mean: f64,
    pub sqrt_dpe_std: f64,
    pub sqrt_pe_mean: f64,
    pub sqrt_pe_std: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULT_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
            out.push('\n');
        }
        out
    }

    /// Mean and population standard deviation per `(run_id, model)` cell,
    /// in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: Vec<(String, String)> = Vec::new();
        for row in &self.rows {
            let key = (row.run_id.clone(), row.model.clone());
            if !cells.contains(&key) {
                cells.push(key);
            }
        }
        cells
            .into_iter()
            .map(|(run_id, model)| {
                let group: Vec<&ResultRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.run_id == run_id && r.model == model)
                    .collect();
                let collect = |f: fn(&ResultRow) -> f64| -> Vec<f64> {
                    group.iter().map(|r| f(r)).collect()
                };
                let (mise_mean, mise_std) = mean_std(&collect(|r| r.sqrt_mise));
                let (dpe_mean, dpe_std) = mean_std(&collect(|r| r.sqrt_dpe));
                let (pe_mean, pe_std) = mean_std(&collect(|r| r.sqrt_pe));
                SummaryRow {
                    run_id,
                    model,
                    seeds: group.len(),
                    sqrt_mise_mean: mise_mean,
                    sqrt_mise_std: mise_std,
                    sqrt_dpe_mean: dpe_mean,
                    sqrt_dpe_std: dpe_std,
                    sqrt_pe_mean: pe_mean,
                    sqrt_pe_std: pe_std,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "run_id,model,seeds,sqrt_mise_mean,sqrt_mise_std,sqrt_dpe_mean,sqrt_dpe_std,sqrt_pe_mean,sqrt_pe_std\n",
        );
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.run_id,
                s.model,
                s.seeds,
                s.sqrt_mise_mean,
                s.sqrt_mise_std,
                s.sqrt_dpe_mean,
                s.sqrt_dpe_std,
                s.sqrt_pe_mean,
                s.sqrt_pe_std
            );
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let results = dir.join("results.csv");
        std::fs::write(&results, self.to_csv())
            .map_err(|e| Error::io(results.display().to_string(), e))?;
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, self.summary_csv())
            .map_err(|e| Error::io(summary.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<ResultTable> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let name = path.display().to_string();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == RESULT_HEADER => {}
            _ => return Err(Error::parse(name, 1, "unexpected result header")),
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(Error::parse(name, idx + 1, "expected 10 fields"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::parse(name.clone(), idx + 1, format!("bad number '{s}'")))
            };
            rows.push(ResultRow {
                run_id: fields[0].to_string(),
                model: fields[1].to_string(),
                seed: fields[2]
                    .parse()
                    .map_err(|_| Error::parse(name.clone(), idx + 1, "bad seed"))?,
                kappa: num(fields[3])?,
                alpha: num(fields[4])?,
                sqrt_mise: num(fields[5])?,
                sqrt_dpe: num(fields[6])?,
                sqrt_pe: num(fields[7])?,
                grid_n: fields[8]
                    .parse()
                    .map_err(|_| Error::parse(name.clone(), idx + 1, "bad grid_n"))?,
                wall_time_s: num(fields[9])?,
            });
        }
        Ok(ResultTable { rows })
    }
}

fn test_features(dataset: &Dataset) -> Tensor2 {
    let test = &dataset.split.test;
    let mut out = Tensor2::zeros(test.len(), dataset.x.cols());
    for (r, &i) in test.iter().enumerate() {
        out.row_mut(r).copy_from_slice(dataset.x.row(i));
    }
    out
}

/// Evaluate one trained `(model, seed)` pair against the bundle's oracle.
pub fn evaluate_one(config: &RunConfig, model_name: &str, master: u64) -> Result<ResultRow> {
    let (dataset, manifest) = load_bundle(config, master)?;
    let model = load_model(config, model_name, master, &manifest)?;
    let features = test_features(&dataset);
    let report = evaluate_model(&manifest.model, model.as_ref(), &features, config.run.grid_n)?;
    Ok(ResultRow {
        run_id: config.run.id.clone(),
        model: model_name.to_string(),
        seed: master,
        kappa: manifest.model.config.kappa,
        alpha: manifest.model.config.alpha,
        sqrt_mise: report.sqrt_mise,
        sqrt_dpe: report.sqrt_dpe,
        sqrt_pe: report.sqrt_pe,
        grid_n: report.grid_n,
        wall_time_s: 0.0,
    })
}

/// Evaluate every configured `(model, seed)` pair and write the result
/// table plus measured timings.
pub fn cmd_evaluate(config: &RunConfig) -> Result<ResultTable> {
    config.validate()?;
    let mut table = ResultTable::default();
    let mut timings = String::from("run_id,model,seed,train_s,evaluate_s\n");
    for model_name in &config.run.models {
        for &master in &config.run.seeds {
            let started = Instant::now();
            let row = evaluate_one(config, model_name, master)?;
            let evaluate_s = started.elapsed().as_secs_f64();
            let train_s = read_stamp(&config.model_dir(model_name, master));
            let _ = writeln!(
                timings,
                "{},{},{},{},{}",
                config.run.id, model_name, master, train_s, evaluate_s
            );
            table.rows.push(row);
        }
    }
    let dir = config.output_dir();
    table.save(&dir)?;
    let timing_path = dir.join("timings.csv");
    std::fs::write(&timing_path, timings)
        .map_err(|e| Error::io(timing_path.display().to_string(), e))?;
    Ok(table)
}

/// simulate → train (all models × seeds) → evaluate.
pub fn run_pipeline(config: &RunConfig) -> Result<ResultTable> {
    config.validate()?;
    cmd_simulate(config)?;
    for model_name in &config.run.models {
        for &master in &config.run.seeds {
            cmd_train(config, model_name, master)?;
        }
    }
    cmd_evaluate(config)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Kappa(Vec<f64>),
    Alpha(Vec<f64>),
    BetaLevels(Vec<usize>),
    DosageSamples(Vec<usize>),
}

impl SweepAxis {
    /// Parse `axis=v1,v2,...` with axis one of kappa, alpha, beta_levels,
    /// num_dosage_samples.
    pub fn parse(text: &str) -> Result<SweepAxis> {
        let (name, rest) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected axis=v1,v2,... got '{text}'")))?;
        let floats = || -> Result<Vec<f64>> {
            rest.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad sweep value '{v}'")))
                })
                .collect()
        };
        let ints = || -> Result<Vec<usize>> {
            rest.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad sweep value '{v}'")))
                })
                .collect()
        };
        let axis = match name.trim() {
            "kappa" => SweepAxis::Kappa(floats()?),
            "alpha" => SweepAxis::Alpha(floats()?),
            "beta_levels" => SweepAxis::BetaLevels(ints()?),
            "num_dosage_samples" | "n_w" => SweepAxis::DosageSamples(ints()?),
            other => return Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        };
        if axis.len() == 0 {
            return Err(Error::Config("sweep axis needs at least one value".into()));
        }
        Ok(axis)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Kappa(_) => "kappa",
            SweepAxis::Alpha(_) => "alpha",
            SweepAxis::BetaLevels(_) => "beta_levels",
            SweepAxis::DosageSamples(_) => "num_dosage_samples",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::Kappa(v) | SweepAxis::Alpha(v) => v.len(),
            SweepAxis::BetaLevels(v) | SweepAxis::DosageSamples(v) => v.len(),
        }
    }

    fn value_label(&self, i: usize) -> String {
        match self {
            SweepAxis::Kappa(v) | SweepAxis::Alpha(v) => format!("{}", v[i]),
            SweepAxis::BetaLevels(v) | SweepAxis::DosageSamples(v) => format!("{}", v[i]),
        }
    }

    fn numeric_value(&self, i: usize) -> f64 {
        match self {
            SweepAxis::Kappa(v) | SweepAxis::Alpha(v) => v[i],
            SweepAxis::BetaLevels(v) | SweepAxis::DosageSamples(v) => v[i] as f64,
        }
    }

    /// Derive the configuration for one sweep cell.
    fn cell_config(&self, base: &RunConfig, i: usize) -> RunConfig {
        let mut cell = base.clone();
        let label = format!("{}={}", self.name(), self.value_label(i));
        cell.run.id = label.clone();
        cell.run.output_dir = base.output_dir().join("cells").join(&label);
        match self {
            SweepAxis::Kappa(v) => cell.simulation.kappa = v[i],
            SweepAxis::Alpha(v) => cell.simulation.alpha = v[i],
            SweepAxis::BetaLevels(v) => {
                cell.data.beta_levels = Some(v[i]);
                cell.train.dosage_levels = Some(v[i]);
            }
            SweepAxis::DosageSamples(v) => {
                cell.train.num_dosage_samples = v[i];
                // This axis contrasts the two discriminator architectures.
                cell.run.models = vec!["scigan".into(), "scigan-single".into()];
            }
        }
        cell
    }
}

#[derive(Debug, Clone)]
pub struct FailureRow {
    pub cell: String,
    pub model: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct SweepOutput {
    pub table: ResultTable,
    pub failures: Vec<FailureRow>,
}

/// One full simulate → train → evaluate cycle per axis value per seed.
/// Failed `(model, seed)` cells are recorded and skipped, not fatal.
pub fn cmd_sweep(config: &RunConfig, axis: &SweepAxis) -> Result<SweepOutput> {
    config.validate()?;
    let root = config.output_dir();
    create_dir(&root)?;
    let mut output = SweepOutput::default();
    for i in 0..axis.len() {
        let cell = axis.cell_config(config, i);
        if let Err(e) = cmd_simulate(&cell) {
            for model in &cell.run.models {
                for &seed in &cell.run.seeds {
                    output.failures.push(FailureRow {
                        cell: cell.run.id.clone(),
                        model: model.clone(),
                        seed,
                        error: e.to_string(),
                    });
                }
            }
            continue;
        }
        for model in &cell.run.models {
            for &seed in &cell.run.seeds {
                let outcome = cmd_train(&cell, model, seed)
                    .and_then(|_| evaluate_one(&cell, model, seed));
                match outcome {
                    Ok(row) => output.table.rows.push(row),
                    Err(e) => output.failures.push(FailureRow {
                        cell: cell.run.id.clone(),
                        model: model.clone(),
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }

    let results = root.join("sweep_results.csv");
    std::fs::write(&results, output.table.to_csv())
        .map_err(|e| Error::io(results.display().to_string(), e))?;
    let mut failures = String::from("cell,model,seed,error\n");
    for f in &output.failures {
        let _ = writeln!(
            failures,
            "{},{},{},\"{}\"",
            f.cell,
            f.model,
            f.seed,
            f.error.replace('"', "'")
        );
    }
    let failure_path = root.join("failures.csv");
    std::fs::write(&failure_path, failures)
        .map_err(|e| Error::io(failure_path.display().to_string(), e))?;
    write_plot_files(&root.join("plots"), config, axis, &output.table)?;
    Ok(output)
}

/// Two-column `axis-value  mean-metric` files, one per metric per model.
fn write_plot_files(
    dir: &Path,
    config: &RunConfig,
    axis: &SweepAxis,
    table: &ResultTable,
) -> Result<()> {
    create_dir(dir)?;
    let models: Vec<String> = {
        let mut seen = Vec::new();
        for row in &table.rows {
            if !seen.contains(&row.model) {
                seen.push(row.model.clone());
            }
        }
        if seen.is_empty() {
            config.run.models.clone()
        } else {
            seen
        }
    };
    let metrics: [(&str, fn(&ResultRow) -> f64); 3] = [
        ("sqrt_mise", |r| r.sqrt_mise),
        ("sqrt_dpe", |r| r.sqrt_dpe),
        ("sqrt_pe", |r| r.sqrt_pe),
    ];
    for (metric_name, getter) in metrics {
        for model in &models {
            let mut text = String::new();
            for i in 0..axis.len() {
                let label = format!("{}={}", axis.name(), axis.value_label(i));
                let values: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| r.run_id == label && &r.model == model)
                    .map(getter)
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, _) = mean_std(&values);
                let _ = writeln!(text, "{} {}", axis.numeric_value(i), mean);
            }
            let path = dir.join(format!("{metric_name}_{model}.dat"));
            std::fs::write(&path, text)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

pub const HPO_BATCH_CHOICES: [usize; 3] = [64, 128, 256];
pub const HPO_HIDDEN_CHOICES: [usize; 3] = [32, 64, 128];
pub const HPO_SET_DIM_CHOICES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Serialize)]
pub struct HpoTrial {
    pub trial: usize,
    pub batch_size: usize,
    pub hidden_units: usize,
    pub inv_dim: usize,
    pub eqv_dim: usize,
    pub score: f64,
}

#[derive(Debug)]
pub struct HpoOutcome {
    pub trials: Vec<HpoTrial>,
    pub best: TrainConfig,
    pub best_score: f64,
}

/// Counterfactual-consistency score for a trained model: squared distance
/// between the inference surface and generator-labelled curves, integrated
/// over dosage and averaged over validation samples and treatments. One
/// noise draw per sample keeps the target curves fixed.
fn generator_agreement_score(
    model: &SciganModel,
    dataset: &Dataset,
    rng: &mut crate::random::RunRng,
    grid_n: usize,
) -> Result<f64> {
    let validation = &dataset.split.validation;
    if validation.is_empty() {
        return Err(Error::contract("hpo", "empty validation split"));
    }
    let k = dataset.num_treatments;
    let step = 1.0 / (grid_n - 1) as f64;
    let mut total = 0.0;
    for &i in validation.iter() {
        let z: Vec<f64> = (0..model.config.noise_dim)
            .map(|_| random::uniform01(rng))
            .collect();
        let x = dataset.x.row(i);
        for w in 0..k {
            let mut values = Vec::with_capacity(grid_n);
            for g in 0..grid_n {
                let d = g as f64 * step;
                let label = model.generator_label(
                    x,
                    dataset.w_f[i],
                    dataset.d_f[i],
                    dataset.y_f[i],
                    &z,
                    w,
                    d,
                )?;
                let pred = model.predict(x, w, d)?;
                values.push((label - pred) * (label - pred));
            }
            let interior: f64 = values[1..grid_n - 1].iter().sum();
            total += step * (0.5 * values[0] + interior + 0.5 * values[grid_n - 1]);
        }
    }
    Ok(total / (validation.len() * k) as f64)
}

/// Random search over batch size, hidden width and set-layer dimensions.
pub fn cmd_hpo(config: &RunConfig, budget: usize, master: u64) -> Result<HpoOutcome> {
    config.validate()?;
    if budget == 0 {
        return Err(Error::Config("hpo budget must be at least 1".into()));
    }
    let root = config.output_dir();
    create_dir(&root)?;

    let mut data_rng = rng_from_seed(data_seed(master));
    let features = match &config.data.features_csv {
        Some(path) => load_features(path)?,
        None => synth_features(&mut data_rng, config.data.n, config.data.feature_dim)?,
    };
    let model = ResponseModel::sample(config.simulation.clone(), features.cols(), &mut data_rng)?;
    let mut dataset = make_dataset(&features, &model, &mut data_rng)?;
    if let Some(levels) = config.data.beta_levels {
        dataset = discretize_dosages(&dataset, &model, levels)?;
    }

    let mut rng = rng_from_seed(search_seed(master));
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(f64, TrainConfig)> = None;
    for trial in 0..budget {
        let pick = |rng: &mut crate::random::RunRng, choices: &[usize]| {
            let probs = vec![1.0 / choices.len() as f64; choices.len()];
            choices[random::categorical(rng, &probs)]
        };
        let candidate = TrainConfig {
            batch_size: pick(&mut rng, &HPO_BATCH_CHOICES),
            hidden_units: pick(&mut rng, &HPO_HIDDEN_CHOICES),
            inv_dim: pick(&mut rng, &HPO_SET_DIM_CHOICES),
            eqv_dim: pick(&mut rng, &HPO_SET_DIM_CHOICES),
            ..config.effective_train()
        };
        let out = train_scigan(
            &dataset,
            &candidate,
            train_seed(master).wrapping_add(trial as u64),
        )?;
        let score =
            generator_agreement_score(&out.model, &dataset, &mut rng, config.run.grid_n)?;
        trials.push(HpoTrial {
            trial,
            batch_size: candidate.batch_size,
            hidden_units: candidate.hidden_units,
            inv_dim: candidate.inv_dim,
            eqv_dim: candidate.eqv_dim,
            score,
        });
        let improved = best.as_ref().map_or(true, |(b, _)| score < *b);
        if improved {
            best = Some((score, candidate));
        }
    }

    let mut text = String::from("trial,batch_size,hidden_units,inv_dim,eqv_dim,score\n");
    for t in &trials {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            t.trial, t.batch_size, t.hidden_units, t.inv_dim, t.eqv_dim, t.score
        );
    }
    let trial_path = root.join("hpo_trials.csv");
    std::fs::write(&trial_path, text)
        .map_err(|e| Error::io(trial_path.display().to_string(), e))?;

    let (best_score, best) = best.expect("budget >= 1");
    let best_json = serde_json::to_string_pretty(&best)
        .map_err(|e| Error::contract("cmd_hpo", e.to_string()))?;
    let best_path = root.join("hpo_best.json");
    std::fs::write(&best_path, best_json)
        .map_err(|e| Error::io(best_path.display().to_string(), e))?;
    Ok(HpoOutcome {
        trials,
        best,
        best_score,
    })
}

#[derive(Debug, Clone)]
pub struct OracleCheckRow {
    pub fixture: String,
    pub disc_loss: f64,
    pub kl_gap: f64,
    /// `None` when the densities are not block-products (the factorization
    /// theorem's precondition fails), otherwise its worst deviation.
    pub factorization_deviation: Option<f64>,
    /// Worst loss shortfall of any perturbed discriminator relative to the
    /// optimum; negative values would contradict optimality.
    pub perturbation_margin: f64,
    pub ok: bool,
}

/// Run the exact small-problem checks on every built-in fixture.
pub fn oracle_check(perturbations: usize, seed: u64) -> Result<Vec<OracleCheckRow>> {
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::new();
    for problem in builtin_fixtures()? {
        let disc = optimal_discriminator(&problem);
        let disc_loss = exact_disc_loss(&problem, &disc)?;
        let identity = kl_identity_check(&problem)?;
        let factorization_deviation = match hierarchical_factorization_check(&problem) {
            Ok(check) => Some(check.max_product_deviation),
            Err(Error::Contract { .. }) => None,
            Err(other) => return Err(other),
        };
        let mut margin = f64::INFINITY;
        for _ in 0..perturbations {
            let eps = random::uniform_in(&mut rng, 0.01, 0.5);
            let perturbed = perturb_discriminator(&mut rng, &disc, eps);
            let loss = exact_disc_loss(&problem, &perturbed)?;
            margin = margin.min(loss - disc_loss);
        }
        let ok = identity.gap() < 1e-8 && margin > -1e-10;
        rows.push(OracleCheckRow {
            fixture: problem.name.clone(),
            disc_loss,
            kl_gap: identity.gap(),
            factorization_deviation,
            perturbation_margin: margin,
            ok,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::dosage_grid;

    fn quick_config(dir: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.data.n = 90;
        config.data.feature_dim = 5;
        config.simulation.num_treatments = 2;
        config.train = TrainConfig {
            num_dosage_samples: 3,
            hidden_units: 8,
            inv_dim: 4,
            eqv_dim: 4,
            noise_dim: 4,
            batch_size: 16,
            gan_iterations: 4,
            inference_iterations: 4,
            ..TrainConfig::default()
        };
        config.baseline = BaselineConfig {
            hidden_units: 8,
            batch_size: 16,
            max_iterations: 30,
            eval_every: 10,
            patience: 2,
            ..BaselineConfig::default()
        };
        config.run.models = vec!["constant".into(), "mlp".into()];
        config.run.seeds = vec![1];
        config.run.output_dir = dir.to_path_buf();
        config.run.grid_n = 17;
        config
    }

    #[test]
    fn toml_round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(&dir.path().join("out"));
        config.simulation.kappa = 7.5;
        config.run.models = vec!["scigan".into()];
        let path = dir.path().join("run.toml");
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.simulation.kappa, 7.5);
        assert_eq!(loaded.run.models, vec!["scigan".to_string()]);
        assert_eq!(loaded.train.gan_iterations, 4);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[run]\nseeds = [3, 4]\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.run.seeds, vec![3, 4]);
        assert_eq!(config.data.n, 1000);
        assert_eq!(config.train.gan_iterations, 5000);
        assert_eq!(config.train.inference_iterations, 10_000);
    }

    #[test]
    fn model_names_resolve_or_reject() {
        assert!(matches!(
            ModelKind::by_name("scigan").unwrap(),
            ModelKind::Scigan(v) if v == Variant::full()
        ));
        assert!(matches!(
            ModelKind::by_name("scigan-baseline").unwrap(),
            ModelKind::Scigan(v) if v == Variant::baseline()
        ));
        assert!(ModelKind::by_name("gps").is_err());
    }

    #[test]
    fn simulate_is_byte_identical_for_a_fixed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let a = quick_config(&dir.path().join("a"));
        let b = quick_config(&dir.path().join("b"));
        cmd_simulate(&a).unwrap();
        cmd_simulate(&b).unwrap();
        for file in ["data.csv", "manifest.json"] {
            let left = std::fs::read(a.dataset_dir(1).join(file)).unwrap();
            let right = std::fs::read(b.dataset_dir(1).join(file)).unwrap();
            assert_eq!(left, right, "{file} differs");
        }
    }

    #[test]
    fn unbiased_flag_appears_for_flat_assignments() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.simulation.alpha = 1.0;
        config.simulation.kappa = 0.0;
        cmd_simulate(&config).unwrap();
        let manifest = Manifest::load(&config.dataset_dir(1).join("manifest.json")).unwrap();
        assert!(manifest.unbiased);
    }

    #[test]
    fn pipeline_writes_schema_and_zero_oracle_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.run.models = vec!["oracle".into(), "constant".into()];
        let table = run_pipeline(&config).unwrap();
        assert_eq!(table.rows.len(), 2);

        let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(text.starts_with(RESULT_HEADER));
        let oracle = &table.rows[0];
        assert_eq!(oracle.model, "oracle");
        assert_eq!(oracle.sqrt_mise, 0.0);
        assert!(oracle.sqrt_dpe < 1e-6 && oracle.sqrt_pe < 1e-6);
        let constant = &table.rows[1];
        assert!(constant.sqrt_mise > oracle.sqrt_mise);

        // One seed means zero dispersion in the aggregate.
        for summary in table.summary() {
            assert_eq!(summary.seeds, 1);
            assert_eq!(summary.sqrt_mise_std, 0.0);
        }
        let reloaded = ResultTable::load(&dir.path().join("results.csv")).unwrap();
        assert_eq!(reloaded.rows.len(), 2);
        assert_eq!(reloaded.rows[0].sqrt_mise, table.rows[0].sqrt_mise);
    }

    #[test]
    fn repeated_pipelines_match_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let a = quick_config(&dir.path().join("a"));
        let b = quick_config(&dir.path().join("b"));
        run_pipeline(&a).unwrap();
        run_pipeline(&b).unwrap();
        let left = std::fs::read(dir.path().join("a/results.csv")).unwrap();
        let right = std::fs::read(dir.path().join("b/results.csv")).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn evaluate_without_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let err = cmd_evaluate(&config).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn scigan_training_writes_checkpoint_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.run.models = vec!["scigan".into()];
        cmd_simulate(&config).unwrap();
        let model_dir = cmd_train(&config, "scigan", 1).unwrap();
        for file in ["params.json", "model.json", "gan_log.csv", "inference_log.csv"] {
            assert!(model_dir.join(file).exists(), "{file} missing");
        }
        let row = evaluate_one(&config, "scigan", 1).unwrap();
        assert!(row.sqrt_mise.is_finite());
    }

    #[test]
    fn sweep_covers_axis_times_seeds_and_emits_plots() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.run.seeds = vec![1, 2];
        let axis = SweepAxis::parse("kappa=0,2").unwrap();
        let output = cmd_sweep(&config, &axis).unwrap();
        assert!(output.failures.is_empty(), "{:?}", output.failures);
        // 2 cells x 2 models x 2 seeds.
        assert_eq!(output.table.rows.len(), 8);
        let kappas: Vec<f64> = output.table.rows.iter().map(|r| r.kappa).collect();
        assert!(kappas.contains(&0.0) && kappas.contains(&2.0));

        let plot = std::fs::read_to_string(dir.path().join("plots/sqrt_mise_constant.dat")).unwrap();
        let lines: Vec<&str> = plot.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0 "));
        assert!(lines[1].starts_with("2 "));
        assert!(dir.path().join("sweep_results.csv").exists());
        assert!(dir.path().join("failures.csv").exists());
    }

    #[test]
    fn beta_sweep_snaps_factual_dosages_to_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.run.models = vec!["constant".into()];
        let axis = SweepAxis::parse("beta_levels=5").unwrap();
        cmd_sweep(&config, &axis).unwrap();
        let cell_dir = dir
            .path()
            .join("cells/beta_levels=5")
            .join("dataset/seed1/data.csv");
        let dataset = load_dataset(&cell_dir, None).unwrap();
        let grid = dosage_grid(5).unwrap();
        for &d in &dataset.d_f {
            assert!(
                grid.iter().any(|&g| (g - d).abs() < 1e-12),
                "{d} not on 5-level grid"
            );
        }
    }

    #[test]
    fn dosage_samples_sweep_contrasts_both_discriminators() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        let axis = SweepAxis::parse("n_w=3").unwrap();
        let output = cmd_sweep(&config, &axis).unwrap();
        assert!(output.failures.is_empty(), "{:?}", output.failures);
        let models: Vec<&str> = output.table.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(models, vec!["scigan", "scigan-single"]);
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.run.models = vec!["constant".into()];
        // alpha < 1 is rejected by the simulator, so the first cell fails.
        let axis = SweepAxis::Alpha(vec![0.5, 2.0]);
        let output = cmd_sweep(&config, &axis).unwrap();
        assert_eq!(output.failures.len(), 1);
        assert_eq!(output.failures[0].cell, "alpha=0.5");
        assert_eq!(output.table.rows.len(), 1);
        assert_eq!(output.table.rows[0].run_id, "alpha=2");
    }

    #[test]
    fn hpo_samples_within_ranges_and_logs_each_trial() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.data.n = 60;
        let outcome = cmd_hpo(&config, 3, 1).unwrap();
        assert_eq!(outcome.trials.len(), 3);
        for t in &outcome.trials {
            assert!(HPO_BATCH_CHOICES.contains(&t.batch_size));
            assert!(HPO_HIDDEN_CHOICES.contains(&t.hidden_units));
            assert!(HPO_SET_DIM_CHOICES.contains(&t.inv_dim));
            assert!(HPO_SET_DIM_CHOICES.contains(&t.eqv_dim));
            assert!(t.score.is_finite());
        }
        let best_trial_score = outcome
            .trials
            .iter()
            .map(|t| t.score)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_score, best_trial_score);
        assert!(dir.path().join("hpo_trials.csv").exists());
        assert!(dir.path().join("hpo_best.json").exists());
    }

    #[test]
    fn hpo_budget_one_returns_the_single_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.data.n = 60;
        let outcome = cmd_hpo(&config, 1, 2).unwrap();
        assert_eq!(outcome.trials.len(), 1);
        assert_eq!(outcome.best.batch_size, outcome.trials[0].batch_size);
        assert_eq!(outcome.best.hidden_units, outcome.trials[0].hidden_units);
    }

    #[test]
    fn oracle_check_passes_on_every_builtin_fixture() {
        let rows = oracle_check(50, 7).unwrap();
        assert_eq!(rows.len(), 5);
        for row in &rows {
            assert!(row.ok, "{}: {row:?}", row.fixture);
            assert!(row.perturbation_margin >= 0.0, "{}", row.fixture);
        }
        // The correlated fixture is the one without block-product densities.
        let correlated = rows.iter().find(|r| r.fixture.contains("correlated")).unwrap();
        assert!(correlated.factorization_deviation.is_none());
        let coupled = rows.iter().find(|r| r.fixture.contains("coupled")).unwrap();
        assert!(coupled.factorization_deviation.unwrap() > 1e-3);
    }

    #[test]
    fn output_root_env_anchors_relative_dirs() {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(OUTPUT_ROOT_ENV, dir.path());
        let mut config = RunConfig::default();
        config.run.output_dir = PathBuf::from("nested/run");
        let resolved = config.output_dir();
        std::env::remove_var(OUTPUT_ROOT_ENV);
        assert_eq!(resolved, dir.path().join("nested/run"));
        config.run.output_dir = dir.path().join("absolute");
        assert_eq!(config.output_dir(), dir.path().join("absolute"));
    }
}
