//! Adversarial training loop and the distilled inference stage.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gan::losses::{
    combine_hierarchical, gather_masked_sum, masked_bce, masked_bce_gated, mse_to,
};
use crate::gan::nets::{Discriminator, DiscProbVars, GeneratorNet, InferenceNet, Variant};
use crate::metrics::DoseResponse;
use crate::nn::{Adam, ParamStore};
use crate::random::{self, rng_from_seed, RunRng};
use crate::simulate::{dosage_grid, Dataset};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Alternatives per treatment's dosage set.
    pub num_dosage_samples: usize,
    pub hidden_units: usize,
    pub inv_dim: usize,
    pub eqv_dim: usize,
    pub noise_dim: usize,
    /// Weight of the factual reconstruction term in the generator loss.
    pub lambda_supervised: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gan_iterations: usize,
    pub inference_iterations: usize,
    pub disc_steps: usize,
    pub gen_steps: usize,
    pub variant: Variant,
    /// Restrict sampled dosages to an even grid with this many levels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dosage_levels: Option<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_dosage_samples: 5,
            hidden_units: 64,
            inv_dim: 16,
            eqv_dim: 16,
            noise_dim: 16,
            lambda_supervised: 1.0,
            learning_rate: 1e-3,
            batch_size: 128,
            gan_iterations: 5000,
            inference_iterations: 10000,
            disc_steps: 1,
            gen_steps: 1,
            variant: Variant::full(),
            dosage_levels: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_dosage_samples < 2 {
            return Err(Error::contract("TrainConfig", "need at least 2 dosage samples"));
        }
        if self.hidden_units == 0 || self.inv_dim == 0 || self.eqv_dim == 0 {
            return Err(Error::contract("TrainConfig", "layer widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("TrainConfig", "batch_size must be positive"));
        }
        if self.disc_steps == 0 || self.gen_steps == 0 {
            return Err(Error::contract("TrainConfig", "need at least one step per side"));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_supervised >= 0.0) {
            return Err(Error::contract("TrainConfig", "bad learning rate or lambda"));
        }
        if self.log_every == 0 {
            return Err(Error::contract("TrainConfig", "log_every must be positive"));
        }
        if let Some(levels) = self.dosage_levels {
            if levels < 2 {
                return Err(Error::contract("TrainConfig", "need at least 2 dosage levels"));
            }
        }
        Ok(())
    }
}

/// Affine map to zero-mean unit-variance outcome space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Standardizer {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Standardizer {
            mean,
            sd: if sd < 1e-12 { 1.0 } else { sd },
        }
    }

    pub fn transform(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub supervised: f64,
    pub treatment_loss: f64,
    pub dosage_loss_mean: f64,
    pub generator_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,supervised,treatment_loss,dosage_loss_mean,generator_loss\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration,
                row.supervised,
                row.treatment_loss,
                row.dosage_loss_mean,
                row.generator_loss
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// A trained model: generator (kept for pseudo-labelling), inference
/// network (the deliverable surface), and the outcome standardizer.
pub struct SciganModel {
    pub store: ParamStore,
    pub generator: GeneratorNet,
    pub inference: InferenceNet,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
    pub num_treatments: usize,
    pub feature_dim: usize,
}

impl DoseResponse for SciganModel {
    fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    fn predict(&self, x: &[f64], w: usize, d: f64) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::dimension(
                "SciganModel::predict",
                format!("x has {} features, expected {}", x.len(), self.feature_dim),
            ));
        }
        let features = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        let latent = self.inference.0.latent_plain(&self.store, &features)?;
        let dosage = Tensor2::from_vec(1, 1, vec![d])?;
        let out = self.inference.0.head_plain(&self.store, &latent, w, &dosage)?;
        Ok(self.standardizer.inverse(out.get(0, 0)))
    }
}

impl SciganModel {
    /// Generator as pseudo-oracle: outcome of `(w_query, d_query)` given one
    /// sample's factual context and a noise draw.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_label(
        &self,
        x: &[f64],
        w_f: usize,
        d_f: f64,
        y_f: f64,
        z: &[f64],
        w_query: usize,
        d_query: f64,
    ) -> Result<f64> {
        let context = generator_context_row(
            x,
            w_f,
            d_f,
            self.standardizer.transform(y_f),
            z,
            self.num_treatments,
        )?;
        let latent = self.generator.latent_plain(&self.store, &context)?;
        let dosage = Tensor2::from_vec(1, 1, vec![d_query])?;
        let out = self
            .generator
            .predict_plain(&self.store, &latent, w_query, &dosage)?;
        Ok(self.standardizer.inverse(out.get(0, 0)))
    }

    fn named_params(&self) -> Vec<(String, crate::nn::ParamId)> {
        let mut names = self.generator.named_params();
        names.extend(self.inference.named_params());
        names
    }

    /// Persist parameters plus a JSON sidecar describing shapes and scaling.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        checkpoint::save(&dir.join("params.json"), &self.store, &self.named_params())?;
        let meta = ModelMeta {
            config: self.config.clone(),
            standardizer: self.standardizer,
            num_treatments: self.num_treatments,
            feature_dim: self.feature_dim,
        };
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::contract("SciganModel::save", e.to_string()))?;
        let path = dir.join("model.json");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<SciganModel> {
        let meta_path = dir.join("model.json");
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: ModelMeta = serde_json::from_str(&text)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e.line(), e.to_string()))?;
        meta.config.validate()?;
        // Rebuild the architecture (seed irrelevant: weights are overwritten).
        let mut rng = rng_from_seed(0);
        let mut store = ParamStore::new();
        let context_dim =
            meta.feature_dim + meta.num_treatments + 2 + meta.config.noise_dim;
        let generator = GeneratorNet::new(
            &mut store,
            &mut rng,
            context_dim,
            meta.config.hidden_units,
            meta.num_treatments,
            meta.config.variant.multitask,
        );
        let inference = InferenceNet::new(
            &mut store,
            &mut rng,
            meta.feature_dim,
            meta.config.hidden_units,
            meta.num_treatments,
        );
        let model = SciganModel {
            store,
            generator,
            inference,
            standardizer: meta.standardizer,
            config: meta.config,
            num_treatments: meta.num_treatments,
            feature_dim: meta.feature_dim,
        };
        let mut store = model.store;
        checkpoint::restore(&dir.join("params.json"), &mut store, &{
            let mut names = model.generator.named_params();
            names.extend(model.inference.named_params());
            names
        })?;
        Ok(SciganModel { store, ..model })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TrainConfig,
    standardizer: Standardizer,
    num_treatments: usize,
    feature_dim: usize,
}

pub struct TrainOutput {
    pub model: SciganModel,
    pub gan_log: TrainingLog,
    /// `(iteration, loss)` rows from the distillation stage.
    pub inference_log: Vec<(usize, f64)>,
}

fn generator_context_row(
    x: &[f64],
    w_f: usize,
    d_f: f64,
    y_std: f64,
    z: &[f64],
    num_treatments: usize,
) -> Result<Tensor2> {
    let mut row = Vec::with_capacity(x.len() + num_treatments + 2 + z.len());
    row.extend_from_slice(x);
    for w in 0..num_treatments {
        row.push(if w == w_f { 1.0 } else { 0.0 });
    }
    row.push(d_f);
    row.push(y_std);
    row.extend_from_slice(z);
    Tensor2::from_vec(1, row.len(), row)
}

/// One minibatch's sampled dosage sets plus every mask derived from where
/// the factual pair landed.
struct BatchSets {
    /// `[treatment][slot]`: dosage column, `batch x 1`.
    dosages: Vec<Vec<Tensor2>>,
    /// `[treatment][slot]`: 1 where this is the sample's factual slot.
    factual_mask: Vec<Vec<Tensor2>>,
    /// `[treatment]`: 1 where the sample's factual treatment is this one.
    gates: Vec<Tensor2>,
    /// `batch x k` one-hot of factual treatments.
    treatment_onehot: Tensor2,
    /// `batch x (k * n)` one-hot of factual positions, treatment-major.
    position_onehot: Tensor2,
}

/// Draw per-treatment dosage alternatives for a batch. The factual dosage is
/// inserted at a random slot of the factual treatment's set so position
/// carries no signal; every other value is drawn fresh (uniform, or from the
/// grid without replacement when `grid` is given and large enough).
fn build_batch_sets(
    rng: &mut RunRng,
    w_f: &[usize],
    d_f: &[f64],
    num_treatments: usize,
    set_size: usize,
    grid: Option<&[f64]>,
) -> BatchSets {
    let batch = w_f.len();
    let mut dosages = vec![vec![Tensor2::zeros(batch, 1); set_size]; num_treatments];
    let mut factual_mask = vec![vec![Tensor2::zeros(batch, 1); set_size]; num_treatments];
    let mut gates = vec![Tensor2::zeros(batch, 1); num_treatments];
    let mut treatment_onehot = Tensor2::zeros(batch, num_treatments);
    let mut position_onehot = Tensor2::zeros(batch, num_treatments * set_size);

    for i in 0..batch {
        let factual_slot = rng.gen_range(0..set_size);
        let w_fi = w_f[i];
        treatment_onehot.set(i, w_fi, 1.0);
        gates[w_fi].set(i, 0, 1.0);
        factual_mask[w_fi][factual_slot].set(i, 0, 1.0);
        position_onehot.set(i, w_fi * set_size + factual_slot, 1.0);
        for w in 0..num_treatments {
            let skip_slot = if w == w_fi { Some(factual_slot) } else { None };
            let draws = draw_dosages(rng, set_size, skip_slot, d_f[i], grid);
            for (s, &d) in draws.iter().enumerate() {
                dosages[w][s].set(i, 0, d);
            }
        }
    }
    BatchSets {
        dosages,
        factual_mask,
        gates,
        treatment_onehot,
        position_onehot,
    }
}

/// Values for one treatment's set: `skip_slot` receives the factual dosage.
fn draw_dosages(
    rng: &mut RunRng,
    set_size: usize,
    skip_slot: Option<usize>,
    d_f: f64,
    grid: Option<&[f64]>,
) -> Vec<f64> {
    let needed = set_size - usize::from(skip_slot.is_some());
    let values: Vec<f64> = match grid {
        None => (0..needed).map(|_| random::uniform01(rng)).collect(),
        Some(grid) => {
            // Prefer distinct grid levels, excluding the factual one when it
            // occupies a slot already; fall back to replacement when the
            // grid is too small.
            let factual_idx = skip_slot.map(|_| nearest_grid_index(d_f, grid));
            let pool: Vec<usize> = (0..grid.len())
                .filter(|&g| Some(g) != factual_idx)
                .collect();
            if pool.len() >= needed {
                random::sample_distinct(rng, pool.len(), needed)
                    .into_iter()
                    .map(|p| grid[pool[p]])
                    .collect()
            } else {
                (0..needed)
                    .map(|_| grid[rng.gen_range(0..grid.len())])
                    .collect()
            }
        }
    };
    let mut out = Vec::with_capacity(set_size);
    let mut next = values.into_iter();
    for s in 0..set_size {
        if Some(s) == skip_slot {
            out.push(d_f);
        } else {
            out.push(next.next().expect("enough draws"));
        }
    }
    out
}

fn nearest_grid_index(d: f64, grid: &[f64]) -> usize {
    let step = grid[1] - grid[0];
    ((d / step).round() as usize).min(grid.len() - 1)
}

fn noise_matrix(rng: &mut RunRng, rows: usize, cols: usize) -> Tensor2 {
    let mut z = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            z.set(r, c, random::uniform01(rng));
        }
    }
    z
}

fn gather_rows(x: &Tensor2, indices: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(indices.len(), x.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

struct Batch {
    features: Tensor2,
    w_f: Vec<usize>,
    d_f: Vec<f64>,
    /// Standardized factual outcomes as a column.
    y_std: Tensor2,
    context: Tensor2,
}

fn sample_batch(
    rng: &mut RunRng,
    dataset: &Dataset,
    standardizer: &Standardizer,
    batch_size: usize,
    noise_dim: usize,
) -> Batch {
    let train = &dataset.split.train;
    let picks = random::sample_distinct(rng, train.len(), batch_size.min(train.len()));
    let indices: Vec<usize> = picks.into_iter().map(|p| train[p]).collect();
    let features = gather_rows(&dataset.x, &indices);
    let w_f: Vec<usize> = indices.iter().map(|&i| dataset.w_f[i]).collect();
    let d_f: Vec<f64> = indices.iter().map(|&i| dataset.d_f[i]).collect();
    let y_std_values: Vec<f64> = indices
        .iter()
        .map(|&i| standardizer.transform(dataset.y_f[i]))
        .collect();
    let y_std = Tensor2::from_vec(indices.len(), 1, y_std_values).expect("column");
    let z = noise_matrix(rng, indices.len(), noise_dim);
    let k = dataset.num_treatments;
    let batch = indices.len();
    let mut context = Tensor2::zeros(batch, features.cols() + k + 2 + noise_dim);
    for r in 0..batch {
        let row = context.row_mut(r);
        let p = features.cols();
        row[..p].copy_from_slice(features.row(r));
        row[p + w_f[r]] = 1.0;
        row[p + k] = d_f[r];
        row[p + k + 1] = y_std.get(r, 0);
        row[p + k + 2..].copy_from_slice(z.row(r));
    }
    Batch {
        features,
        w_f,
        d_f,
        y_std,
        context,
    }
}

/// Generator outputs for every `(treatment, slot)`, plus the blended sets
/// where the factual slot carries the observed outcome.
fn generator_sets_plain(
    store: &ParamStore,
    generator: &GeneratorNet,
    batch: &Batch,
    sets: &BatchSets,
) -> Result<Vec<Vec<Tensor2>>> {
    let latent = generator.latent_plain(store, &batch.context)?;
    let k = sets.dosages.len();
    let mut elements = Vec::with_capacity(k);
    for w in 0..k {
        let mut per_slot = Vec::with_capacity(sets.dosages[w].len());
        for (dosage, mask) in sets.dosages[w].iter().zip(&sets.factual_mask[w]) {
            let yhat = generator.predict_plain(store, &latent, w, dosage)?;
            let mut blended = Tensor2::zeros(yhat.rows(), 2);
            for r in 0..yhat.rows() {
                let m = mask.get(r, 0);
                let y = (1.0 - m) * yhat.get(r, 0) + m * batch.y_std.get(r, 0);
                blended.set(r, 0, dosage.get(r, 0));
                blended.set(r, 1, y);
            }
            per_slot.push(blended);
        }
        elements.push(per_slot);
    }
    Ok(elements)
}

struct GeneratorForward {
    /// `[treatment][slot]` set elements `(dosage, blended outcome)`.
    elements: Vec<Vec<Var>>,
    /// Raw predictions before blending, for the reconstruction term.
    predictions: Vec<Vec<Var>>,
}

fn generator_sets_tape(
    tape: &mut Tape,
    store: &ParamStore,
    generator: &GeneratorNet,
    batch: &Batch,
    sets: &BatchSets,
) -> Result<GeneratorForward> {
    let context = tape.constant(batch.context.clone());
    let latent = generator.latent_tape(tape, store, context)?;
    let k = sets.dosages.len();
    let mut elements = Vec::with_capacity(k);
    let mut predictions = Vec::with_capacity(k);
    for w in 0..k {
        let mut per_slot = Vec::new();
        let mut preds = Vec::new();
        for (dosage, mask) in sets.dosages[w].iter().zip(&sets.factual_mask[w]) {
            let d_var = tape.constant(dosage.clone());
            let yhat = generator.predict_tape(tape, store, latent, w, d_var)?;
            let keep = tape.constant(mask.map(|m| 1.0 - m));
            let observed = {
                let mut t = Tensor2::zeros(mask.rows(), 1);
                for r in 0..mask.rows() {
                    t.set(r, 0, mask.get(r, 0) * batch.y_std.get(r, 0));
                }
                tape.constant(t)
            };
            let kept = tape.mul(keep, yhat)?;
            let blended = tape.add(kept, observed)?;
            let element = tape.concat_cols(&[d_var, blended])?;
            per_slot.push(element);
            preds.push(yhat);
        }
        elements.push(per_slot);
        predictions.push(preds);
    }
    Ok(GeneratorForward {
        elements,
        predictions,
    })
}

/// Discriminator loss on one batch: treatment-level plus gated dosage-level
/// terms in the hierarchical architecture, or one joint term. Returns the
/// loss variable and `(treatment_loss, mean_dosage_loss)` for logging.
fn discriminator_loss(
    tape: &mut Tape,
    probs: &DiscProbVars,
    sets: &BatchSets,
) -> Result<(Var, f64, f64)> {
    match probs {
        DiscProbVars::Hierarchical { p_w, p_d } => {
            let l_w = masked_bce(tape, *p_w, &sets.treatment_onehot)?;
            let mut total = l_w;
            let mut dosage_sum = 0.0;
            let mut dosage_terms = 0;
            for (w, &probs_w) in p_d.iter().enumerate() {
                let mask = columns_to_matrix(&sets.factual_mask[w])?;
                if let Some(l_d) =
                    masked_bce_gated(tape, probs_w, &mask, &sets.gates[w])?
                {
                    total = tape.add(total, l_d)?;
                    dosage_sum += tape.scalar(l_d)?;
                    dosage_terms += 1;
                }
            }
            let mean_dosage = if dosage_terms > 0 {
                dosage_sum / dosage_terms as f64
            } else {
                0.0
            };
            Ok((total, tape.scalar(l_w)?, mean_dosage))
        }
        DiscProbVars::Single(p) => {
            let loss = masked_bce(tape, *p, &sets.position_onehot)?;
            Ok((loss, tape.scalar(loss)?, 0.0))
        }
    }
}

fn columns_to_matrix(columns: &[Tensor2]) -> Result<Tensor2> {
    let rows = columns[0].rows();
    let mut out = Tensor2::zeros(rows, columns.len());
    for (c, col) in columns.iter().enumerate() {
        for r in 0..rows {
            out.set(r, c, col.get(r, 0));
        }
    }
    Ok(out)
}

pub fn train_scigan(dataset: &Dataset, config: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.split.train.is_empty() {
        return Err(Error::contract("train_scigan", "empty training split"));
    }
    let k = dataset.num_treatments;
    let p = dataset.feature_dim();
    let n = config.num_dosage_samples;
    let grid = match config.dosage_levels {
        Some(levels) => Some(dosage_grid(levels)?),
        None => None,
    };

    let mut rng = rng_from_seed(seed);
    let train_y: Vec<f64> = dataset
        .split
        .train
        .iter()
        .map(|&i| dataset.y_f[i])
        .collect();
    let standardizer = Standardizer::fit(&train_y);

    let mut store = ParamStore::new();
    let context_dim = p + k + 2 + config.noise_dim;
    let generator = GeneratorNet::new(
        &mut store,
        &mut rng,
        context_dim,
        config.hidden_units,
        k,
        config.variant.multitask,
    );
    let discriminator = Discriminator::new(
        &mut store,
        &mut rng,
        p,
        k,
        n,
        config.inv_dim,
        config.eqv_dim,
        config.hidden_units,
        config.variant,
    );
    let inference = InferenceNet::new(&mut store, &mut rng, p, config.hidden_units, k);

    let mut adam_disc = Adam::new(&store, discriminator.param_ids(), config.learning_rate);
    let mut adam_gen = Adam::new(&store, generator.param_ids(), config.learning_rate);
    let mut adam_inf = Adam::new(&store, inference.param_ids(), config.learning_rate);

    let mut gan_log = TrainingLog::default();
    for iteration in 0..config.gan_iterations {
        let mut treatment_loss = 0.0;
        let mut dosage_loss = 0.0;
        for _ in 0..config.disc_steps {
            let batch = sample_batch(&mut rng, dataset, &standardizer, config.batch_size, config.noise_dim);
            let sets = build_batch_sets(&mut rng, &batch.w_f, &batch.d_f, k, n, grid.as_deref());
            // Generator outputs enter the discriminator update as data.
            let elements = generator_sets_plain(&store, &generator, &batch, &sets)?;
            let mut tape = Tape::new();
            let x_var = tape.constant(batch.features.clone());
            let element_vars: Vec<Vec<Var>> = elements
                .iter()
                .map(|set| set.iter().map(|el| tape.constant(el.clone())).collect())
                .collect();
            let probs = discriminator.forward_tape(&mut tape, &store, x_var, &element_vars)?;
            let (loss, l_w, l_d) = discriminator_loss(&mut tape, &probs, &sets)?;
            treatment_loss = l_w;
            dosage_loss = l_d;
            let loss_value = tape.scalar(loss)?;
            if !loss_value.is_finite() {
                return Err(Error::TrainingDivergence {
                    iteration,
                    details: format!("discriminator loss became {loss_value}"),
                });
            }
            let grads = tape.backward(loss)?;
            adam_disc.step(&mut store, &grads).map_err(|e| at_iteration(e, iteration))?;
        }

        let mut supervised = 0.0;
        let mut generator_loss = 0.0;
        for _ in 0..config.gen_steps {
            let batch = sample_batch(&mut rng, dataset, &standardizer, config.batch_size, config.noise_dim);
            let sets = build_batch_sets(&mut rng, &batch.w_f, &batch.d_f, k, n, grid.as_deref());
            let mut tape = Tape::new();
            let forward = generator_sets_tape(&mut tape, &store, &generator, &batch, &sets)?;
            let x_var = tape.constant(batch.features.clone());
            let probs = discriminator.forward_tape(&mut tape, &store, x_var, &forward.elements)?;
            let joint = match &probs {
                DiscProbVars::Hierarchical { p_w, p_d } => {
                    combine_hierarchical(&mut tape, *p_w, p_d)?
                }
                DiscProbVars::Single(p) => *p,
            };
            // Fooling the discriminator means pushing its loss up, so the
            // generator descends the negated classification loss.
            let adv = masked_bce(&mut tape, joint, &sets.position_onehot)?;
            let mut loss = tape.scale(adv, -1.0);

            let flat_preds: Vec<Var> = forward.predictions.iter().flatten().copied().collect();
            let flat_masks: Vec<Tensor2> = sets
                .factual_mask
                .iter()
                .flatten()
                .cloned()
                .collect();
            let yhat_factual = gather_masked_sum(&mut tape, &flat_preds, &flat_masks)?;
            let l_s = mse_to(&mut tape, yhat_factual, &batch.y_std)?;
            supervised = tape.scalar(l_s)?;
            if config.variant.supervised {
                let weighted = tape.scale(l_s, config.lambda_supervised);
                loss = tape.add(loss, weighted)?;
            }
            generator_loss = tape.scalar(loss)?;
            if !generator_loss.is_finite() {
                return Err(Error::TrainingDivergence {
                    iteration,
                    details: format!("generator loss became {generator_loss}"),
                });
            }
            let grads = tape.backward(loss)?;
            adam_gen.step(&mut store, &grads).map_err(|e| at_iteration(e, iteration))?;
        }

        if iteration % config.log_every == 0 {
            gan_log.rows.push(LogRow {
                iteration,
                supervised,
                treatment_loss,
                dosage_loss_mean: dosage_loss,
                generator_loss,
            });
        }
    }

    // Distillation: regress the inference surface onto generator labels at
    // fresh dosage draws, keeping the observed outcome at factual slots.
    let mut inference_log = Vec::new();
    for iteration in 0..config.inference_iterations {
        let batch = sample_batch(&mut rng, dataset, &standardizer, config.batch_size, config.noise_dim);
        let sets = build_batch_sets(&mut rng, &batch.w_f, &batch.d_f, k, n, grid.as_deref());
        let latent = generator.latent_plain(&store, &batch.context)?;

        let mut tape = Tape::new();
        let x_var = tape.constant(batch.features.clone());
        let latent_inf = inference.0.latent_tape(&mut tape, &store, x_var)?;
        let mut squared: Vec<Var> = Vec::with_capacity(k * n);
        for w in 0..k {
            for (dosage, mask) in sets.dosages[w].iter().zip(&sets.factual_mask[w]) {
                let label = generator.predict_plain(&store, &latent, w, dosage)?;
                let mut target = Tensor2::zeros(label.rows(), 1);
                for r in 0..label.rows() {
                    let m = mask.get(r, 0);
                    target.set(r, 0, (1.0 - m) * label.get(r, 0) + m * batch.y_std.get(r, 0));
                }
                let d_var = tape.constant(dosage.clone());
                let pred = inference.0.head_tape(&mut tape, &store, latent_inf, w, d_var)?;
                let target_var = tape.constant(target);
                let diff = tape.sub(pred, target_var)?;
                squared.push(tape.square(diff));
            }
        }
        let per_sample = tape.sum_elements(&squared)?;
        let loss = tape.mean_all(per_sample);
        let loss_value = tape.scalar(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::TrainingDivergence {
                iteration,
                details: format!("inference loss became {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        adam_inf.step(&mut store, &grads).map_err(|e| at_iteration(e, iteration))?;
        if iteration % config.log_every == 0 {
            inference_log.push((iteration, loss_value));
        }
    }

    Ok(TrainOutput {
        model: SciganModel {
            store,
            generator,
            inference,
            standardizer,
            config: config.clone(),
            num_treatments: k,
            feature_dim: p,
        },
        gan_log,
        inference_log,
    })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::TrainingDivergence { details, .. } => Error::TrainingDivergence { iteration, details },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{make_dataset, synth_features, ResponseModel, SimulationConfig};

    fn tiny_dataset(seed: u64, n: usize) -> (ResponseModel, Dataset) {
        let mut rng = rng_from_seed(seed);
        let config = SimulationConfig {
            num_treatments: 2,
            ..SimulationConfig::default()
        };
        let model = ResponseModel::sample(config, 4, &mut rng).unwrap();
        let features = synth_features(&mut rng, n, 4).unwrap();
        let dataset = make_dataset(&features, &model, &mut rng).unwrap();
        (model, dataset)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            num_dosage_samples: 3,
            hidden_units: 8,
            inv_dim: 4,
            eqv_dim: 4,
            noise_dim: 4,
            batch_size: 16,
            gan_iterations: 12,
            inference_iterations: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn standardizer_round_trips_and_guards_constant_data() {
        let s = Standardizer::fit(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.mean - 2.5).abs() < 1e-12);
        let y = 3.7;
        assert!((s.inverse(s.transform(y)) - y).abs() < 1e-12);
        let flat = Standardizer::fit(&[5.0; 10]);
        assert_eq!(flat.sd, 1.0);
        assert_eq!(flat.transform(5.0), 0.0);
    }

    #[test]
    fn batch_sets_place_the_factual_dosage_exactly_once() {
        let mut rng = rng_from_seed(120);
        let w_f = vec![0, 1, 1, 0, 2];
        let d_f = vec![0.11, 0.22, 0.33, 0.44, 0.55];
        let sets = build_batch_sets(&mut rng, &w_f, &d_f, 3, 4, None);
        for i in 0..w_f.len() {
            let mut factual_slots = 0;
            for w in 0..3 {
                for s in 0..4 {
                    let m = sets.factual_mask[w][s].get(i, 0);
                    if m == 1.0 {
                        factual_slots += 1;
                        assert_eq!(w, w_f[i]);
                        assert_eq!(sets.dosages[w][s].get(i, 0), d_f[i]);
                    }
                }
            }
            assert_eq!(factual_slots, 1);
            assert_eq!(sets.treatment_onehot.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(sets.position_onehot.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn discrete_sets_stay_on_the_grid_and_avoid_duplicates() {
        let mut rng = rng_from_seed(121);
        let grid = dosage_grid(9).unwrap();
        let w_f = vec![0, 0, 1];
        let d_f = vec![0.25, 0.5, 0.875];
        let sets = build_batch_sets(&mut rng, &w_f, &d_f, 2, 5, Some(&grid));
        for i in 0..w_f.len() {
            for w in 0..2 {
                let values: Vec<f64> = (0..5).map(|s| sets.dosages[w][s].get(i, 0)).collect();
                for &v in &values {
                    assert!(grid.iter().any(|&g| (g - v).abs() < 1e-12), "{v} off grid");
                }
                let mut dedup = values.clone();
                dedup.sort_by(f64::total_cmp);
                dedup.dedup();
                assert_eq!(dedup.len(), 5, "duplicate dosages in {values:?}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let (_, dataset) = tiny_dataset(122, 60);
        let config = tiny_config();
        let a = train_scigan(&dataset, &config, 7).unwrap();
        let b = train_scigan(&dataset, &config, 7).unwrap();
        let x = [0.5, 0.5, 0.5, 0.5];
        for w in 0..2 {
            for d in [0.0, 0.3, 0.9] {
                assert_eq!(
                    a.model.predict(&x, w, d).unwrap(),
                    b.model.predict(&x, w, d).unwrap()
                );
            }
        }
        assert_eq!(a.gan_log.rows.len(), b.gan_log.rows.len());
        for (ra, rb) in a.gan_log.rows.iter().zip(&b.gan_log.rows) {
            assert_eq!(ra.generator_loss, rb.generator_loss);
        }
    }

    #[test]
    fn different_seeds_give_different_models() {
        let (_, dataset) = tiny_dataset(123, 60);
        let config = tiny_config();
        let a = train_scigan(&dataset, &config, 1).unwrap();
        let b = train_scigan(&dataset, &config, 2).unwrap();
        let x = [0.5, 0.5, 0.5, 0.5];
        assert_ne!(
            a.model.predict(&x, 0, 0.5).unwrap(),
            b.model.predict(&x, 0, 0.5).unwrap()
        );
    }

    #[test]
    fn every_variant_trains_without_error() {
        let (_, dataset) = tiny_dataset(124, 50);
        for variant in [
            Variant::full(),
            Variant::baseline(),
            Variant::plus_supervised(),
            Variant::plus_multitask(),
            Variant::plus_hierarchical(),
            Variant::single_disc(),
        ] {
            let config = TrainConfig {
                variant,
                gan_iterations: 4,
                inference_iterations: 4,
                ..tiny_config()
            };
            let out = train_scigan(&dataset, &config, 9).unwrap();
            let x = [0.5, 0.5, 0.5, 0.5];
            let y = out.model.predict(&x, 0, 0.5).unwrap();
            assert!(y.is_finite(), "{variant:?}");
        }
    }

    #[test]
    fn log_rows_follow_the_logging_stride() {
        let (_, dataset) = tiny_dataset(125, 50);
        let config = TrainConfig {
            gan_iterations: 10,
            inference_iterations: 10,
            log_every: 3,
            ..tiny_config()
        };
        let out = train_scigan(&dataset, &config, 3).unwrap();
        let iterations: Vec<usize> = out.gan_log.rows.iter().map(|r| r.iteration).collect();
        assert_eq!(iterations, vec![0, 3, 6, 9]);
        assert_eq!(out.inference_log.len(), 4);
    }

    #[test]
    fn model_save_load_round_trips_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let (_, dataset) = tiny_dataset(126, 50);
        let out = train_scigan(&dataset, &tiny_config(), 5).unwrap();
        out.model.save(dir.path()).unwrap();
        let loaded = SciganModel::load(dir.path()).unwrap();
        let x = [0.25, 0.5, 0.75, 0.1];
        for w in 0..2 {
            for d in [0.0, 0.5, 1.0] {
                assert_eq!(
                    out.model.predict(&x, w, d).unwrap(),
                    loaded.predict(&x, w, d).unwrap(),
                );
            }
        }
        // Generator labelling must survive the round trip as well.
        let z = [0.3; 4];
        let a = out
            .model
            .generator_label(&x, 1, 0.4, 2.0, &z, 0, 0.6)
            .unwrap();
        let b = loaded.generator_label(&x, 1, 0.4, 2.0, &z, 0, 0.6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_reconstructs_factual_outcomes_on_a_tiny_problem() {
        // With enough supervised iterations on a small dataset, the factual
        // reconstruction error should drop well below the initial level.
        let (_, dataset) = tiny_dataset(127, 80);
        let config = TrainConfig {
            gan_iterations: 250,
            inference_iterations: 10,
            ..tiny_config()
        };
        let out = train_scigan(&dataset, &config, 11).unwrap();
        let first: f64 = out.gan_log.rows[..10]
            .iter()
            .map(|r| r.supervised)
            .sum::<f64>()
            / 10.0;
        let last: f64 = out.gan_log.rows[out.gan_log.rows.len() - 10..]
            .iter()
            .map(|r| r.supervised)
            .sum::<f64>()
            / 10.0;
        assert!(
            last < 0.5 * first,
            "supervised loss did not improve: {first} -> {last}"
        );
    }

    #[test]
    fn oversized_batch_is_clamped_to_the_training_split() {
        let (_, dataset) = tiny_dataset(128, 20);
        let config = TrainConfig {
            batch_size: 1000,
            gan_iterations: 2,
            inference_iterations: 2,
            ..tiny_config()
        };
        assert!(train_scigan(&dataset, &config, 1).is_ok());
    }
}
