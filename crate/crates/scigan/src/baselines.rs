//! Supervised reference models trained on factual pairs only: a flat MLP
//! over `(x, onehot(w), d)` and a multitask variant sharing the inference
//! network's trunk-and-heads shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gan::nets::TrunkHeads;
use crate::gan::{Standardizer};
use crate::metrics::DoseResponse;
use crate::nn::{Activation, Adam, DenseLayer, ParamId, ParamStore};
use crate::random::{self, rng_from_seed};
use crate::simulate::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    Mlp,
    MlpM,
}

impl BaselineVariant {
    pub fn by_name(name: &str) -> Result<BaselineVariant> {
        match name {
            "mlp" => Ok(BaselineVariant::Mlp),
            "mlp_m" | "mlp-m" => Ok(BaselineVariant::MlpM),
            other => Err(Error::Config(format!("unknown baseline variant '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineVariant::Mlp => "mlp",
            BaselineVariant::MlpM => "mlp_m",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Validation MSE is checked every this many iterations.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden_units: 64,
            learning_rate: 1e-3,
            batch_size: 128,
            max_iterations: 10_000,
            eval_every: 100,
            patience: 10,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.batch_size == 0 {
            return Err(Error::contract("BaselineConfig", "widths and batch must be positive"));
        }
        if self.eval_every == 0 || self.patience == 0 {
            return Err(Error::contract("BaselineConfig", "eval_every and patience must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("BaselineConfig", "learning rate must be positive"));
        }
        Ok(())
    }
}

enum BaselineArch {
    /// One stack over the concatenated `(x, onehot(w), d)` row.
    Flat(Vec<DenseLayer>),
    /// Shared trunk with one regression head per treatment.
    Multitask(TrunkHeads),
}

pub struct BaselineNet {
    pub store: ParamStore,
    arch: BaselineArch,
    pub variant: BaselineVariant,
    pub standardizer: Standardizer,
    pub config: BaselineConfig,
    pub num_treatments: usize,
    pub feature_dim: usize,
}

impl BaselineNet {
    fn new(
        store: &mut ParamStore,
        rng: &mut crate::random::RunRng,
        variant: BaselineVariant,
        feature_dim: usize,
        num_treatments: usize,
        hidden: usize,
    ) -> BaselineArch {
        match variant {
            BaselineVariant::Mlp => {
                let input = feature_dim + num_treatments + 1;
                BaselineArch::Flat(vec![
                    DenseLayer::new(store, rng, input, hidden, Activation::Relu),
                    DenseLayer::new(store, rng, hidden, hidden, Activation::Relu),
                    DenseLayer::new(store, rng, hidden, hidden, Activation::Relu),
                    DenseLayer::new(store, rng, hidden, 1, Activation::Identity),
                ])
            }
            BaselineVariant::MlpM => BaselineArch::Multitask(TrunkHeads::new(
                store,
                rng,
                feature_dim,
                hidden,
                num_treatments,
            )),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match &self.arch {
            BaselineArch::Flat(layers) => layers.iter().flat_map(|l| l.param_ids()).collect(),
            BaselineArch::Multitask(net) => net.param_ids(),
        }
    }

    fn named_params(&self) -> Vec<(String, ParamId)> {
        match &self.arch {
            BaselineArch::Flat(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(i, layer)| {
                    let [w, b] = layer.param_ids();
                    [(format!("baseline.l{i}.w"), w), (format!("baseline.l{i}.b"), b)]
                })
                .collect(),
            BaselineArch::Multitask(net) => net.named_params("baseline"),
        }
    }

    /// Standardized prediction for a whole batch under one treatment.
    fn forward_std(&self, x: &Tensor2, w: usize, dosage: &Tensor2) -> Result<Tensor2> {
        if w >= self.num_treatments {
            return Err(Error::contract(
                "BaselineNet",
                format!("treatment {w} out of range 0..{}", self.num_treatments),
            ));
        }
        match &self.arch {
            BaselineArch::Flat(layers) => {
                let mut input = Tensor2::zeros(x.rows(), x.cols() + self.num_treatments + 1);
                for r in 0..x.rows() {
                    let row = input.row_mut(r);
                    row[..x.cols()].copy_from_slice(x.row(r));
                    row[x.cols() + w] = 1.0;
                    row[x.cols() + self.num_treatments] = dosage.get(r, 0);
                }
                let mut h = input;
                for layer in layers {
                    h = layer.forward(&self.store, &h)?;
                }
                Ok(h)
            }
            BaselineArch::Multitask(net) => {
                let latent = net.latent_plain(&self.store, x)?;
                net.head_plain(&self.store, &latent, w, dosage)
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        checkpoint::save(&dir.join("params.json"), &self.store, &self.named_params())?;
        let meta = BaselineMeta {
            variant: self.variant,
            config: self.config.clone(),
            standardizer: self.standardizer,
            num_treatments: self.num_treatments,
            feature_dim: self.feature_dim,
        };
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::contract("BaselineNet::save", e.to_string()))?;
        let path = dir.join("model.json");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<BaselineNet> {
        let meta_path = dir.join("model.json");
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: BaselineMeta = serde_json::from_str(&text)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e.line(), e.to_string()))?;
        meta.config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        let arch = BaselineNet::new(
            &mut store,
            &mut rng,
            meta.variant,
            meta.feature_dim,
            meta.num_treatments,
            meta.config.hidden_units,
        );
        let net = BaselineNet {
            store,
            arch,
            variant: meta.variant,
            standardizer: meta.standardizer,
            config: meta.config,
            num_treatments: meta.num_treatments,
            feature_dim: meta.feature_dim,
        };
        let mut store = net.store;
        checkpoint::restore(&dir.join("params.json"), &mut store, &{
            let names = match &net.arch {
                BaselineArch::Flat(layers) => layers
                    .iter()
                    .enumerate()
                    .flat_map(|(i, layer)| {
                        let [w, b] = layer.param_ids();
                        [(format!("baseline.l{i}.w"), w), (format!("baseline.l{i}.b"), b)]
                    })
                    .collect::<Vec<_>>(),
                BaselineArch::Multitask(nets) => nets.named_params("baseline"),
            };
            names
        })?;
        Ok(BaselineNet { store, ..net })
    }
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    variant: BaselineVariant,
    config: BaselineConfig,
    standardizer: Standardizer,
    num_treatments: usize,
    feature_dim: usize,
}

impl DoseResponse for BaselineNet {
    fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    fn predict(&self, x: &[f64], w: usize, d: f64) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::dimension(
                "BaselineNet::predict",
                format!("x has {} features, expected {}", x.len(), self.feature_dim),
            ));
        }
        let features = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        let dosage = Tensor2::from_vec(1, 1, vec![d])?;
        let out = self.forward_std(&features, w, &dosage)?;
        Ok(self.standardizer.inverse(out.get(0, 0)))
    }
}

pub struct BaselineFit {
    pub net: BaselineNet,
    /// `(iteration, validation MSE)` in standardized space.
    pub val_curve: Vec<(usize, f64)>,
    pub stopped_at: usize,
}

/// Mean squared error over an index set, standardized space, grouped by
/// treatment so each group runs one batched forward.
fn factual_mse(
    net: &BaselineNet,
    dataset: &Dataset,
    standardizer: &Standardizer,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for w in 0..dataset.num_treatments {
        let group: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| dataset.w_f[i] == w)
            .collect();
        if group.is_empty() {
            continue;
        }
        let mut x = Tensor2::zeros(group.len(), dataset.x.cols());
        let mut dosage = Tensor2::zeros(group.len(), 1);
        for (r, &i) in group.iter().enumerate() {
            x.row_mut(r).copy_from_slice(dataset.x.row(i));
            dosage.set(r, 0, dataset.d_f[i]);
        }
        let pred = net.forward_std(&x, w, &dosage)?;
        for (r, &i) in group.iter().enumerate() {
            let err = pred.get(r, 0) - standardizer.transform(dataset.y_f[i]);
            total += err * err;
        }
    }
    Ok(total / indices.len() as f64)
}

pub fn baseline_fit(
    dataset: &Dataset,
    variant: BaselineVariant,
    config: &BaselineConfig,
    seed: u64,
) -> Result<BaselineFit> {
    config.validate()?;
    if dataset.split.train.is_empty() {
        return Err(Error::contract("baseline_fit", "empty training split"));
    }
    let mut rng = rng_from_seed(seed);
    let train_y: Vec<f64> = dataset
        .split
        .train
        .iter()
        .map(|&i| dataset.y_f[i])
        .collect();
    let standardizer = Standardizer::fit(&train_y);

    let mut store = ParamStore::new();
    let arch = BaselineNet::new(
        &mut store,
        &mut rng,
        variant,
        dataset.feature_dim(),
        dataset.num_treatments,
        config.hidden_units,
    );
    let mut net = BaselineNet {
        store,
        arch,
        variant,
        standardizer,
        config: config.clone(),
        num_treatments: dataset.num_treatments,
        feature_dim: dataset.feature_dim(),
    };

    let ids = net.param_ids();
    let mut adam = Adam::new(&net.store, ids.clone(), config.learning_rate);
    let mut best: Option<(f64, Vec<Tensor2>)> = None;
    let mut evals_since_best = 0usize;
    let mut val_curve = Vec::new();
    let mut stopped_at = config.max_iterations;

    for iteration in 0..config.max_iterations {
        let train = &dataset.split.train;
        let picks = random::sample_distinct(&mut rng, train.len(), config.batch_size.min(train.len()));
        let indices: Vec<usize> = picks.into_iter().map(|p| train[p]).collect();

        let mut tape = Tape::new();
        let mut squared = Vec::with_capacity(dataset.num_treatments);
        match &net.arch {
            BaselineArch::Flat(layers) => {
                let p = dataset.x.cols();
                let k = dataset.num_treatments;
                let mut input = Tensor2::zeros(indices.len(), p + k + 1);
                let mut target = Tensor2::zeros(indices.len(), 1);
                for (r, &i) in indices.iter().enumerate() {
                    let row = input.row_mut(r);
                    row[..p].copy_from_slice(dataset.x.row(i));
                    row[p + dataset.w_f[i]] = 1.0;
                    row[p + k] = dataset.d_f[i];
                    target.set(r, 0, standardizer.transform(dataset.y_f[i]));
                }
                let mut h = tape.constant(input);
                for layer in layers {
                    h = layer.forward_tape(&mut tape, &net.store, h)?;
                }
                let t = tape.constant(target);
                let diff = tape.sub(h, t)?;
                squared.push(tape.square(diff));
            }
            BaselineArch::Multitask(trunk_heads) => {
                // One forward per treatment present in the batch; per-sample
                // squared errors are averaged over the whole batch at the end.
                for w in 0..dataset.num_treatments {
                    let group: Vec<usize> =
                        indices.iter().copied().filter(|&i| dataset.w_f[i] == w).collect();
                    if group.is_empty() {
                        continue;
                    }
                    let mut x = Tensor2::zeros(group.len(), dataset.x.cols());
                    let mut dosage = Tensor2::zeros(group.len(), 1);
                    let mut target = Tensor2::zeros(group.len(), 1);
                    for (r, &i) in group.iter().enumerate() {
                        x.row_mut(r).copy_from_slice(dataset.x.row(i));
                        dosage.set(r, 0, dataset.d_f[i]);
                        target.set(r, 0, standardizer.transform(dataset.y_f[i]));
                    }
                    let x_var = tape.constant(x);
                    let latent = trunk_heads.latent_tape(&mut tape, &net.store, x_var)?;
                    let d_var = tape.constant(dosage);
                    let pred = trunk_heads.head_tape(&mut tape, &net.store, latent, w, d_var)?;
                    let t = tape.constant(target);
                    let diff = tape.sub(pred, t)?;
                    let sq = tape.square(diff);
                    squared.push(tape.sum_all(sq));
                }
            }
        }
        let loss = match &net.arch {
            BaselineArch::Flat(_) => tape.mean_all(squared[0]),
            BaselineArch::Multitask(_) => {
                let total = if squared.len() == 1 {
                    squared[0]
                } else {
                    let mut acc = squared[0];
                    for &s in &squared[1..] {
                        acc = tape.add(acc, s)?;
                    }
                    acc
                };
                tape.scale(total, 1.0 / indices.len() as f64)
            }
        };
        let loss_value = tape.scalar(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::TrainingDivergence {
                iteration,
                details: format!("baseline loss became {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut net.store, &grads).map_err(|e| match e {
            Error::TrainingDivergence { details, .. } => Error::TrainingDivergence { iteration, details },
            other => other,
        })?;

        let at_eval = (iteration + 1) % config.eval_every == 0;
        if at_eval && !dataset.split.validation.is_empty() {
            let val = factual_mse(&net, dataset, &standardizer, &dataset.split.validation)?;
            val_curve.push((iteration + 1, val));
            let improved = best.as_ref().map_or(true, |(b, _)| val < *b);
            if improved {
                let snapshot = ids.iter().map(|&id| net.store.get(id).clone()).collect();
                best = Some((val, snapshot));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= config.patience {
                    stopped_at = iteration + 1;
                    break;
                }
            }
        }
    }

    if let Some((_, snapshot)) = best {
        for (&id, value) in ids.iter().zip(snapshot) {
            *net.store.get_mut(id) = value;
        }
    }
    Ok(BaselineFit {
        net,
        val_curve,
        stopped_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{evaluate_model, DEFAULT_GRID_N};
    use crate::simulate::{
        make_dataset, synth_features, ResponseModel, ResponseShape, SimulationConfig, SplitIndices,
    };

    fn zero_noise_dataset(seed: u64, n: usize) -> (ResponseModel, Dataset) {
        let mut rng = rng_from_seed(seed);
        let config = SimulationConfig {
            num_treatments: 2,
            noise_sd: 0.0,
            shape_override: Some(vec![ResponseShape::Quadratic; 2]),
            ..SimulationConfig::default()
        };
        let model = ResponseModel::sample(config, 6, &mut rng).unwrap();
        let features = synth_features(&mut rng, n, 6).unwrap();
        let dataset = make_dataset(&features, &model, &mut rng).unwrap();
        (model, dataset)
    }

    fn quick_config() -> BaselineConfig {
        BaselineConfig {
            hidden_units: 32,
            batch_size: 64,
            max_iterations: 3000,
            eval_every: 100,
            patience: 10,
            ..BaselineConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = BaselineConfig::default();
        c.patience = 0;
        assert!(c.validate().is_err());
        let mut c = BaselineConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [BaselineVariant::Mlp, BaselineVariant::MlpM] {
            assert_eq!(BaselineVariant::by_name(v.as_str()).unwrap(), v);
        }
        assert!(BaselineVariant::by_name("drnet").is_err());
    }

    /// Outcomes linear in `(x, d)` with per-treatment coefficients and no
    /// noise: an easy surface both architectures must fit almost exactly.
    fn linear_dataset(seed: u64, n: usize) -> Dataset {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let x = synth_features(&mut rng, n, 6).unwrap();
        let coeffs = [[3.0, -2.0, 1.0, 0.5, -1.0, 2.0], [-1.0, 4.0, 0.0, 2.0, 1.0, -3.0]];
        let slopes = [6.0, -4.0];
        let mut w_f = Vec::with_capacity(n);
        let mut d_f = Vec::with_capacity(n);
        let mut y_f = Vec::with_capacity(n);
        for i in 0..n {
            let w = rng.gen_range(0..2usize);
            let d = random::uniform01(&mut rng);
            let dot: f64 = x.row(i).iter().zip(&coeffs[w]).map(|(a, b)| a * b).sum();
            w_f.push(w);
            d_f.push(d);
            y_f.push(10.0 * (0.1 * dot + 0.1 * slopes[w] * d));
        }
        let train = (0..n * 64 / 100).collect();
        let validation = (n * 64 / 100..n * 80 / 100).collect();
        let test = (n * 80 / 100..n).collect();
        Dataset {
            x,
            w_f,
            d_f,
            y_f,
            num_treatments: 2,
            split: SplitIndices {
                train,
                validation,
                test,
            },
        }
    }

    #[test]
    fn both_variants_fit_a_zero_noise_linear_surface_closely() {
        let dataset = linear_dataset(300, 300);
        for variant in [BaselineVariant::Mlp, BaselineVariant::MlpM] {
            let fit = baseline_fit(&dataset, variant, &quick_config(), 1).unwrap();
            let val = factual_mse(
                &fit.net,
                &dataset,
                &fit.net.standardizer,
                &dataset.split.validation,
            )
            .unwrap();
            let rmse = val.sqrt() * fit.net.standardizer.sd;
            assert!(rmse < 0.5, "{variant:?} validation RMSE {rmse}");
        }
    }

    #[test]
    fn factual_predictions_correlate_with_true_outcomes() {
        let (_, dataset) = zero_noise_dataset(301, 400);
        let fit = baseline_fit(&dataset, BaselineVariant::MlpM, &quick_config(), 2).unwrap();
        let test = &dataset.split.test;
        let preds: Vec<f64> = test
            .iter()
            .map(|&i| {
                fit.net
                    .predict(dataset.x.row(i), dataset.w_f[i], dataset.d_f[i])
                    .unwrap()
            })
            .collect();
        let truth: Vec<f64> = test.iter().map(|&i| dataset.y_f[i]).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mp, mt) = (mean(&preds), mean(&truth));
        let mut cov = 0.0;
        let mut vp = 0.0;
        let mut vt = 0.0;
        for (p, t) in preds.iter().zip(&truth) {
            cov += (p - mp) * (t - mt);
            vp += (p - mp) * (p - mp);
            vt += (t - mt) * (t - mt);
        }
        let pearson = cov / (vp.sqrt() * vt.sqrt());
        assert!(pearson > 0.9, "pearson {pearson}");
    }

    #[test]
    fn fixed_seed_reproduces_parameters() {
        let (_, dataset) = zero_noise_dataset(302, 120);
        let config = BaselineConfig {
            max_iterations: 300,
            ..quick_config()
        };
        let a = baseline_fit(&dataset, BaselineVariant::Mlp, &config, 5).unwrap();
        let b = baseline_fit(&dataset, BaselineVariant::Mlp, &config, 5).unwrap();
        let x = vec![0.4; 6];
        assert_eq!(
            a.net.predict(&x, 1, 0.3).unwrap(),
            b.net.predict(&x, 1, 0.3).unwrap()
        );
    }

    #[test]
    fn multitask_head_gradients_are_isolated_per_treatment() {
        let (_, dataset) = zero_noise_dataset(303, 60);
        let mut rng = rng_from_seed(9);
        let mut store = ParamStore::new();
        let arch = BaselineNet::new(&mut store, &mut rng, BaselineVariant::MlpM, 6, 2, 8);
        let BaselineArch::Multitask(net) = &arch else {
            panic!("expected multitask arch")
        };
        let x = Tensor2::from_vec(1, 6, dataset.x.row(0).to_vec()).unwrap();
        let mut tape = Tape::new();
        let x_var = tape.constant(x);
        let latent = net.latent_tape(&mut tape, &store, x_var).unwrap();
        let d_var = tape.constant(Tensor2::from_vec(1, 1, vec![0.5]).unwrap());
        let out = net.head_tape(&mut tape, &store, latent, 0, d_var).unwrap();
        let loss = tape.mean_all(out);
        let grads = tape.backward(loss).unwrap();
        // Head 0 and the trunk receive gradient; head 1 must receive none.
        let named = net.named_params("net");
        for (name, id) in named {
            let got = grads.get(id).map(|g| g.as_slice().iter().any(|&v| v != 0.0));
            if name.contains("head1") {
                assert_eq!(got, None, "{name} should be untouched");
            } else if name.contains("trunk") {
                assert_eq!(got, Some(true), "{name} should have gradient");
            }
        }
    }

    #[test]
    fn single_treatment_multitask_trains_like_a_plain_regressor() {
        let mut rng = rng_from_seed(304);
        let config = SimulationConfig {
            num_treatments: 1,
            noise_sd: 0.0,
            ..SimulationConfig::default()
        };
        let model = ResponseModel::sample(config, 4, &mut rng).unwrap();
        let features = synth_features(&mut rng, 150, 4).unwrap();
        let dataset = make_dataset(&features, &model, &mut rng).unwrap();
        let fit = baseline_fit(
            &dataset,
            BaselineVariant::MlpM,
            &BaselineConfig {
                max_iterations: 400,
                ..quick_config()
            },
            1,
        )
        .unwrap();
        let y = fit.net.predict(&vec![0.5; 4], 0, 0.5).unwrap();
        assert!(y.is_finite());
        assert!(fit.net.predict(&vec![0.5; 4], 1, 0.5).is_err());
    }

    #[test]
    fn early_stopping_restores_the_best_snapshot() {
        let (_, dataset) = zero_noise_dataset(305, 200);
        let config = BaselineConfig {
            max_iterations: 2000,
            eval_every: 50,
            patience: 3,
            ..quick_config()
        };
        let fit = baseline_fit(&dataset, BaselineVariant::Mlp, &config, 3).unwrap();
        let final_val = factual_mse(
            &fit.net,
            &dataset,
            &fit.net.standardizer,
            &dataset.split.validation,
        )
        .unwrap();
        let best_seen = fit
            .val_curve
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        assert!((final_val - best_seen).abs() < 1e-12, "restored {final_val}, best {best_seen}");
        if fit.stopped_at < config.max_iterations {
            assert!(fit.val_curve.len() >= config.patience);
        }
    }

    #[test]
    fn save_load_round_trips_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let (_, dataset) = zero_noise_dataset(306, 120);
        let config = BaselineConfig {
            max_iterations: 200,
            ..quick_config()
        };
        for variant in [BaselineVariant::Mlp, BaselineVariant::MlpM] {
            let fit = baseline_fit(&dataset, variant, &config, 4).unwrap();
            let sub = dir.path().join(variant.as_str());
            fit.net.save(&sub).unwrap();
            let loaded = BaselineNet::load(&sub).unwrap();
            let x = vec![0.3; 6];
            for w in 0..2 {
                for d in [0.0, 0.4, 1.0] {
                    assert_eq!(
                        fit.net.predict(&x, w, d).unwrap(),
                        loaded.predict(&x, w, d).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn evaluation_runs_on_the_default_grid() {
        let (model, dataset) = zero_noise_dataset(307, 150);
        let fit = baseline_fit(
            &dataset,
            BaselineVariant::Mlp,
            &BaselineConfig {
                max_iterations: 200,
                ..quick_config()
            },
            6,
        )
        .unwrap();
        let test_x = gather(&dataset, &dataset.split.test);
        let report = evaluate_model(&model, &fit.net, &test_x, DEFAULT_GRID_N).unwrap();
        assert!(report.sqrt_mise.is_finite() && report.sqrt_mise >= 0.0);
        assert_eq!(report.grid_n, DEFAULT_GRID_N);
    }

    fn gather(dataset: &Dataset, indices: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(indices.len(), dataset.x.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(dataset.x.row(i));
        }
        out
    }
}
