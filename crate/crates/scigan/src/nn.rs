//! Dense layers, parameter storage, initialization, and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ParamGrads, Tape, Var};
use crate::tensor::{matmul, Tensor2};

/// Handle into a [`ParamStore`]; networks hold ids, the store holds values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns every trainable tensor of a model.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    tensors: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn create(&mut self, value: Tensor2) -> ParamId {
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Row-wise softmax; only meaningful as a terminal layer activation.
    Softmax,
}

impl Activation {
    fn apply_plain(self, x: Tensor2) -> Tensor2 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Softmax => crate::tape::softmax_rows_value(&x),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softmax => tape.softmax_rows(x),
        }
    }
}

/// Uniform Glorot initialization on `[-limit, limit]`,
/// `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| crate::random::uniform_in(rng, -limit, limit))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("init shape")
}

/// Fully connected layer `activation(x * W + b)` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let weights = store.create(glorot_uniform(rng, in_dim, out_dim));
        let bias = store.create(Tensor2::zeros(1, out_dim));
        DenseLayer {
            weights,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim {
            return Err(Error::dimension(
                "DenseLayer::forward",
                format!("layer expects {} inputs, got {}", self.in_dim, cols),
            ));
        }
        Ok(())
    }

    /// Forward pass without gradient recording.
    pub fn forward(&self, store: &ParamStore, input: &Tensor2) -> Result<Tensor2> {
        self.check_input(input.cols())?;
        let mut out = matmul(input, store.get(self.weights))?;
        let bias = store.get(self.bias);
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
                *o += b;
            }
        }
        Ok(self.activation.apply_plain(out))
    }

    /// Forward pass recorded on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).cols())?;
        let w = tape.param(store, self.weights);
        let b = tape.param(store, self.bias);
        let lin = tape.matmul(input, w)?;
        let biased = tape.add_bias(lin, b)?;
        Ok(self.activation.apply_tape(tape, biased))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weights, self.bias]
    }
}

/// Adam optimizer over a fixed list of parameters.
pub struct Adam {
    ids: Vec<ParamId>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, learning_rate: f64) -> Self {
        let m = ids.iter().map(|&id| {
            let t = store.get(id);
            Tensor2::zeros(t.rows(), t.cols())
        });
        let v = m.clone();
        Adam {
            m: m.collect(),
            v: v.collect(),
            ids,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Parameters without a gradient this step are treated as
    /// having a zero gradient (their moments still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let zero = Tensor2::zeros(self.m[i].rows(), self.m[i].cols());
            let grad = grads.get(id).unwrap_or(&zero);
            if !grad.all_finite() {
                return Err(Error::TrainingDivergence {
                    iteration: self.step_count as usize,
                    details: format!("non-finite gradient for parameter {}", i),
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.get_mut(id);
            for ((t, (mi, vi)), &g) in theta
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
                .zip(grad.as_slice())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *t -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_max_rel_err;
    use crate::random::rng_from_seed;
    use crate::tape::Tape;

    #[test]
    fn dense_forward_identity_passes_input_through_zero_weights() {
        // With zero weights and bias, identity activation returns zeros.
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let mut layer = DenseLayer::new(&mut store, &mut rng, 3, 2, Activation::Identity);
        *store.get_mut(layer.weights) = Tensor2::zeros(3, 2);
        layer.activation = Activation::Identity;
        let out = layer
            .forward(&store, &Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn dense_forward_matches_hand_multiplication() {
        // Oracle computed by explicit loops, independent of the matmul kernel.
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let layer = DenseLayer::new(&mut store, &mut rng, 3, 2, Activation::Identity);
        let w = Tensor2::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.5, 1.5]).unwrap();
        let b = Tensor2::from_vec(1, 2, vec![0.1, -0.2]).unwrap();
        *store.get_mut(layer.weights) = w.clone();
        *store.get_mut(layer.bias) = b.clone();
        let input = Tensor2::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.0, 0.5, 3.0]).unwrap();
        let out = layer.forward(&store, &input).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = b.get(0, c);
                for k in 0..3 {
                    acc += input.get(r, k) * w.get(k, c);
                }
                assert!((out.get(r, c) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_relu_zeroes_negative_preactivations() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let layer = DenseLayer::new(&mut store, &mut rng, 1, 2, Activation::Relu);
        *store.get_mut(layer.weights) = Tensor2::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let out = layer
            .forward(&store, &Tensor2::from_vec(1, 1, vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(out.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let layer = DenseLayer::new(&mut store, &mut rng, 4, 3, Activation::Tanh);
        let input = Tensor2::from_vec(2, 4, vec![0.1, -0.2, 0.3, 0.4, 1.0, -1.0, 0.5, 0.0]).unwrap();
        let plain = layer.forward(&store, &input).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let y = layer.forward_tape(&mut tape, &store, x).unwrap();
        assert_eq!(&plain, tape.value(y));
    }

    #[test]
    fn wrong_input_width_is_a_dimension_error() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let layer = DenseLayer::new(&mut store, &mut rng, 4, 3, Activation::Identity);
        let bad = Tensor2::zeros(1, 5);
        assert!(matches!(
            layer.forward(&store, &bad),
            Err(crate::Error::Dimension { .. })
        ));
    }

    #[test]
    fn glorot_limit_is_respected() {
        let mut rng = rng_from_seed(6);
        let w = glorot_uniform(&mut rng, 30, 20);
        let limit = (6.0f64 / 50.0).sqrt();
        assert!(w.as_slice().iter().all(|&x| x.abs() <= limit));
        // Values should actually spread out, not collapse near zero.
        assert!(w.max_abs() > 0.5 * limit);
    }

    #[test]
    fn two_layer_tanh_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        let l1 = DenseLayer::new(&mut store, &mut rng, 3, 4, Activation::Tanh);
        let l2 = DenseLayer::new(&mut store, &mut rng, 4, 1, Activation::Identity);
        let input = Tensor2::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.7).sin()).collect())
            .unwrap();
        let target = Tensor2::from_vec(5, 1, vec![0.2, -0.4, 0.6, 0.1, -0.9]).unwrap();

        let loss_fn = |store: &ParamStore| {
            let h = l1.forward(store, &input).unwrap();
            let y = l2.forward(store, &h).unwrap();
            let diff = y.zip_map(&target, |a, b| (a - b) * (a - b));
            diff.as_slice().iter().sum::<f64>() / diff.len() as f64
        };

        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let h = l1.forward_tape(&mut tape, &store, x).unwrap();
        let y = l2.forward_tape(&mut tape, &store, h).unwrap();
        let t = tape.constant(target.clone());
        let diff = tape.sub(y, t).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        let ids: Vec<ParamId> = l1
            .param_ids()
            .into_iter()
            .chain(l2.param_ids())
            .collect();
        let max_rel = finite_difference_max_rel_err(&mut store, &ids, &grads, 1e-5, loss_fn);
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With g = 1: m_hat = 1, v_hat = 1, so the first step is lr / (1 + eps).
        let mut store = ParamStore::new();
        let theta = store.create(Tensor2::from_vec(1, 1, vec![0.0]).unwrap());
        let mut adam = Adam::new(&store, vec![theta], 0.1);
        let mut tape = Tape::new();
        let x = tape.param(&store, theta);
        let loss = tape.sum_all(x); // gradient = 1
        let grads = tape.backward(loss).unwrap();
        adam.step(&mut store, &grads).unwrap();
        let moved = store.get(theta).get(0, 0).abs();
        assert!((moved - 0.1).abs() < 1e-6, "step magnitude {moved}");
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut store = ParamStore::new();
        let theta = store.create(Tensor2::from_vec(1, 2, vec![1.5, -2.5]).unwrap());
        let other = store.create(Tensor2::from_vec(1, 1, vec![3.0]).unwrap());
        let mut adam = Adam::new(&store, vec![theta], 0.1);
        // Build a loss that only touches `other`, so theta gets no gradient.
        let mut tape = Tape::new();
        let x = tape.param(&store, other);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(theta).as_slice(), &[1.5, -2.5]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize (theta - 5)^2 from zero; 300 steps at lr 0.1 get close.
        let mut store = ParamStore::new();
        let theta = store.create(Tensor2::from_vec(1, 1, vec![0.0]).unwrap());
        let mut adam = Adam::new(&store, vec![theta], 0.1);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = tape.param(&store, theta);
            let target = tape.constant(Tensor2::from_vec(1, 1, vec![5.0]).unwrap());
            let diff = tape.sub(x, target).unwrap();
            let sq = tape.square(diff);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut store, &grads).unwrap();
        }
        let value = store.get(theta).get(0, 0);
        assert!((value - 5.0).abs() < 0.1, "theta = {value}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = ParamStore::new();
        let theta = store.create(Tensor2::from_vec(1, 1, vec![1.0]).unwrap());
        let mut adam = Adam::new(&store, vec![theta], 0.1);
        let mut tape = Tape::new();
        let x = tape.param(&store, theta);
        let bad = tape.constant(Tensor2::from_vec(1, 1, vec![f64::INFINITY]).unwrap());
        let prod = tape.mul(x, bad).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(matches!(
            adam.step(&mut store, &grads),
            Err(crate::Error::TrainingDivergence { .. })
        ));
    }
}
