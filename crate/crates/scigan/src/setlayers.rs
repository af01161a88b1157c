//! Permutation-invariant and permutation-equivariant layers.
//!
//! Both operate on small sets whose members are rows of a batch: a set of
//! `m` elements with `d` channels is represented as `m` tensors of shape
//! `batch x d`, one per element, so every batch sample carries its own set.
//!
//! - [`InvariantLayer`]: embeds each element with a shared affine map,
//!   sum-pools over elements, then applies the activation. Output is
//!   independent of element order (exactly — pooling sorts its addends).
//! - [`EquivariantLayer`]: `out_i = act(u_i * lambda + (sum_j u_j) * gamma
//!   + aux * theta)` with channel-mixing matrices; permuting the input
//!   elements permutes the outputs the same way. The auxiliary input (per
//!   batch sample, shared by all elements) is optional.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, ParamId, ParamStore};
use crate::nn::glorot_uniform;
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, sum_sorted, Tensor2};

#[derive(Debug, Clone)]
pub struct InvariantLayer {
    pub phi: DenseLayer,
    pub activation: Activation,
}

impl InvariantLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        element_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        InvariantLayer {
            phi: DenseLayer::new(store, rng, element_dim, out_dim, Activation::Identity),
            activation,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.phi.out_dim()
    }

    pub fn forward(&self, store: &ParamStore, elements: &[Tensor2]) -> Result<Tensor2> {
        if elements.is_empty() {
            return Err(Error::contract("InvariantLayer::forward", "empty set"));
        }
        let embedded: Vec<Tensor2> = elements
            .iter()
            .map(|e| self.phi.forward(store, e))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor2> = embedded.iter().collect();
        let pooled = sum_sorted(&refs);
        Ok(apply_plain(self.activation, pooled))
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        elements: &[Var],
    ) -> Result<Var> {
        if elements.is_empty() {
            return Err(Error::contract("InvariantLayer::forward_tape", "empty set"));
        }
        let embedded: Vec<Var> = elements
            .iter()
            .map(|&e| self.phi.forward_tape(tape, store, e))
            .collect::<Result<_>>()?;
        let pooled = tape.sum_elements(&embedded)?;
        Ok(apply_tape(self.activation, tape, pooled))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.phi.param_ids().to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct EquivariantLayer {
    /// Per-element channel mixing, `in_dim x out_dim`.
    pub lambda: ParamId,
    /// Pooled-sum channel mixing, `in_dim x out_dim`.
    pub gamma: ParamId,
    /// Projection of the auxiliary input, `aux_dim x out_dim`.
    pub theta: Option<ParamId>,
    pub activation: Activation,
    in_dim: usize,
    out_dim: usize,
    aux_dim: Option<usize>,
}

impl EquivariantLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        in_dim: usize,
        out_dim: usize,
        aux_dim: Option<usize>,
        activation: Activation,
    ) -> Self {
        EquivariantLayer {
            lambda: store.create(glorot_uniform(rng, in_dim, out_dim)),
            gamma: store.create(glorot_uniform(rng, in_dim, out_dim)),
            theta: aux_dim.map(|d| store.create(glorot_uniform(rng, d, out_dim))),
            activation,
            in_dim,
            out_dim,
            aux_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check(&self, element_cols: usize, aux: Option<(usize, usize)>, batch: usize) -> Result<()> {
        if element_cols != self.in_dim {
            return Err(Error::dimension(
                "EquivariantLayer",
                format!("elements have {} channels, layer expects {}", element_cols, self.in_dim),
            ));
        }
        match (self.aux_dim, aux) {
            (None, None) => Ok(()),
            (Some(d), Some((rows, cols))) => {
                if cols != d || rows != batch {
                    Err(Error::dimension(
                        "EquivariantLayer",
                        format!("aux is {}x{}, expected {}x{}", rows, cols, batch, d),
                    ))
                } else {
                    Ok(())
                }
            }
            (Some(_), None) => Err(Error::contract(
                "EquivariantLayer",
                "layer was built with an auxiliary input but none was supplied",
            )),
            (None, Some(_)) => Err(Error::contract(
                "EquivariantLayer",
                "layer was built without an auxiliary input but one was supplied",
            )),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        elements: &[Tensor2],
        aux: Option<&Tensor2>,
    ) -> Result<Vec<Tensor2>> {
        if elements.is_empty() {
            return Err(Error::contract("EquivariantLayer::forward", "empty set"));
        }
        let batch = elements[0].rows();
        self.check(elements[0].cols(), aux.map(|a| a.shape()), batch)?;
        let refs: Vec<&Tensor2> = elements.iter().collect();
        let pooled = sum_sorted(&refs);
        let pooled_term = matmul(&pooled, store.get(self.gamma))?;
        let aux_term = match (aux, self.theta) {
            (Some(a), Some(theta)) => Some(matmul(a, store.get(theta))?),
            _ => None,
        };
        elements
            .iter()
            .map(|e| {
                let mut pre = matmul(e, store.get(self.lambda))?;
                pre.add_scaled(&pooled_term, 1.0);
                if let Some(at) = &aux_term {
                    pre.add_scaled(at, 1.0);
                }
                Ok(apply_plain(self.activation, pre))
            })
            .collect()
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        elements: &[Var],
        aux: Option<Var>,
    ) -> Result<Vec<Var>> {
        if elements.is_empty() {
            return Err(Error::contract("EquivariantLayer::forward_tape", "empty set"));
        }
        let batch = tape.value(elements[0]).rows();
        self.check(
            tape.value(elements[0]).cols(),
            aux.map(|a| tape.value(a).shape()),
            batch,
        )?;
        let lambda = tape.param(store, self.lambda);
        let gamma = tape.param(store, self.gamma);
        let pooled = tape.sum_elements(elements)?;
        let pooled_term = tape.matmul(pooled, gamma)?;
        let aux_term = match (aux, self.theta) {
            (Some(a), Some(theta)) => {
                let th = tape.param(store, theta);
                Some(tape.matmul(a, th)?)
            }
            _ => None,
        };
        elements
            .iter()
            .map(|&e| {
                let own = tape.matmul(e, lambda)?;
                let mut pre = tape.add(own, pooled_term)?;
                if let Some(at) = aux_term {
                    pre = tape.add(pre, at)?;
                }
                Ok(apply_tape(self.activation, tape, pre))
            })
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.lambda, self.gamma];
        if let Some(theta) = self.theta {
            ids.push(theta);
        }
        ids
    }
}

fn apply_plain(activation: Activation, x: Tensor2) -> Tensor2 {
    match activation {
        Activation::Identity => x,
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        Activation::Softmax => crate::tape::softmax_rows_value(&x),
    }
}

fn apply_tape(activation: Activation, tape: &mut Tape, x: Var) -> Var {
    match activation {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax_rows(x),
    }
}
