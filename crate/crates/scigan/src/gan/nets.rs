//! Network architectures for the adversarial stages.
//!
//! Every component exists in two flavors selected by [`Variant`] flags:
//! the full versions use a shared trunk with per-treatment heads and
//! permutation-invariant/equivariant set layers, the reduced versions swap
//! those for plain fully-connected stacks of matching width so ablations
//! change one ingredient at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, ParamId, ParamStore};
use crate::random::RunRng;
use crate::setlayers::{EquivariantLayer, InvariantLayer};
use crate::tape::{softmax_rows_value, Tape, Var};
use crate::tensor::Tensor2;

/// Ablation switches. All true is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    /// Add the factual reconstruction term to the generator loss.
    pub supervised: bool,
    /// Shared trunk with one head per treatment (vs one flat network).
    pub multitask: bool,
    /// Treatment-level times dosage-level discriminators (vs one joint one).
    pub hierarchical: bool,
    /// Set layers inside discriminators (vs flat dense replacements).
    pub inv_eqv: bool,
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            supervised: true,
            multitask: true,
            hierarchical: true,
            inv_eqv: true,
        }
    }

    pub fn baseline() -> Self {
        Variant {
            supervised: false,
            multitask: false,
            hierarchical: false,
            inv_eqv: false,
        }
    }

    pub fn plus_supervised() -> Self {
        Variant {
            supervised: true,
            ..Variant::baseline()
        }
    }

    pub fn plus_multitask() -> Self {
        Variant {
            multitask: true,
            ..Variant::plus_supervised()
        }
    }

    pub fn plus_hierarchical() -> Self {
        Variant {
            hierarchical: true,
            ..Variant::plus_multitask()
        }
    }

    /// Joint single discriminator but with set layers kept.
    pub fn single_disc() -> Self {
        Variant {
            hierarchical: false,
            ..Variant::full()
        }
    }

    pub fn by_name(name: &str) -> Result<Variant> {
        match name {
            "full" => Ok(Variant::full()),
            "baseline" => Ok(Variant::baseline()),
            "supervised" => Ok(Variant::plus_supervised()),
            "multitask" => Ok(Variant::plus_multitask()),
            "hierarchical" => Ok(Variant::plus_hierarchical()),
            "single" => Ok(Variant::single_disc()),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

fn named(prefix: &str, layer: &DenseLayer) -> Vec<(String, ParamId)> {
    vec![
        (format!("{prefix}.w"), layer.weights),
        (format!("{prefix}.b"), layer.bias),
    ]
}

/// Shared trunk plus per-treatment dosage-conditioned heads. The trunk maps
/// the context to a latent code once; each head reads `latent ++ dosage`.
#[derive(Debug, Clone)]
pub struct TrunkHeads {
    pub trunk: DenseLayer,
    pub heads: Vec<[DenseLayer; 3]>,
}

impl TrunkHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        in_dim: usize,
        hidden: usize,
        num_treatments: usize,
    ) -> Self {
        let trunk = DenseLayer::new(store, rng, in_dim, hidden, Activation::Relu);
        let heads = (0..num_treatments)
            .map(|_| {
                [
                    DenseLayer::new(store, rng, hidden + 1, hidden, Activation::Relu),
                    DenseLayer::new(store, rng, hidden, hidden, Activation::Relu),
                    DenseLayer::new(store, rng, hidden, 1, Activation::Identity),
                ]
            })
            .collect();
        TrunkHeads { trunk, heads }
    }

    pub fn num_treatments(&self) -> usize {
        self.heads.len()
    }

    pub fn latent_plain(&self, store: &ParamStore, input: &Tensor2) -> Result<Tensor2> {
        self.trunk.forward(store, input)
    }

    pub fn latent_tape(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        self.trunk.forward_tape(tape, store, input)
    }

    pub fn head_plain(
        &self,
        store: &ParamStore,
        latent: &Tensor2,
        w: usize,
        dosage: &Tensor2,
    ) -> Result<Tensor2> {
        let head = self.head(w)?;
        let mut h = concat_plain(&[latent, dosage])?;
        for layer in head {
            h = layer.forward(store, &h)?;
        }
        Ok(h)
    }

    pub fn head_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        latent: Var,
        w: usize,
        dosage: Var,
    ) -> Result<Var> {
        let head = self.head(w)?;
        let mut h = tape.concat_cols(&[latent, dosage])?;
        for layer in head {
            h = layer.forward_tape(tape, store, h)?;
        }
        Ok(h)
    }

    fn head(&self, w: usize) -> Result<&[DenseLayer; 3]> {
        self.heads.get(w).ok_or_else(|| {
            Error::contract(
                "TrunkHeads::head",
                format!("treatment {w} out of range for {} heads", self.heads.len()),
            )
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.trunk.param_ids().to_vec();
        for head in &self.heads {
            for layer in head {
                ids.extend(layer.param_ids());
            }
        }
        ids
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamId)> {
        let mut out = named(&format!("{prefix}.trunk"), &self.trunk);
        for (w, head) in self.heads.iter().enumerate() {
            for (l, layer) in head.iter().enumerate() {
                out.extend(named(&format!("{prefix}.head{w}.l{l}"), layer));
            }
        }
        out
    }
}

fn concat_plain(parts: &[&Tensor2]) -> Result<Tensor2> {
    let rows = parts[0].rows();
    let mut cols = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(Error::dimension(
                "concat",
                format!("row counts differ: {} vs {}", rows, p.rows()),
            ));
        }
        cols += p.cols();
    }
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for p in parts {
            out.row_mut(r)[offset..offset + p.cols()].copy_from_slice(p.row(r));
            offset += p.cols();
        }
    }
    Ok(out)
}

fn onehot_rows(rows: usize, width: usize, hot: usize) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, width);
    for r in 0..rows {
        t.set(r, hot, 1.0);
    }
    t
}

/// Counterfactual generator: maps the factual context
/// `(x, onehot(w_f), d_f, y_f, z)` and a query `(w, d)` to an outcome.
#[derive(Debug, Clone)]
pub enum GeneratorNet {
    /// Shared trunk over the context, one dosage-conditioned head per
    /// treatment.
    Multitask(TrunkHeads),
    /// One flat network fed the context plus the encoded query.
    Flat {
        layers: Vec<DenseLayer>,
        num_treatments: usize,
    },
}

impl GeneratorNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        context_dim: usize,
        hidden: usize,
        num_treatments: usize,
        multitask: bool,
    ) -> Self {
        if multitask {
            GeneratorNet::Multitask(TrunkHeads::new(store, rng, context_dim, hidden, num_treatments))
        } else {
            let in_dim = context_dim + num_treatments + 1;
            let layers = vec![
                DenseLayer::new(store, rng, in_dim, hidden, Activation::Relu),
                DenseLayer::new(store, rng, hidden, hidden, Activation::Relu),
                DenseLayer::new(store, rng, hidden, hidden, Activation::Relu),
                DenseLayer::new(store, rng, hidden, 1, Activation::Identity),
            ];
            GeneratorNet::Flat {
                layers,
                num_treatments,
            }
        }
    }

    pub fn num_treatments(&self) -> usize {
        match self {
            GeneratorNet::Multitask(net) => net.num_treatments(),
            GeneratorNet::Flat { num_treatments, .. } => *num_treatments,
        }
    }

    /// Context encoding shared by all queries of a batch.
    pub fn latent_plain(&self, store: &ParamStore, context: &Tensor2) -> Result<Tensor2> {
        match self {
            GeneratorNet::Multitask(net) => net.latent_plain(store, context),
            GeneratorNet::Flat { .. } => Ok(context.clone()),
        }
    }

    pub fn latent_tape(&self, tape: &mut Tape, store: &ParamStore, context: Var) -> Result<Var> {
        match self {
            GeneratorNet::Multitask(net) => net.latent_tape(tape, store, context),
            GeneratorNet::Flat { .. } => Ok(context),
        }
    }

    pub fn predict_plain(
        &self,
        store: &ParamStore,
        latent: &Tensor2,
        w: usize,
        dosage: &Tensor2,
    ) -> Result<Tensor2> {
        match self {
            GeneratorNet::Multitask(net) => net.head_plain(store, latent, w, dosage),
            GeneratorNet::Flat {
                layers,
                num_treatments,
            } => {
                let onehot = onehot_rows(latent.rows(), *num_treatments, w);
                let mut h = concat_plain(&[latent, &onehot, dosage])?;
                for layer in layers {
                    h = layer.forward(store, &h)?;
                }
                Ok(h)
            }
        }
    }

    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        latent: Var,
        w: usize,
        dosage: Var,
    ) -> Result<Var> {
        match self {
            GeneratorNet::Multitask(net) => net.head_tape(tape, store, latent, w, dosage),
            GeneratorNet::Flat {
                layers,
                num_treatments,
            } => {
                let rows = tape.value(latent).rows();
                let onehot = tape.constant(onehot_rows(rows, *num_treatments, w));
                let mut h = tape.concat_cols(&[latent, onehot, dosage])?;
                for layer in layers {
                    h = layer.forward_tape(tape, store, h)?;
                }
                Ok(h)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            GeneratorNet::Multitask(net) => net.param_ids(),
            GeneratorNet::Flat { layers, .. } => {
                layers.iter().flat_map(|l| l.param_ids()).collect()
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        match self {
            GeneratorNet::Multitask(net) => net.named_params("generator"),
            GeneratorNet::Flat { layers, .. } => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| named(&format!("generator.l{i}"), l))
                .collect(),
        }
    }
}

/// Feed-forward surface trained to mimic the generator; needs only features
/// at test time.
#[derive(Debug, Clone)]
pub struct InferenceNet(pub TrunkHeads);

impl InferenceNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        feature_dim: usize,
        hidden: usize,
        num_treatments: usize,
    ) -> Self {
        InferenceNet(TrunkHeads::new(store, rng, feature_dim, hidden, num_treatments))
    }

    pub fn num_treatments(&self) -> usize {
        self.0.num_treatments()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.0.param_ids()
    }

    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        self.0.named_params("inference")
    }
}

/// Treatment-level scorer: which treatment's set hides the factual pair.
#[derive(Debug, Clone)]
pub enum TreatmentScorer {
    SetBased {
        invariants: Vec<InvariantLayer>,
        hidden: DenseLayer,
        out: DenseLayer,
    },
    Flat {
        embed: DenseLayer,
        hidden: DenseLayer,
        out: DenseLayer,
    },
}

impl TreatmentScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        feature_dim: usize,
        num_treatments: usize,
        set_size: usize,
        inv_dim: usize,
        hidden: usize,
        inv_eqv: bool,
    ) -> Self {
        if inv_eqv {
            let invariants = (0..num_treatments)
                .map(|_| InvariantLayer::new(store, rng, 2, inv_dim, Activation::Relu))
                .collect();
            TreatmentScorer::SetBased {
                invariants,
                hidden: DenseLayer::new(
                    store,
                    rng,
                    feature_dim + num_treatments * inv_dim,
                    hidden,
                    Activation::Relu,
                ),
                out: DenseLayer::new(store, rng, hidden, num_treatments, Activation::Softmax),
            }
        } else {
            // Same downstream shape, but the per-set summaries come from one
            // dense layer over all raw pairs.
            TreatmentScorer::Flat {
                embed: DenseLayer::new(
                    store,
                    rng,
                    2 * num_treatments * set_size,
                    num_treatments * inv_dim,
                    Activation::Relu,
                ),
                hidden: DenseLayer::new(
                    store,
                    rng,
                    feature_dim + num_treatments * inv_dim,
                    hidden,
                    Activation::Relu,
                ),
                out: DenseLayer::new(store, rng, hidden, num_treatments, Activation::Softmax),
            }
        }
    }

    /// `sets[w]` holds treatment `w`'s dosage-outcome pairs, one `batch x 2`
    /// tensor per slot.
    pub fn forward_plain(
        &self,
        store: &ParamStore,
        features: &Tensor2,
        sets: &[Vec<Tensor2>],
    ) -> Result<Tensor2> {
        match self {
            TreatmentScorer::SetBased {
                invariants,
                hidden,
                out,
            } => {
                let mut parts: Vec<Tensor2> = vec![features.clone()];
                for (inv, set) in invariants.iter().zip(sets) {
                    parts.push(inv.forward(store, set)?);
                }
                let refs: Vec<&Tensor2> = parts.iter().collect();
                let h = hidden.forward(store, &concat_plain(&refs)?)?;
                out.forward(store, &h)
            }
            TreatmentScorer::Flat { embed, hidden, out } => {
                let mut parts: Vec<&Tensor2> = Vec::new();
                for set in sets {
                    for element in set {
                        parts.push(element);
                    }
                }
                let e = embed.forward(store, &concat_plain(&parts)?)?;
                let h = hidden.forward(store, &concat_plain(&[features, &e])?)?;
                out.forward(store, &h)
            }
        }
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        sets: &[Vec<Var>],
    ) -> Result<Var> {
        match self {
            TreatmentScorer::SetBased {
                invariants,
                hidden,
                out,
            } => {
                let mut parts = vec![features];
                for (inv, set) in invariants.iter().zip(sets) {
                    parts.push(inv.forward_tape(tape, store, set)?);
                }
                let cat = tape.concat_cols(&parts)?;
                let h = hidden.forward_tape(tape, store, cat)?;
                out.forward_tape(tape, store, h)
            }
            TreatmentScorer::Flat { embed, hidden, out } => {
                let parts: Vec<Var> = sets.iter().flatten().copied().collect();
                let cat = tape.concat_cols(&parts)?;
                let e = embed.forward_tape(tape, store, cat)?;
                let he = tape.concat_cols(&[features, e])?;
                let h = hidden.forward_tape(tape, store, he)?;
                out.forward_tape(tape, store, h)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            TreatmentScorer::SetBased {
                invariants,
                hidden,
                out,
            } => {
                let mut ids: Vec<ParamId> =
                    invariants.iter().flat_map(|l| l.param_ids()).collect();
                ids.extend(hidden.param_ids());
                ids.extend(out.param_ids());
                ids
            }
            TreatmentScorer::Flat { embed, hidden, out } => {
                let mut ids: Vec<ParamId> = embed.param_ids().to_vec();
                ids.extend(hidden.param_ids());
                ids.extend(out.param_ids());
                ids
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamId)> {
        match self {
            TreatmentScorer::SetBased {
                invariants,
                hidden,
                out,
            } => {
                let mut names: Vec<(String, ParamId)> = invariants
                    .iter()
                    .enumerate()
                    .flat_map(|(w, l)| named(&format!("{prefix}.inv{w}.phi"), &l.phi))
                    .collect();
                names.extend(named(&format!("{prefix}.hidden"), hidden));
                names.extend(named(&format!("{prefix}.out"), out));
                names
            }
            TreatmentScorer::Flat { embed, hidden, out } => {
                let mut names = named(&format!("{prefix}.embed"), embed);
                names.extend(named(&format!("{prefix}.hidden"), hidden));
                names.extend(named(&format!("{prefix}.out"), out));
                names
            }
        }
    }
}

fn equivariant_named(prefix: &str, layer: &EquivariantLayer) -> Vec<(String, ParamId)> {
    let mut out = vec![
        (format!("{prefix}.lambda"), layer.lambda),
        (format!("{prefix}.gamma"), layer.gamma),
    ];
    if let Some(theta) = layer.theta {
        out.push((format!("{prefix}.theta"), theta));
    }
    out
}

/// Dosage-level scorer for one treatment: which slot of the set is factual.
#[derive(Debug, Clone)]
pub enum DosageScorer {
    SetBased {
        eq1: EquivariantLayer,
        eq2: EquivariantLayer,
        readout: DenseLayer,
    },
    Flat {
        hidden: DenseLayer,
        out: DenseLayer,
    },
}

impl DosageScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        feature_dim: usize,
        set_size: usize,
        eqv_dim: usize,
        hidden: usize,
        inv_eqv: bool,
    ) -> Self {
        if inv_eqv {
            DosageScorer::SetBased {
                eq1: EquivariantLayer::new(store, rng, 2, eqv_dim, Some(feature_dim), Activation::Relu),
                eq2: EquivariantLayer::new(store, rng, eqv_dim, eqv_dim, None, Activation::Relu),
                readout: DenseLayer::new(store, rng, eqv_dim, 1, Activation::Identity),
            }
        } else {
            DosageScorer::Flat {
                hidden: DenseLayer::new(
                    store,
                    rng,
                    feature_dim + 2 * set_size,
                    hidden,
                    Activation::Relu,
                ),
                out: DenseLayer::new(store, rng, hidden, set_size, Activation::Softmax),
            }
        }
    }

    pub fn forward_plain(
        &self,
        store: &ParamStore,
        features: &Tensor2,
        set: &[Tensor2],
    ) -> Result<Tensor2> {
        match self {
            DosageScorer::SetBased { eq1, eq2, readout } => {
                let h1 = eq1.forward(store, set, Some(features))?;
                let h2 = eq2.forward(store, &h1, None)?;
                let scores: Vec<Tensor2> = h2
                    .iter()
                    .map(|el| readout.forward(store, el))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor2> = scores.iter().collect();
                Ok(softmax_rows_value(&concat_plain(&refs)?))
            }
            DosageScorer::Flat { hidden, out } => {
                let mut parts: Vec<&Tensor2> = vec![features];
                parts.extend(set.iter());
                let h = hidden.forward(store, &concat_plain(&parts)?)?;
                out.forward(store, &h)
            }
        }
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        set: &[Var],
    ) -> Result<Var> {
        match self {
            DosageScorer::SetBased { eq1, eq2, readout } => {
                let h1 = eq1.forward_tape(tape, store, set, Some(features))?;
                let h2 = eq2.forward_tape(tape, store, &h1, None)?;
                let scores: Vec<Var> = h2
                    .iter()
                    .map(|&el| readout.forward_tape(tape, store, el))
                    .collect::<Result<_>>()?;
                let cat = tape.concat_cols(&scores)?;
                Ok(tape.softmax_rows(cat))
            }
            DosageScorer::Flat { hidden, out } => {
                let mut parts = vec![features];
                parts.extend_from_slice(set);
                let cat = tape.concat_cols(&parts)?;
                let h = hidden.forward_tape(tape, store, cat)?;
                out.forward_tape(tape, store, h)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            DosageScorer::SetBased { eq1, eq2, readout } => {
                let mut ids = eq1.param_ids();
                ids.extend(eq2.param_ids());
                ids.extend(readout.param_ids());
                ids
            }
            DosageScorer::Flat { hidden, out } => {
                let mut ids: Vec<ParamId> = hidden.param_ids().to_vec();
                ids.extend(out.param_ids());
                ids
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamId)> {
        match self {
            DosageScorer::SetBased { eq1, eq2, readout } => {
                let mut names = equivariant_named(&format!("{prefix}.eq1"), eq1);
                names.extend(equivariant_named(&format!("{prefix}.eq2"), eq2));
                names.extend(named(&format!("{prefix}.readout"), readout));
                names
            }
            DosageScorer::Flat { hidden, out } => {
                let mut names = named(&format!("{prefix}.hidden"), hidden);
                names.extend(named(&format!("{prefix}.out"), out));
                names
            }
        }
    }
}

/// Joint scorer over every `(treatment, slot)` position at once.
#[derive(Debug, Clone)]
pub enum SingleScorer {
    SetBased {
        invariants: Vec<InvariantLayer>,
        eq1: Vec<EquivariantLayer>,
        eq2: Vec<EquivariantLayer>,
        readouts: Vec<DenseLayer>,
    },
    Flat {
        hidden: DenseLayer,
        out: DenseLayer,
    },
}

impl SingleScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        feature_dim: usize,
        num_treatments: usize,
        set_size: usize,
        inv_dim: usize,
        eqv_dim: usize,
        hidden: usize,
        inv_eqv: bool,
    ) -> Self {
        if inv_eqv {
            let aux_dim = feature_dim + num_treatments * inv_dim;
            SingleScorer::SetBased {
                invariants: (0..num_treatments)
                    .map(|_| InvariantLayer::new(store, rng, 2, inv_dim, Activation::Relu))
                    .collect(),
                eq1: (0..num_treatments)
                    .map(|_| {
                        EquivariantLayer::new(store, rng, 2, eqv_dim, Some(aux_dim), Activation::Relu)
                    })
                    .collect(),
                eq2: (0..num_treatments)
                    .map(|_| EquivariantLayer::new(store, rng, eqv_dim, eqv_dim, None, Activation::Relu))
                    .collect(),
                readouts: (0..num_treatments)
                    .map(|_| DenseLayer::new(store, rng, eqv_dim, 1, Activation::Identity))
                    .collect(),
            }
        } else {
            let total = num_treatments * set_size;
            SingleScorer::Flat {
                hidden: DenseLayer::new(store, rng, feature_dim + 2 * total, hidden, Activation::Relu),
                out: DenseLayer::new(store, rng, hidden, total, Activation::Softmax),
            }
        }
    }

    /// Probabilities over all positions, treatment-major slot order.
    pub fn forward_plain(
        &self,
        store: &ParamStore,
        features: &Tensor2,
        sets: &[Vec<Tensor2>],
    ) -> Result<Tensor2> {
        match self {
            SingleScorer::SetBased {
                invariants,
                eq1,
                eq2,
                readouts,
            } => {
                let mut summary_parts: Vec<Tensor2> = vec![features.clone()];
                for (inv, set) in invariants.iter().zip(sets) {
                    summary_parts.push(inv.forward(store, set)?);
                }
                let refs: Vec<&Tensor2> = summary_parts.iter().collect();
                let aux = concat_plain(&refs)?;
                let mut scores: Vec<Tensor2> = Vec::new();
                for w in 0..sets.len() {
                    let h1 = eq1[w].forward(store, &sets[w], Some(&aux))?;
                    let h2 = eq2[w].forward(store, &h1, None)?;
                    for el in &h2 {
                        scores.push(readouts[w].forward(store, el)?);
                    }
                }
                let refs: Vec<&Tensor2> = scores.iter().collect();
                Ok(softmax_rows_value(&concat_plain(&refs)?))
            }
            SingleScorer::Flat { hidden, out } => {
                let mut parts: Vec<&Tensor2> = vec![features];
                for set in sets {
                    parts.extend(set.iter());
                }
                let h = hidden.forward(store, &concat_plain(&parts)?)?;
                out.forward(store, &h)
            }
        }
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        sets: &[Vec<Var>],
    ) -> Result<Var> {
        match self {
            SingleScorer::SetBased {
                invariants,
                eq1,
                eq2,
                readouts,
            } => {
                let mut summary_parts = vec![features];
                for (inv, set) in invariants.iter().zip(sets) {
                    summary_parts.push(inv.forward_tape(tape, store, set)?);
                }
                let aux = tape.concat_cols(&summary_parts)?;
                let mut scores: Vec<Var> = Vec::new();
                for w in 0..sets.len() {
                    let h1 = eq1[w].forward_tape(tape, store, &sets[w], Some(aux))?;
                    let h2 = eq2[w].forward_tape(tape, store, &h1, None)?;
                    for &el in &h2 {
                        scores.push(readouts[w].forward_tape(tape, store, el)?);
                    }
                }
                let cat = tape.concat_cols(&scores)?;
                Ok(tape.softmax_rows(cat))
            }
            SingleScorer::Flat { hidden, out } => {
                let mut parts = vec![features];
                for set in sets {
                    parts.extend_from_slice(set);
                }
                let cat = tape.concat_cols(&parts)?;
                let h = hidden.forward_tape(tape, store, cat)?;
                out.forward_tape(tape, store, h)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            SingleScorer::SetBased {
                invariants,
                eq1,
                eq2,
                readouts,
            } => {
                let mut ids: Vec<ParamId> =
                    invariants.iter().flat_map(|l| l.param_ids()).collect();
                ids.extend(eq1.iter().flat_map(|l| l.param_ids()));
                ids.extend(eq2.iter().flat_map(|l| l.param_ids()));
                ids.extend(readouts.iter().flat_map(|l| l.param_ids()));
                ids
            }
            SingleScorer::Flat { hidden, out } => {
                let mut ids: Vec<ParamId> = hidden.param_ids().to_vec();
                ids.extend(out.param_ids());
                ids
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamId)> {
        match self {
            SingleScorer::SetBased {
                invariants,
                eq1,
                eq2,
                readouts,
            } => {
                let mut names: Vec<(String, ParamId)> = Vec::new();
                for (w, l) in invariants.iter().enumerate() {
                    names.extend(named(&format!("{prefix}.inv{w}.phi"), &l.phi));
                }
                for (w, l) in eq1.iter().enumerate() {
                    names.extend(equivariant_named(&format!("{prefix}.eq1_{w}"), l));
                }
                for (w, l) in eq2.iter().enumerate() {
                    names.extend(equivariant_named(&format!("{prefix}.eq2_{w}"), l));
                }
                for (w, l) in readouts.iter().enumerate() {
                    names.extend(named(&format!("{prefix}.readout{w}"), l));
                }
                names
            }
            SingleScorer::Flat { hidden, out } => {
                let mut names = named(&format!("{prefix}.hidden"), hidden);
                names.extend(named(&format!("{prefix}.out"), out));
                names
            }
        }
    }
}

/// The discriminator side of the game, in either architecture.
#[derive(Debug, Clone)]
pub enum Discriminator {
    Hierarchical {
        treatment: TreatmentScorer,
        dosage: Vec<DosageScorer>,
    },
    Single(SingleScorer),
}

/// Discriminator outputs for one batch.
pub enum DiscProbs {
    Hierarchical { p_w: Tensor2, p_d: Vec<Tensor2> },
    Single(Tensor2),
}

pub enum DiscProbVars {
    Hierarchical { p_w: Var, p_d: Vec<Var> },
    Single(Var),
}

impl Discriminator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        feature_dim: usize,
        num_treatments: usize,
        set_size: usize,
        inv_dim: usize,
        eqv_dim: usize,
        hidden: usize,
        variant: Variant,
    ) -> Self {
        if variant.hierarchical {
            Discriminator::Hierarchical {
                treatment: TreatmentScorer::new(
                    store,
                    rng,
                    feature_dim,
                    num_treatments,
                    set_size,
                    inv_dim,
                    hidden,
                    variant.inv_eqv,
                ),
                dosage: (0..num_treatments)
                    .map(|_| {
                        DosageScorer::new(
                            store,
                            rng,
                            feature_dim,
                            set_size,
                            eqv_dim,
                            hidden,
                            variant.inv_eqv,
                        )
                    })
                    .collect(),
            }
        } else {
            Discriminator::Single(SingleScorer::new(
                store,
                rng,
                feature_dim,
                num_treatments,
                set_size,
                inv_dim,
                eqv_dim,
                hidden,
                variant.inv_eqv,
            ))
        }
    }

    pub fn forward_plain(
        &self,
        store: &ParamStore,
        features: &Tensor2,
        sets: &[Vec<Tensor2>],
    ) -> Result<DiscProbs> {
        match self {
            Discriminator::Hierarchical { treatment, dosage } => Ok(DiscProbs::Hierarchical {
                p_w: treatment.forward_plain(store, features, sets)?,
                p_d: dosage
                    .iter()
                    .zip(sets)
                    .map(|(scorer, set)| scorer.forward_plain(store, features, set))
                    .collect::<Result<_>>()?,
            }),
            Discriminator::Single(scorer) => {
                Ok(DiscProbs::Single(scorer.forward_plain(store, features, sets)?))
            }
        }
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        sets: &[Vec<Var>],
    ) -> Result<DiscProbVars> {
        match self {
            Discriminator::Hierarchical { treatment, dosage } => Ok(DiscProbVars::Hierarchical {
                p_w: treatment.forward_tape(tape, store, features, sets)?,
                p_d: dosage
                    .iter()
                    .zip(sets)
                    .map(|(scorer, set)| scorer.forward_tape(tape, store, features, set))
                    .collect::<Result<_>>()?,
            }),
            Discriminator::Single(scorer) => Ok(DiscProbVars::Single(
                scorer.forward_tape(tape, store, features, sets)?,
            )),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Discriminator::Hierarchical { treatment, dosage } => {
                let mut ids = treatment.param_ids();
                ids.extend(dosage.iter().flat_map(|d| d.param_ids()));
                ids
            }
            Discriminator::Single(scorer) => scorer.param_ids(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        match self {
            Discriminator::Hierarchical { treatment, dosage } => {
                let mut names = treatment.named_params("disc.treatment");
                for (w, d) in dosage.iter().enumerate() {
                    names.extend(d.named_params(&format!("disc.dosage{w}")));
                }
                names
            }
            Discriminator::Single(scorer) => scorer.named_params("disc.single"),
        }
    }
}
