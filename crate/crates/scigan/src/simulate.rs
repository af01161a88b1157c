//! Semi-synthetic dose-response data.
//!
//! Each treatment carries three random unit-norm parameter vectors and one
//! of three response shapes over dosage `d` in `[0, 1]` (scaled by `C`):
//!
//! - quadratic:  `C * (v1.x + 12 v2.x d - 12 v3.x d^2)`
//! - sinusoidal: `C * (v1.x + sin(pi * (v2.x / v3.x) * d))`
//! - cubic-kink: `C * (v1.x + 12 d (d - b)^2)` with `b = 0.75 v2.x / v3.x`
//!
//! Observational coupling: per treatment the factual dosage is drawn from a
//! Beta distribution whose mode sits at that treatment's optimal dosage
//! (strength `alpha`), and the factual treatment is drawn from a softmax
//! over the responses at those dosages (strength `kappa`). Setting
//! `alpha = 1` / `kappa = 0` removes dosage / treatment bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::{self, RunRng};
use crate::tensor::{dot, l2_norm, Tensor2};

/// Ratio guard: denominators below this magnitude are clamped.
const DENOM_FLOOR: f64 = 1e-8;
/// Ratios are clamped to `[-RATIO_CAP, RATIO_CAP]`.
const RATIO_CAP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseShape {
    Quadratic,
    Sinusoidal,
    Cubic,
}

impl ResponseShape {
    /// Default assignment: treatment `w` cycles through the three shapes.
    pub fn for_treatment(w: usize) -> ResponseShape {
        match w % 3 {
            0 => ResponseShape::Quadratic,
            1 => ResponseShape::Sinusoidal,
            _ => ResponseShape::Cubic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreatmentParams {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    pub shape: ResponseShape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub num_treatments: usize,
    /// Global outcome scale `C`.
    pub outcome_scale: f64,
    /// Dosage-assignment bias strength; `1` means uniform dosages.
    pub alpha: f64,
    /// Treatment-assignment bias strength; `0` means uniform treatments.
    pub kappa: f64,
    /// Standard deviation of the additive outcome noise.
    pub noise_sd: f64,
    /// Optional explicit shape per treatment (defaults to cycling).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_override: Option<Vec<ResponseShape>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            num_treatments: 3,
            outcome_scale: 10.0,
            alpha: 2.0,
            kappa: 2.0,
            noise_sd: 0.2,
            shape_override: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_treatments == 0 {
            return Err(Error::contract("SimulationConfig", "num_treatments must be >= 1"));
        }
        if !(self.outcome_scale > 0.0) {
            return Err(Error::contract("SimulationConfig", "outcome_scale must be positive"));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::contract("SimulationConfig", "alpha must be >= 1"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::contract("SimulationConfig", "kappa must be >= 0"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::contract("SimulationConfig", "noise_sd must be >= 0"));
        }
        if let Some(shapes) = &self.shape_override {
            if shapes.len() != self.num_treatments {
                return Err(Error::contract(
                    "SimulationConfig",
                    format!(
                        "shape_override has {} entries for {} treatments",
                        shapes.len(),
                        self.num_treatments
                    ),
                ));
            }
        }
        Ok(())
    }

    fn shape_for(&self, w: usize) -> ResponseShape {
        match &self.shape_override {
            Some(shapes) => shapes[w],
            None => ResponseShape::for_treatment(w),
        }
    }
}

/// Noiseless ground truth: per-treatment parameters plus the generating config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseModel {
    pub config: SimulationConfig,
    pub params: Vec<TreatmentParams>,
}

// Positive entries keep vᵀx bounded away from zero for non-negative feature
// rows, so the f₂/f₃ ratios stay in a moderate range instead of Cauchy tails.
fn unit_positive_vector(rng: &mut RunRng, p: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| random::uniform01(rng)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Clamped ratio `num / den` with a signed floor on the denominator.
fn safe_ratio(num: f64, den: f64) -> f64 {
    let den = if den.abs() < DENOM_FLOOR {
        if den < 0.0 {
            -DENOM_FLOOR
        } else {
            DENOM_FLOOR
        }
    } else {
        den
    };
    (num / den).clamp(-RATIO_CAP, RATIO_CAP)
}

impl ResponseModel {
    /// Draw per-treatment parameter vectors (unit-norm, positive entries).
    pub fn sample(config: SimulationConfig, feature_dim: usize, rng: &mut RunRng) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::contract("ResponseModel::sample", "feature_dim must be >= 1"));
        }
        let params = (0..config.num_treatments)
            .map(|w| TreatmentParams {
                v1: unit_positive_vector(rng, feature_dim),
                v2: unit_positive_vector(rng, feature_dim),
                v3: unit_positive_vector(rng, feature_dim),
                shape: config.shape_for(w),
            })
            .collect();
        Ok(ResponseModel { config, params })
    }

    pub fn num_treatments(&self) -> usize {
        self.params.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.params.first().map_or(0, |t| t.v1.len())
    }

    fn check_treatment(&self, w: usize, context: &str) -> Result<&TreatmentParams> {
        self.params.get(w).ok_or_else(|| {
            Error::contract(
                context,
                format!("unknown treatment index {} (have {})", w, self.params.len()),
            )
        })
    }

    /// Noiseless response of treatment `w` at dosage `d`.
    pub fn response(&self, w: usize, x: &[f64], d: f64) -> Result<f64> {
        let t = self.check_treatment(w, "ResponseModel::response")?;
        if x.len() != t.v1.len() {
            return Err(Error::dimension(
                "ResponseModel::response",
                format!("x has {} features, model expects {}", x.len(), t.v1.len()),
            ));
        }
        let c = self.config.outcome_scale;
        let (a1, a2, a3) = (dot(&t.v1, x), dot(&t.v2, x), dot(&t.v3, x));
        let value = match t.shape {
            ResponseShape::Quadratic => a1 + 12.0 * a2 * d - 12.0 * a3 * d * d,
            ResponseShape::Sinusoidal => {
                let ratio = safe_ratio(a2, a3);
                a1 + (std::f64::consts::PI * ratio * d).sin()
            }
            ResponseShape::Cubic => {
                let b = 0.75 * safe_ratio(a2, a3);
                a1 + 12.0 * d * (d - b) * (d - b)
            }
        };
        Ok(c * value)
    }

    /// Closed-form dosage maximizing the response; with multiple global
    /// maximizers the lowest dosage is returned.
    pub fn optimal_dosage(&self, w: usize, x: &[f64]) -> Result<f64> {
        let t = self.check_treatment(w, "ResponseModel::optimal_dosage")?;
        let (a2, a3) = (dot(&t.v2, x), dot(&t.v3, x));
        match t.shape {
            ResponseShape::Quadratic => {
                // Vertex of the parabola, compared against the endpoints.
                let vertex = safe_ratio(a2, 2.0 * a3).clamp(0.0, 1.0);
                let mut best = 0.0;
                let mut best_value = self.response(w, x, 0.0)?;
                for d in [vertex, 1.0] {
                    let value = self.response(w, x, d)?;
                    if value > best_value {
                        best = d;
                        best_value = value;
                    }
                }
                Ok(best)
            }
            ResponseShape::Sinusoidal => {
                // sin(pi r d): for r > 0 the first peak sits at 1/(2r) (or the
                // curve is still rising at d = 1). For r < 0 the first peak of
                // -sin(pi |r| d) sits at 1.5/|r|; before that the best value is
                // an endpoint.
                let r = safe_ratio(a2, a3);
                if r > 0.0 {
                    Ok((1.0 / (2.0 * r)).min(1.0))
                } else if r < 0.0 {
                    let a = -r;
                    if a >= 1.5 {
                        Ok(1.5 / a)
                    } else if a > 1.0 {
                        Ok(1.0)
                    } else {
                        Ok(0.0)
                    }
                } else {
                    Ok(0.0)
                }
            }
            ResponseShape::Cubic => {
                // 12 d (d - b)^2 has a local peak at d = b/3; it beats the
                // endpoint d = 1 exactly when b >= 0.75.
                let b = 0.75 * safe_ratio(a2, a3);
                if b >= 0.75 {
                    Ok((b / 3.0).min(1.0))
                } else {
                    Ok(1.0)
                }
            }
        }
    }
}

/// Beta shape parameter targeting mode `d_star` at strength `alpha`.
/// Returns `(beta, flipped)`; when `d_star` is zero the draw is mirrored
/// (`1 - Beta`) with the parameters of mode one.
pub fn dosage_beta_param(alpha: f64, d_star: f64) -> (f64, bool) {
    if d_star <= 0.0 {
        // Mirrored draw with d_star = 1: beta = (alpha - 1) + 2 - alpha = 1.
        (1.0, true)
    } else {
        ((alpha - 1.0) / d_star + 2.0 - alpha, false)
    }
}

/// Draw a factual dosage whose distribution has mode `d_star`.
pub fn assign_dosage(rng: &mut RunRng, alpha: f64, d_star: f64) -> f64 {
    let (beta_param, flipped) = dosage_beta_param(alpha, d_star);
    let draw = random::beta(rng, alpha, beta_param);
    if flipped {
        1.0 - draw
    } else {
        draw
    }
}

/// Softmax over `kappa * responses`, then a categorical draw.
pub fn assign_treatment(rng: &mut RunRng, kappa: f64, responses: &[f64]) -> usize {
    let probs = softmax_scaled(kappa, responses);
    random::categorical(rng, &probs)
}

pub fn softmax_scaled(kappa: f64, values: &[f64]) -> Vec<f64> {
    let max = values
        .iter()
        .map(|&v| kappa * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (kappa * v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor2,
    pub w_f: Vec<usize>,
    pub d_f: Vec<f64>,
    pub y_f: Vec<f64>,
    pub num_treatments: usize,
    pub split: SplitIndices,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }
}

/// 64 / 16 / 20 split of a shuffled index permutation.
fn split_indices(n: usize, rng: &mut RunRng) -> SplitIndices {
    let mut order: Vec<usize> = (0..n).collect();
    random::shuffle(rng, &mut order);
    let n_train = (n as f64 * 0.64).floor() as usize;
    let n_val = (n as f64 * 0.16).floor() as usize;
    SplitIndices {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Generate factual observations for the given features.
pub fn make_dataset(features: &Tensor2, model: &ResponseModel, rng: &mut RunRng) -> Result<Dataset> {
    if features.cols() != model.feature_dim() {
        return Err(Error::dimension(
            "make_dataset",
            format!(
                "features have {} columns, model expects {}",
                features.cols(),
                model.feature_dim()
            ),
        ));
    }
    let n = features.rows();
    let k = model.num_treatments();
    let cfg = &model.config;
    let mut w_f = Vec::with_capacity(n);
    let mut d_f = Vec::with_capacity(n);
    let mut y_f = Vec::with_capacity(n);
    for i in 0..n {
        let x = features.row(i);
        let mut dosages = Vec::with_capacity(k);
        let mut responses = Vec::with_capacity(k);
        for w in 0..k {
            let d_star = model.optimal_dosage(w, x)?;
            let d = assign_dosage(rng, cfg.alpha, d_star);
            dosages.push(d);
            responses.push(model.response(w, x, d)?);
        }
        let w = assign_treatment(rng, cfg.kappa, &responses);
        let y = responses[w] + random::normal(rng, 0.0, cfg.noise_sd);
        w_f.push(w);
        d_f.push(dosages[w]);
        y_f.push(y);
    }
    let split = split_indices(n, rng);
    Ok(Dataset {
        x: features.clone(),
        w_f,
        d_f,
        y_f,
        num_treatments: k,
        split,
    })
}

/// Random features: uniform `[0, 1)` entries with L2-normalized rows.
pub fn synth_features(rng: &mut RunRng, n: usize, p: usize) -> Result<Tensor2> {
    if n == 0 || p == 0 {
        return Err(Error::contract("synth_features", "n and p must be >= 1"));
    }
    let mut x = Tensor2::zeros(n, p);
    for r in 0..n {
        let row = x.row_mut(r);
        for v in row.iter_mut() {
            *v = random::uniform01(rng);
        }
        let norm = l2_norm(row);
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            row[0] = 1.0;
        }
    }
    Ok(x)
}

/// Load a headerless numeric CSV of features and L2-normalize its rows.
pub fn load_features(path: &Path) -> Result<Tensor2> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::parse(&name, line_no, format!("not a number: {:?}", field.trim()))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    &name,
                    line_no,
                    format!("expected {} fields, got {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(&name, 1, "no feature rows"));
    }
    let mut x = Tensor2::from_rows(&rows)?;
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let norm = l2_norm(row);
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(x)
}

/// Evenly spaced dosage grid with `levels` points covering `[0, 1]`.
pub fn dosage_grid(levels: usize) -> Result<Vec<f64>> {
    if levels < 2 {
        return Err(Error::contract("dosage_grid", "need at least 2 levels"));
    }
    Ok((0..levels)
        .map(|k| k as f64 / (levels - 1) as f64)
        .collect())
}

/// Snap each factual dosage to the nearest grid point (ties to the lower).
/// The recorded outcome is shifted by the change in the noiseless response
/// so it stays consistent with the snapped dosage while keeping the original
/// noise realization.
pub fn discretize_dosages(
    dataset: &Dataset,
    model: &ResponseModel,
    beta_levels: usize,
) -> Result<Dataset> {
    let grid = dosage_grid(beta_levels)?;
    let mut out = dataset.clone();
    for i in 0..out.n() {
        let snapped = snap_to_grid(out.d_f[i], &grid);
        let x = dataset.x.row(i);
        let w = out.w_f[i];
        out.y_f[i] += model.response(w, x, snapped)? - model.response(w, x, out.d_f[i])?;
        out.d_f[i] = snapped;
    }
    Ok(out)
}

fn snap_to_grid(d: f64, grid: &[f64]) -> f64 {
    let step = grid[1] - grid[0];
    let t = (d.clamp(0.0, 1.0)) / step;
    let lo = (t.floor() as usize).min(grid.len() - 1);
    let hi = (lo + 1).min(grid.len() - 1);
    // Ties go to the lower grid point.
    if t - lo as f64 <= hi as f64 - t {
        grid[lo]
    } else {
        grid[hi]
    }
}

/// Everything needed to regenerate ground truth alongside a saved dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n: usize,
    pub feature_dim: usize,
    pub model: ResponseModel,
    /// Discrete dosage levels the bundle was snapped to, if any.
    #[serde(default)]
    pub beta_levels: Option<usize>,
    /// True when neither dosages nor treatments were assigned with bias.
    #[serde(default)]
    pub unbiased: bool,
}

impl Manifest {
    pub fn new(
        seed: u64,
        n: usize,
        feature_dim: usize,
        model: ResponseModel,
        beta_levels: Option<usize>,
    ) -> Manifest {
        let unbiased = model.config.alpha == 1.0 && model.config.kappa == 0.0;
        Manifest {
            seed,
            n,
            feature_dim,
            model,
            beta_levels,
            unbiased,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract("Manifest::save", e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
    }
}

/// Write the dataset as a CSV bundle:
/// `sample_id,x0..x{p-1},w_f,d_f,y_f,split`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("sample_id");
    for j in 0..dataset.feature_dim() {
        out.push_str(&format!(",x{j}"));
    }
    out.push_str(",w_f,d_f,y_f,split\n");
    let mut split_of = vec![""; dataset.n()];
    for &i in &dataset.split.train {
        split_of[i] = "train";
    }
    for &i in &dataset.split.validation {
        split_of[i] = "validation";
    }
    for &i in &dataset.split.test {
        split_of[i] = "test";
    }
    for i in 0..dataset.n() {
        out.push_str(&i.to_string());
        for &v in dataset.x.row(i) {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            dataset.w_f[i], dataset.d_f[i], dataset.y_f[i], split_of[i]
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a CSV bundle produced by [`save_dataset`]. `num_treatments`
/// defaults to `max(w_f) + 1` when not supplied.
pub fn load_dataset(path: &Path, num_treatments: Option<usize>) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "empty file"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() < 5 || fields[0] != "sample_id" || *fields.last().unwrap() != "split" {
        return Err(Error::parse(&name, 1, "unrecognized dataset header"));
    }
    let p = fields.len() - 5;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut w_f = Vec::new();
    let mut d_f = Vec::new();
    let mut y_f = Vec::new();
    let mut split = SplitIndices {
        train: vec![],
        validation: vec![],
        test: vec![],
    };
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != fields.len() {
            return Err(Error::parse(
                &name,
                line_no,
                format!("expected {} fields, got {}", fields.len(), parts.len()),
            ));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(&name, line_no, format!("bad {what}: {s:?}")))
        };
        let row: Vec<f64> = parts[1..1 + p]
            .iter()
            .map(|s| parse_f(s, "feature"))
            .collect::<Result<_>>()?;
        let i = rows.len();
        rows.push(row);
        let w = parts[1 + p]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::parse(&name, line_no, format!("bad treatment {:?}", parts[1 + p])))?;
        w_f.push(w);
        d_f.push(parse_f(parts[2 + p], "dosage")?);
        y_f.push(parse_f(parts[3 + p], "outcome")?);
        match parts[4 + p].trim() {
            "train" => split.train.push(i),
            "validation" => split.validation.push(i),
            "test" => split.test.push(i),
            other => {
                return Err(Error::parse(&name, line_no, format!("bad split {other:?}")));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(&name, 1, "no data rows"));
    }
    let k = match num_treatments {
        Some(k) => k,
        None => w_f.iter().copied().max().unwrap_or(0) + 1,
    };
    if let Some(&bad) = w_f.iter().find(|&&w| w >= k) {
        return Err(Error::contract(
            "load_dataset",
            format!("treatment index {bad} out of range for {k} treatments"),
        ));
    }
    Ok(Dataset {
        x: Tensor2::from_rows(&rows)?,
        w_f,
        d_f,
        y_f,
        num_treatments: k,
        split,
    })
}
