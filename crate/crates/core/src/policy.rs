//! Gaussian MLP actor and MLP critic over flat parameter vectors.
//!
//! Flat layout: for each layer in order, the weight matrix row-major
//! (`fan_out × fan_in`) followed by its bias. The actor appends one
//! state-independent log-std entry per action dimension after the MLP block.
//! Hidden layers use tanh; the output layer is linear.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, norm, sample_gaussian, RngStream};
use crate::rollout::RolloutBatch;

pub const CHECKPOINT_FORMAT: &str = "rampsafe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("all network dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    w_offset: offset,
                    b_offset: offset + w[0] * w[1],
                };
                offset = shape.b_offset + w[1];
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.b_offset + l.fan_out)
    }
}

/// Per-layer view of a flat vector; `weights[l]` is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub log_std: Vec<f64>,
}

/// Activations of one forward pass; `acts[0]` is the input, the last entry
/// the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds the input at least")
    }
}

/// Flat MLP evaluation shared by actor and critic.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<LayerShape>,
    len: usize,
}

impl Mlp {
    fn new(spec: &MlpSpec) -> Self {
        Self {
            layers: spec.layers(),
            len: spec.param_count(),
        }
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, shape) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let out: Vec<f64> = (0..shape.fan_out)
                .map(|i| {
                    let row = &params[shape.w_offset + i * shape.fan_in..][..shape.fan_in];
                    let z = params[shape.b_offset + i] + dot(row, input);
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        ForwardCache { acts }
    }

    /// Accumulates `dout·∂out/∂params` into `grad[..len]`.
    fn backward(&self, params: &[f64], cache: &ForwardCache, dout: &[f64], grad: &mut [f64]) {
        let mut dz = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let input = &cache.acts[l];
            for (i, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[shape.w_offset + i * shape.fan_in..][..shape.fan_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[shape.b_offset + i] += d;
            }
            if l == 0 {
                break;
            }
            let mut dx = vec![0.0; shape.fan_in];
            for (i, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &params[shape.w_offset + i * shape.fan_in..][..shape.fan_in];
                for (acc, &w) in dx.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            // Previous layer is hidden, so its activation is tanh.
            for (d, &a) in dx.iter_mut().zip(input) {
                *d *= 1.0 - a * a;
            }
            dz = dx;
        }
    }

    fn init(&self, output_scale: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        let last = self.layers.len() - 1;
        for (l, shape) in self.layers.iter().enumerate() {
            let limit = (6.0 / (shape.fan_in + shape.fan_out) as f64).sqrt();
            let gain = if l == last { output_scale } else { 1.0 };
            for w in &mut p[shape.w_offset..shape.b_offset] {
                *w = gain * rng.uniform(-limit, limit);
            }
        }
        p
    }

    fn unflatten(&self, flat: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.layers
            .iter()
            .map(|s| {
                (
                    flat[s.w_offset..s.b_offset].to_vec(),
                    flat[s.b_offset..s.b_offset + s.fan_out].to_vec(),
                )
            })
            .unzip()
    }

    fn flatten(&self, weights: &[Vec<f64>], biases: &[Vec<f64>]) -> Result<Vec<f64>> {
        ensure_dim(self.layers.len(), weights.len())?;
        ensure_dim(self.layers.len(), biases.len())?;
        let mut flat = Vec::with_capacity(self.len);
        for ((s, w), b) in self.layers.iter().zip(weights).zip(biases) {
            ensure_dim(s.fan_in * s.fan_out, w.len())?;
            ensure_dim(s.fan_out, b.len())?;
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        Ok(flat)
    }
}

/// Actor parameters: MLP block followed by the log-std tail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: MlpSpec,
    pub theta: Vec<f64>,
    #[serde(skip)]
    mlp: Option<MlpCell>,
}

/// Critic parameters with a single linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticParams {
    pub spec: MlpSpec,
    pub phi: Vec<f64>,
    #[serde(skip)]
    mlp: Option<MlpCell>,
}

// Derived layout, cached; equality ignores it.
#[derive(Debug, Clone)]
struct MlpCell(Mlp);

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.theta == other.theta
    }
}

impl PartialEq for CriticParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.phi == other.phi
    }
}

impl PolicyParams {
    pub fn new(spec: MlpSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let mlp = Mlp::new(&spec);
        ensure_dim(mlp.len + spec.output_dim, theta.len())?;
        Ok(Self {
            spec,
            theta,
            mlp: Some(MlpCell(mlp)),
        })
    }

    /// Glorot-uniform hidden weights, output weights scaled by
    /// `output_scale`, zero biases, constant log-std.
    pub fn init(spec: MlpSpec, init_log_std: f64, output_scale: f64, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mlp = Mlp::new(&spec);
        let mut theta = mlp.init(output_scale, rng);
        theta.extend(std::iter::repeat_n(init_log_std, spec.output_dim));
        Self::new(spec, theta)
    }

    fn mlp(&self) -> std::borrow::Cow<'_, Mlp> {
        match &self.mlp {
            Some(cell) => std::borrow::Cow::Borrowed(&cell.0),
            None => std::borrow::Cow::Owned(Mlp::new(&self.spec)),
        }
    }

    /// Rebuilds the cached layout after deserialization and checks length.
    pub fn checked(mut self) -> Result<Self> {
        self.spec.validate()?;
        let mlp = Mlp::new(&self.spec);
        ensure_dim(mlp.len + self.spec.output_dim, self.theta.len())?;
        self.mlp = Some(MlpCell(mlp));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Length of the MLP block; the log-std tail starts here.
    pub fn mlp_len(&self) -> usize {
        self.theta.len() - self.spec.output_dim
    }

    pub fn log_std(&self) -> &[f64] {
        &self.theta[self.mlp_len()..]
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std().iter().map(|l| l.exp()).collect()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        ensure_dim(self.theta.len(), theta.len())?;
        Ok(Self {
            spec: self.spec.clone(),
            theta,
            mlp: self.mlp.clone(),
        })
    }

    pub fn unflatten(&self) -> LayerParams {
        let (weights, biases) = self.mlp().unflatten(&self.theta);
        LayerParams {
            weights,
            biases,
            log_std: self.log_std().to_vec(),
        }
    }

    pub fn flatten(spec: &MlpSpec, layers: &LayerParams) -> Result<Vec<f64>> {
        spec.validate()?;
        let mut flat = Mlp::new(spec).flatten(&layers.weights, &layers.biases)?;
        ensure_dim(spec.output_dim, layers.log_std.len())?;
        flat.extend_from_slice(&layers.log_std);
        Ok(flat)
    }

    fn forward_cache(&self, obs: &[f64]) -> Result<ForwardCache> {
        ensure_dim(self.obs_dim(), obs.len())?;
        Ok(self.mlp().forward(&self.theta, obs))
    }

    /// Mean and standard deviation of the action distribution at `obs`.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cache(obs)?;
        Ok((cache.output().to_vec(), self.std()))
    }

    /// `∇_θ log π(action | obs)`.
    pub fn grad_log_prob(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.action_dim(), action.len())?;
        let cache = self.forward_cache(obs)?;
        let mut grad = vec![0.0; self.dim()];
        self.accumulate_grad_log_prob(&cache, action, 1.0, &mut grad);
        Ok(grad)
    }

    fn accumulate_grad_log_prob(&self, cache: &ForwardCache, action: &[f64], weight: f64, grad: &mut [f64]) {
        let mean = cache.output();
        let split = self.mlp_len();
        let mut dmean = Vec::with_capacity(mean.len());
        for (j, ((&a, &m), &ls)) in action.iter().zip(mean).zip(self.log_std()).enumerate() {
            let inv_var = (-2.0 * ls).exp();
            let r = a - m;
            dmean.push(weight * r * inv_var);
            grad[split + j] += weight * (r * r * inv_var - 1.0);
        }
        self.mlp().backward(&self.theta, cache, &dmean, grad);
    }

    /// Rows `∂μ_j/∂θ_mlp`, one per action dimension.
    pub fn mean_jacobian(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cache(obs)?;
        let mlp = self.mlp();
        Ok((0..self.action_dim())
            .map(|j| {
                let mut dout = vec![0.0; self.action_dim()];
                dout[j] = 1.0;
                let mut row = vec![0.0; mlp.len];
                mlp.backward(&self.theta, &cache, &dout, &mut row);
                row
            })
            .collect())
    }
}

impl CriticParams {
    pub fn new(spec: MlpSpec, phi: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if spec.output_dim != 1 {
            return Err(Error::Config(format!("critic output dim must be 1, got {}", spec.output_dim)));
        }
        let mlp = Mlp::new(&spec);
        ensure_dim(mlp.len, phi.len())?;
        Ok(Self {
            spec,
            phi,
            mlp: Some(MlpCell(mlp)),
        })
    }

    pub fn init(spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let phi = Mlp::new(&spec).init(1.0, rng);
        Self::new(spec, phi)
    }

    pub fn checked(self) -> Result<Self> {
        Self::new(self.spec, self.phi)
    }

    fn mlp(&self) -> std::borrow::Cow<'_, Mlp> {
        match &self.mlp {
            Some(cell) => std::borrow::Cow::Borrowed(&cell.0),
            None => std::borrow::Cow::Owned(Mlp::new(&self.spec)),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn with_phi(&self, phi: Vec<f64>) -> Result<Self> {
        ensure_dim(self.phi.len(), phi.len())?;
        Ok(Self {
            spec: self.spec.clone(),
            phi,
            mlp: self.mlp.clone(),
        })
    }

    pub fn unflatten(&self) -> LayerParams {
        let (weights, biases) = self.mlp().unflatten(&self.phi);
        LayerParams {
            weights,
            biases,
            log_std: Vec::new(),
        }
    }

    pub fn flatten(spec: &MlpSpec, layers: &LayerParams) -> Result<Vec<f64>> {
        spec.validate()?;
        Mlp::new(spec).flatten(&layers.weights, &layers.biases)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        ensure_dim(self.spec.input_dim, obs.len())?;
        Ok(self.mlp().forward(&self.phi, obs).output()[0])
    }

    /// `mean ½(G − V(s))²` and its gradient.
    pub fn loss_and_grad(&self, obs: &[Vec<f64>], returns: &[f64]) -> Result<(f64, Vec<f64>)> {
        ensure_dim(obs.len(), returns.len())?;
        let mlp = self.mlp();
        let mut grad = vec![0.0; self.dim()];
        if obs.is_empty() {
            return Ok((0.0, grad));
        }
        let n = obs.len() as f64;
        let mut loss = 0.0;
        for (s, &g) in obs.iter().zip(returns) {
            ensure_dim(self.spec.input_dim, s.len())?;
            let cache = mlp.forward(&self.phi, s);
            let r = g - cache.output()[0];
            loss += 0.5 * r * r / n;
            mlp.backward(&self.phi, &cache, &[-r / n], &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, obs: &[Vec<f64>], returns: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(obs, returns)?.0)
    }
}

/// Diagonal-Gaussian log density.
pub fn log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((&m, &s), &a)| {
            let r = (a - m) / s;
            -0.5 * r * r - s.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

pub fn sample_action(mean: &[f64], std: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    let var: Vec<f64> = std.iter().map(|s| s * s).collect();
    sample_gaussian(rng, mean, &var)
}

/// How raw gradients are rescaled before the trust-region solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradNormalization {
    /// `∇ / ‖∇‖²`.
    #[default]
    SquaredNorm,
    /// `∇ / ‖∇‖`.
    UnitNorm,
    None,
}

/// Gradients with norm at or below this are treated as zero.
pub const ZERO_GRAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub vec: Vec<f64>,
    /// Norm before normalization.
    pub raw_norm: f64,
    /// Raw gradient was numerically zero; `vec` is all zeros.
    pub zero: bool,
}

impl GradNormalization {
    pub fn apply(self, raw: Vec<f64>) -> Gradient {
        let n = norm(&raw);
        if !(n > ZERO_GRAD_TOL) {
            return Gradient {
                vec: vec![0.0; raw.len()],
                raw_norm: n,
                zero: true,
            };
        }
        let div = match self {
            GradNormalization::SquaredNorm => n * n,
            GradNormalization::UnitNorm => n,
            GradNormalization::None => 1.0,
        };
        Gradient {
            vec: raw.into_iter().map(|v| v / div).collect(),
            raw_norm: n,
            zero: false,
        }
    }
}

fn non_empty(batch: &RolloutBatch) -> Result<()> {
    if batch.is_empty() {
        Err(Error::domain("empty rollout batch"))
    } else {
        Ok(())
    }
}

/// Raw gradient of `L_a = −mean(A_t · log π(a_t|s_t))`.
pub fn surrogate_gradient(batch: &RolloutBatch, params: &PolicyParams) -> Result<Vec<f64>> {
    non_empty(batch)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    for step in &batch.steps {
        if step.advantage == 0.0 {
            continue;
        }
        ensure_dim(params.action_dim(), step.raw_action.len())?;
        let cache = params.forward_cache(&step.obs)?;
        params.accumulate_grad_log_prob(&cache, &step.raw_action, -step.advantage / n, &mut grad);
    }
    Ok(grad)
}

/// Normalized objective gradient `g`.
pub fn policy_gradient(batch: &RolloutBatch, params: &PolicyParams, norm: GradNormalization) -> Result<Gradient> {
    Ok(norm.apply(surrogate_gradient(batch, params)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGradient {
    /// Column of `C` after normalization.
    pub grad: Gradient,
    /// `J_c − mean(b)`; positive means violated.
    pub z: f64,
    pub j_c: f64,
    pub mean_b: f64,
}

/// Constraint surrogate `J_c = mean(A_t · u(μ(s_t)))` and its raw gradient.
/// Returns `(J_c, mean(b), ∂J_c/∂θ)`.
pub fn constraint_surrogate(batch: &RolloutBatch, params: &PolicyParams, k: usize) -> Result<(f64, f64, Vec<f64>)> {
    non_empty(batch)?;
    let n = batch.len() as f64;
    let mlp = params.mlp();
    let (mut j_c, mut mean_b) = (0.0, 0.0);
    let mut grad = vec![0.0; params.dim()];
    for step in &batch.steps {
        if k >= step.constraints.len() {
            return Err(Error::domain(format!(
                "constraint index {k} out of range for step with {} constraints",
                step.constraints.len()
            )));
        }
        ensure_dim(params.action_dim(), step.action_map.len())?;
        let coef: Vec<f64> = (0..params.action_dim()).map(|j| step.constraint_coef(k, j) / n).collect();
        mean_b += step.constraints[k].b / n;
        j_c += step.constraint_offset(k) / n;
        if coef.iter().all(|c| *c == 0.0) {
            continue;
        }
        let cache = params.forward_cache(&step.obs)?;
        j_c += dot(&coef, cache.output());
        mlp.backward(&params.theta, &cache, &coef, &mut grad);
    }
    Ok((j_c, mean_b, grad))
}

pub fn constraint_gradient(
    batch: &RolloutBatch,
    params: &PolicyParams,
    k: usize,
    norm: GradNormalization,
) -> Result<ConstraintGradient> {
    let (j_c, mean_b, raw) = constraint_surrogate(batch, params, k)?;
    Ok(ConstraintGradient {
        grad: norm.apply(raw),
        z: j_c - mean_b,
        j_c,
        mean_b,
    })
}

/// Damped Fisher information of the policy averaged over batch states, with
/// per-state mean-Jacobians cached so repeated products are cheap.
#[derive(Debug, Clone)]
pub struct FisherOperator {
    rows: Vec<Vec<f64>>,
    inv_var: Vec<f64>,
    states: usize,
    mlp_len: usize,
    dim: usize,
    damping: f64,
}

impl FisherOperator {
    pub fn new(batch: &RolloutBatch, params: &PolicyParams, damping: f64) -> Result<Self> {
        non_empty(batch)?;
        let k = params.action_dim();
        let mut rows = Vec::with_capacity(batch.len() * k);
        for step in &batch.steps {
            rows.extend(params.mean_jacobian(&step.obs)?);
        }
        Ok(Self {
            rows,
            inv_var: params.log_std().iter().map(|l| (-2.0 * l).exp()).collect(),
            states: batch.len(),
            mlp_len: params.mlp_len(),
            dim: params.dim(),
            damping,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.inv_var.len();
        let (v_mlp, v_ls) = v.split_at(self.mlp_len);
        let mut out = vec![0.0; self.dim];
        let n = self.states as f64;
        for (idx, row) in self.rows.iter().enumerate() {
            let w = dot(row, v_mlp) * self.inv_var[idx % k] / n;
            if w == 0.0 {
                continue;
            }
            for (o, &r) in out[..self.mlp_len].iter_mut().zip(row) {
                *o += w * r;
            }
        }
        // Fisher of a Gaussian w.r.t. its log-std is 2 per component.
        for (o, &x) in out[self.mlp_len..].iter_mut().zip(v_ls) {
            *o += 2.0 * x;
        }
        for (o, &x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        out
    }
}

/// One-off `(F + damping·I)v`.
pub fn fisher_vector_product(batch: &RolloutBatch, params: &PolicyParams, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    ensure_dim(params.dim(), v.len())?;
    Ok(FisherOperator::new(batch, params, damping)?.apply(v))
}

/// Batch mean of `KL(π_old(·|s) ‖ π_new(·|s))`.
pub fn mean_kl(batch: &RolloutBatch, old: &PolicyParams, new: &PolicyParams) -> Result<f64> {
    non_empty(batch)?;
    let mut total = 0.0;
    for step in &batch.steps {
        let (m0, s0) = old.forward(&step.obs)?;
        let (m1, s1) = new.forward(&step.obs)?;
        total += gaussian_kl(&m0, &s0, &m1, &s1);
    }
    Ok(total / batch.len() as f64)
}

pub fn gaussian_kl(m0: &[f64], s0: &[f64], m1: &[f64], s1: &[f64]) -> f64 {
    m0.iter()
        .zip(s0)
        .zip(m1.iter().zip(s1))
        .map(|((&a, &sa), (&b, &sb))| (sb / sa).ln() + (sa * sa + (a - b) * (a - b)) / (2.0 * sb * sb) - 0.5)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticOptimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: CriticOptimizer,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            optimizer: CriticOptimizer::Adam,
        }
    }
}

/// Full-batch descent on the value-regression loss against `ret`.
/// Returns the updated critic and the loss before each epoch plus the final
/// loss.
pub fn critic_update(batch: &RolloutBatch, critic: &CriticParams, cfg: &CriticConfig) -> Result<(CriticParams, Vec<f64>)> {
    let obs: Vec<Vec<f64>> = batch.steps.iter().map(|s| s.obs.clone()).collect();
    let returns: Vec<f64> = batch.steps.iter().map(|s| s.ret).collect();
    fit_critic(&obs, &returns, critic, cfg)
}

pub fn fit_critic(
    obs: &[Vec<f64>],
    returns: &[f64],
    critic: &CriticParams,
    cfg: &CriticConfig,
) -> Result<(CriticParams, Vec<f64>)> {
    let mut phi = critic.phi.clone();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let (mut m, mut v) = (vec![0.0; phi.len()], vec![0.0; phi.len()]);
    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let mut current = critic.clone();
    for t in 1..=cfg.epochs {
        let (loss, grad) = current.loss_and_grad(obs, returns)?;
        losses.push(loss);
        match cfg.optimizer {
            CriticOptimizer::Sgd => {
                for (p, g) in phi.iter_mut().zip(&grad) {
                    *p -= cfg.lr * g;
                }
            }
            CriticOptimizer::Adam => {
                let c1 = 1.0 - b1.powi(t as i32);
                let c2 = 1.0 - b2.powi(t as i32);
                for i in 0..phi.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    phi[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        current = current.with_phi(phi.clone())?;
    }
    losses.push(current.loss(obs, returns)?);
    Ok((current, losses))
}

/// Versioned JSON checkpoint of actor and critic with their layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub actor: PolicyParams,
    pub critic: CriticParams,
}

impl Checkpoint {
    pub fn new(actor: PolicyParams, critic: CriticParams, epoch: usize, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            epoch,
            seed,
            actor,
            critic,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let bad = |e: Error| Error::Checkpoint(e.to_string());
        Ok(Self {
            actor: ck.actor.checked().map_err(bad)?,
            critic: ck.critic.checked().map_err(bad)?,
            ..ck
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
