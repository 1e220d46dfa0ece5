//! Raw samples, perturbation masks, the differentiable feature extractor and
//! synthetic populations.
//!
//! The extractor is a small fully connected network with `tanh` hidden layers
//! and an optional L2-normalized output. Its Jacobian (including the
//! normalization step) is computed analytically, and a vector-Jacobian product
//! is provided for gradient-based sample generation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::seed::{self, stream};
use crate::{Embedding, Error, RawSample, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, `out = act(W x + b)` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.cols
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows
    }
}

/// Architecture of a randomly initialized extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    pub d_in: usize,
    /// Widths of the `tanh` hidden layers.
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    #[serde(default = "default_true")]
    pub l2_normalize: bool,
    /// Standard deviation of the random biases.
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
}

fn default_true() -> bool {
    true
}

fn default_bias_scale() -> f64 {
    0.1
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            d_in: 64,
            hidden: vec![32, 24],
            d_emb: 16,
            l2_normalize: true,
            bias_scale: default_bias_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<DenseLayer>,
    l2_normalize: bool,
    seed: u64,
}

/// Intermediate values of one forward pass.
struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre_norm: Vec<f64>,
    pre_norm_len: f64,
    output: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(layers: Vec<DenseLayer>, l2_normalize: bool, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "extractor needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::DimensionMismatch {
                    expected: l.outputs(),
                    found: l.bias.len(),
                });
            }
        }
        Ok(Self {
            layers,
            l2_normalize,
            seed,
        })
    }

    /// Gaussian weights with variance `1 / fan_in`; `tanh` on every hidden
    /// layer and an identity output layer.
    pub fn random(spec: &ExtractorSpec, seed: u64) -> Result<Self> {
        if spec.d_in == 0 || spec.d_emb == 0 || spec.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = seed::rng_from(seed, &[stream::EXTRACTOR]);
        let mut widths = vec![spec.d_in];
        widths.extend_from_slice(&spec.hidden);
        widths.push(spec.d_emb);
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / libm::sqrt(fan_in as f64);
            let mut weights = Matrix::zeros(fan_out, fan_in);
            for v in weights.data.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g * scale;
            }
            let bias = (0..fan_out)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * spec.bias_scale
                })
                .collect();
            let activation = if l + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            layers.push(DenseLayer {
                weights,
                bias,
                activation,
            });
        }
        Self::new(layers, spec.l2_normalize, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn l2_normalize(&self) -> bool {
        self.l2_normalize
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let input = activations.last().unwrap();
            let mut out = layer.weights.matvec(input);
            for (o, b) in out.iter_mut().zip(&layer.bias) {
                *o = layer.activation.apply(*o + b);
            }
            activations.push(out);
        }
        let pre_norm = activations.last().unwrap().clone();
        let len = linalg::norm(&pre_norm);
        let output = if self.l2_normalize && len > 0.0 {
            pre_norm.iter().map(|v| v / len).collect()
        } else {
            pre_norm.clone()
        };
        ForwardCache {
            activations,
            pre_norm,
            pre_norm_len: len,
            output,
        }
    }

    /// Forward pass.
    pub fn extract(&self, x: &[f64]) -> Result<Embedding> {
        self.check_input(x)?;
        Ok(self.forward(x).output)
    }

    /// Analytic Jacobian `∂f/∂x` (`D_emb × D_in`).
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check_input(x)?;
        let cache = self.forward(x);
        let mut jac = Matrix::identity(self.input_dim());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weights.matmul(&jac);
            let out = &cache.activations[l + 1];
            for r in 0..next.rows {
                let d = layer.activation.derivative_from_output(out[r]);
                for c in 0..next.cols {
                    next.data[r * next.cols + c] *= d;
                }
            }
            jac = next;
        }
        if self.l2_normalize && cache.pre_norm_len > 0.0 {
            let u = &cache.output;
            let inv = 1.0 / cache.pre_norm_len;
            let mut norm_jac = Matrix::zeros(u.len(), u.len());
            for i in 0..u.len() {
                for j in 0..u.len() {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    norm_jac.set(i, j, (delta - u[i] * u[j]) * inv);
                }
            }
            jac = norm_jac.matmul(&jac);
        }
        Ok(jac)
    }

    /// Returns `(f(x), J(x)ᵀ v)` with a single forward and backward pass.
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<(Embedding, Vec<f64>)> {
        self.check_input(x)?;
        if v.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: v.len(),
            });
        }
        let cache = self.forward(x);
        let mut grad = v.to_vec();
        if self.l2_normalize && cache.pre_norm_len > 0.0 {
            let u = &cache.output;
            let proj = linalg::dot(u, &grad);
            for (g, ui) in grad.iter_mut().zip(u) {
                *g = (*g - ui * proj) / cache.pre_norm_len;
            }
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[l + 1];
            for (g, o) in grad.iter_mut().zip(out) {
                *g *= layer.activation.derivative_from_output(*o);
            }
            grad = layer.weights.tr_matvec(&grad);
        }
        debug_assert_eq!(cache.pre_norm.len(), self.output_dim());
        Ok((cache.output, grad))
    }
}

/// Binary mask of the coordinates an adversary may overwrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMask {
    editable: Vec<bool>,
    grid_shape: Option<(usize, usize)>,
}

/// Footprint of the glasses frame relative to the whole input.
pub const DEFAULT_MASK_FRACTION: f64 = 0.0859;

impl PerturbationMask {
    pub fn new(editable: Vec<bool>, grid_shape: Option<(usize, usize)>) -> Result<Self> {
        if !editable.iter().any(|&e| e) {
            return Err(Error::EmptyMask);
        }
        if let Some((rows, cols)) = grid_shape {
            if rows * cols != editable.len() {
                return Err(Error::GridShape {
                    rows,
                    cols,
                    len: editable.len(),
                });
            }
        }
        Ok(Self {
            editable,
            grid_shape,
        })
    }

    /// Every coordinate editable: the unconstrained attacker.
    pub fn full(len: usize, grid_shape: Option<(usize, usize)>) -> Result<Self> {
        Self::new(vec![true; len], grid_shape)
    }

    /// Contiguous block of `ceil(fraction * len)` coordinates starting at `offset`.
    pub fn block(
        len: usize,
        fraction: f64,
        offset: usize,
        grid_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask fraction {fraction} outside (0, 1]"
            )));
        }
        let count = (libm::ceil(fraction * len as f64) as usize).clamp(1, len);
        if offset + count > len {
            return Err(Error::InvalidConfig(format!(
                "mask block [{offset}, {}) exceeds input length {len}",
                offset + count
            )));
        }
        let mut editable = vec![false; len];
        editable[offset..offset + count]
            .iter_mut()
            .for_each(|e| *e = true);
        Self::new(editable, grid_shape)
    }

    pub fn len(&self) -> usize {
        self.editable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.editable.is_empty()
    }

    pub fn is_editable(&self, i: usize) -> bool {
        self.editable[i]
    }

    pub fn editable(&self) -> &[bool] {
        &self.editable
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid_shape
    }

    pub fn indices(&self) -> Vec<usize> {
        self.editable
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| e.then_some(i))
            .collect()
    }

    pub fn editable_count(&self) -> usize {
        self.editable.iter().filter(|&&e| e).count()
    }

    pub fn editable_fraction(&self) -> f64 {
        self.editable_count() as f64 / self.editable.len() as f64
    }
}

/// `x·(1−M) + M∘δ`, clamped to `[0, 1]`.
pub fn apply_perturbation(x: &[f64], mask: &PerturbationMask, delta: &[f64]) -> Result<RawSample> {
    if x.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            found: x.len(),
        });
    }
    if delta.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: mask.len(),
            found: delta.len(),
        });
    }
    Ok(x.iter()
        .zip(delta)
        .zip(mask.editable())
        .map(|((&xi, &di), &m)| if m { di.clamp(0.0, 1.0) } else { xi })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub samples_per_user: usize,
    pub enrolment_size: usize,
    pub d_in: usize,
    /// Per-coordinate standard deviation of a user's samples around its center.
    pub sigma_user: f64,
    /// Per-coordinate standard deviation of user centers around the global mean.
    pub sigma_pop: f64,
    /// First coordinate of a contiguous salient block whose center spread is
    /// `sigma_salient` instead of `sigma_pop` (the analogue of a highly
    /// discriminative face region such as the eyes).
    pub salient_offset: usize,
    pub salient_count: usize,
    pub sigma_salient: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_users: 30,
            samples_per_user: 40,
            enrolment_size: 10,
            d_in: 64,
            sigma_user: 0.028,
            sigma_pop: 0.03,
            salient_offset: 0,
            salient_count: 6,
            sigma_salient: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Raw,
    EmbeddingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: u32,
    /// Raw samples (raw mode only); `embeddings[i] = f(raw[i])`.
    pub raw: Option<Vec<RawSample>>,
    /// Raw-space cluster center (synthetic populations only).
    pub center: Option<RawSample>,
    pub embeddings: Vec<Embedding>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl UserRecord {
    pub fn train_embeddings(&self) -> Vec<Embedding> {
        self.train
            .iter()
            .map(|&i| self.embeddings[i].clone())
            .collect()
    }

    pub fn test_embeddings(&self) -> Vec<Embedding> {
        self.test
            .iter()
            .map(|&i| self.embeddings[i].clone())
            .collect()
    }

    pub fn raw_sample(&self, i: usize) -> Option<&RawSample> {
        self.raw.as_ref().map(|r| &r[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDataset {
    pub mode: DatasetMode,
    pub d_emb: usize,
    /// Sorted by `id`.
    pub users: Vec<UserRecord>,
}

impl PopulationDataset {
    pub fn user(&self, id: u32) -> Option<&UserRecord> {
        self.users
            .binary_search_by_key(&id, |u| u.id)
            .ok()
            .map(|i| &self.users[i])
    }

    pub fn user_ids(&self) -> Vec<u32> {
        self.users.iter().map(|u| u.id).collect()
    }

    pub fn require_raw(&self) -> Result<()> {
        match self.mode {
            DatasetMode::Raw => Ok(()),
            DatasetMode::EmbeddingOnly => Err(Error::UnsupportedMode(
                "raw-space generation needs a raw-mode dataset",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfigWarning {
    /// `sigma_user >= sigma_pop`: users are unlikely to be separable.
    DegenerateSpread,
}

/// Isotropic Gaussian user clusters in raw space, embedded with `extractor`.
/// The first `enrolment_size` samples of each user form the training split.
pub fn generate_synthetic_population(
    cfg: &PopulationConfig,
    extractor: &FeatureExtractor,
    seed: u64,
) -> Result<(PopulationDataset, Vec<ConfigWarning>)> {
    if cfg.n_users == 0 {
        return Err(Error::InvalidConfig("n_users must be positive".into()));
    }
    if cfg.samples_per_user < cfg.enrolment_size + 1 {
        return Err(Error::InvalidConfig(format!(
            "samples_per_user ({}) must exceed enrolment_size ({})",
            cfg.samples_per_user, cfg.enrolment_size
        )));
    }
    if cfg.d_in != extractor.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: extractor.input_dim(),
            found: cfg.d_in,
        });
    }
    if cfg.sigma_user < 0.0 || cfg.sigma_pop < 0.0 || cfg.sigma_salient < 0.0 {
        return Err(Error::InvalidConfig("spreads must be non-negative".into()));
    }
    if cfg.salient_offset + cfg.salient_count > cfg.d_in {
        return Err(Error::InvalidConfig(format!(
            "salient block [{}, {}) exceeds d_in {}",
            cfg.salient_offset,
            cfg.salient_offset + cfg.salient_count,
            cfg.d_in
        )));
    }
    let salient = cfg.salient_offset..cfg.salient_offset + cfg.salient_count;
    let mut warnings = Vec::new();
    if cfg.sigma_user >= cfg.sigma_pop {
        warnings.push(ConfigWarning::DegenerateSpread);
    }
    let mut users = Vec::with_capacity(cfg.n_users);
    for id in 0..cfg.n_users as u32 {
        let mut rng = seed::rng_from(seed, &[stream::POPULATION, id as u64]);
        let center: Vec<f64> = (0..cfg.d_in)
            .map(|i| {
                let g: f64 = StandardNormal.sample(&mut rng);
                let spread = if salient.contains(&i) {
                    cfg.sigma_salient
                } else {
                    cfg.sigma_pop
                };
                (0.5 + spread * g).clamp(0.0, 1.0)
            })
            .collect();
        let raw: Vec<RawSample> = (0..cfg.samples_per_user)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        (c + cfg.sigma_user * g).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let embeddings = raw
            .iter()
            .map(|x| extractor.extract(x))
            .collect::<Result<Vec<_>>>()?;
        users.push(UserRecord {
            id,
            raw: Some(raw),
            center: Some(center),
            embeddings,
            train: (0..cfg.enrolment_size).collect(),
            test: (cfg.enrolment_size..cfg.samples_per_user).collect(),
        });
    }
    Ok((
        PopulationDataset {
            mode: DatasetMode::Raw,
            d_emb: extractor.output_dim(),
            users,
        },
        warnings,
    ))
}

/// Uniform draw in `[lo, hi)`.
pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
