//! Dense feed-forward solution approximators `u(x, t; θ)`.
//!
//! Two shapes are supported: a plain multilayer perceptron ([`MlpParams`]) and a
//! root-branch network ([`RootBranchNet`]) where a shared hidden stack feeds `r`
//! independent branch stacks, one per dataset. Both expose their layers as a
//! linear chain per branch through [`FieldNet`], which is what the derivative
//! engine consumes.
//!
//! Inputs are mapped affinely to `[-1, 1]` per coordinate before the first layer
//! ([`InputScaling`]). The map is part of the network, so every derivative the
//! engine reports is already in physical units.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("a branch index is required for a root-branch network")]
    BranchRequired,
    #[error("branch index {index} out of range ({count} branches)")]
    BranchOutOfRange { index: usize, count: usize },
    #[error("expected {expected} input coordinates, got {got}")]
    InputDimension { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("parameter vector has length {got}, network has {expected} parameters")]
    ParamLength { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Sin,
    Linear,
}

impl ActivationKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::Sin => z.sin(),
            ActivationKind::Linear => z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn new(width: usize, activation: ActivationKind) -> Self {
        LayerSpec { width, activation }
    }

    /// `depth` identical hidden layers.
    pub fn stack(depth: usize, width: usize, activation: ActivationKind) -> Vec<LayerSpec> {
        vec![LayerSpec::new(width, activation); depth]
    }
}

/// One affine layer followed by an elementwise activation.
///
/// `weights` is stored row-major with shape `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: ActivationKind,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize, activation: ActivationKind) -> Self {
        DenseLayer {
            n_in,
            n_out,
            activation,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn glorot(n_in: usize, n_out: usize, activation: ActivationKind, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (n_in + n_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = (0..n_in * n_out).map(|_| normal.sample(rng)).collect();
        DenseLayer {
            n_in,
            n_out,
            activation,
            weights,
            bias: vec![0.0; n_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.n_in);
        (0..self.n_out)
            .map(|i| {
                let row = &self.weights[i * self.n_in..(i + 1) * self.n_in];
                let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.bias[i];
                self.activation.apply(z)
            })
            .collect()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, values: &[f64]) -> usize {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&values[..nw]);
        self.bias.copy_from_slice(&values[nw..nw + self.n_out]);
        nw + self.n_out
    }
}

/// Affine map of each input coordinate from `[lower, upper]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            lower: vec![-1.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Self {
        InputScaling {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Derivative of the normalized coordinate with respect to the physical one.
    pub fn factor(&self, i: usize) -> f64 {
        2.0 / (self.upper[i] - self.lower[i])
    }

    pub fn normalize(&self, i: usize, x: f64) -> f64 {
        (x - self.lower[i]) * self.factor(i) - 1.0
    }
}

/// Hidden-layer layout of a plain network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden: Vec<LayerSpec>,
    pub output_dim: usize,
}

impl MlpShape {
    fn validate(&self) -> Result<(), NetworkError> {
        if !(2..=3).contains(&self.input_dim) {
            return Err(NetworkError::Shape(format!(
                "input dimension must be 2 or 3, got {}",
                self.input_dim
            )));
        }
        if self.output_dim == 0 {
            return Err(NetworkError::Shape("output dimension must be positive".into()));
        }
        if self.hidden.iter().any(|l| l.width == 0) {
            return Err(NetworkError::Shape("layer width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub scaling: InputScaling,
}

/// A layer reference plus the offset of its parameters in the flat vector.
#[derive(Debug, Clone, Copy)]
pub struct ChainLink<'a> {
    pub layer: &'a DenseLayer,
    pub offset: usize,
}

/// Common view over the network shapes.
///
/// The canonical flat parameter order is: layers in chain order, each layer's
/// weights (row-major) followed by its biases. For a root-branch network the
/// root stack comes first, then each branch in index order.
pub trait FieldNet: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn branch_count(&self) -> usize;
    fn scaling(&self) -> &InputScaling;
    /// Layers traversed when evaluating `branch`, input to output.
    fn chain(&self, branch: usize) -> Vec<ChainLink<'_>>;
    fn param_count(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, values: &[f64]) -> Result<(), NetworkError>;
    /// Maps the optional branch argument of the public API onto a chain index.
    fn resolve_branch(&self, branch: Option<usize>) -> Result<usize, NetworkError>;
}


impl FieldNet for MlpParams {
    fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }
    fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }
    fn branch_count(&self) -> usize {
        1
    }
    fn scaling(&self) -> &InputScaling {
        &self.scaling
    }
    fn chain(&self, _branch: usize) -> Vec<ChainLink<'_>> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|layer| {
                let link = ChainLink { layer, offset };
                offset += layer.param_count();
                link
            })
            .collect()
    }
    fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }
    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }
    fn set_params(&mut self, values: &[f64]) -> Result<(), NetworkError> {
        check_len(self.param_count(), values.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            at += l.read_params(&values[at..]);
        }
        Ok(())
    }
    fn resolve_branch(&self, branch: Option<usize>) -> Result<usize, NetworkError> {
        match branch {
            None | Some(0) => Ok(0),
            Some(index) => Err(NetworkError::BranchOutOfRange { index, count: 1 }),
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), NetworkError> {
    if expected != got {
        return Err(NetworkError::ParamLength { expected, got });
    }
    Ok(())
}

/// Layout of a root-branch network: `root` hidden stack shared by every branch,
/// `branch` hidden stack replicated `branches` times, each ending in a linear
/// `output_dim` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootBranchShape {
    pub input_dim: usize,
    pub root: Vec<LayerSpec>,
    pub branch: Vec<LayerSpec>,
    pub branches: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootBranchNet {
    pub root: Vec<DenseLayer>,
    pub branches: Vec<Vec<DenseLayer>>,
    pub scaling: InputScaling,
}

impl RootBranchNet {
    fn root_params(&self) -> usize {
        self.root.iter().map(DenseLayer::param_count).sum()
    }
    fn branch_params(&self) -> usize {
        self.branches[0].iter().map(DenseLayer::param_count).sum()
    }
}

impl FieldNet for RootBranchNet {
    fn input_dim(&self) -> usize {
        self.root
            .first()
            .map(|l| l.n_in)
            .unwrap_or_else(|| self.branches[0][0].n_in)
    }
    fn output_dim(&self) -> usize {
        self.branches[0].last().map(|l| l.n_out).unwrap_or(0)
    }
    fn branch_count(&self) -> usize {
        self.branches.len()
    }
    fn scaling(&self) -> &InputScaling {
        &self.scaling
    }
    fn chain(&self, branch: usize) -> Vec<ChainLink<'_>> {
        let mut links = Vec::new();
        let mut offset = 0;
        for layer in &self.root {
            links.push(ChainLink { layer, offset });
            offset += layer.param_count();
        }
        offset += branch * self.branch_params();
        for layer in &self.branches[branch] {
            links.push(ChainLink { layer, offset });
            offset += layer.param_count();
        }
        links
    }
    fn param_count(&self) -> usize {
        self.root_params() + self.branches.len() * self.branch_params()
    }
    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.root.iter().chain(self.branches.iter().flatten()) {
            l.write_params(&mut out);
        }
        out
    }
    fn set_params(&mut self, values: &[f64]) -> Result<(), NetworkError> {
        check_len(self.param_count(), values.len())?;
        let mut at = 0;
        for l in self.root.iter_mut().chain(self.branches.iter_mut().flatten()) {
            at += l.read_params(&values[at..]);
        }
        Ok(())
    }
    fn resolve_branch(&self, branch: Option<usize>) -> Result<usize, NetworkError> {
        let index = branch.ok_or(NetworkError::BranchRequired)?;
        if index >= self.branches.len() {
            return Err(NetworkError::BranchOutOfRange {
                index,
                count: self.branches.len(),
            });
        }
        Ok(index)
    }
}

/// Either network shape, for callers that pick the architecture at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(MlpParams),
    RootBranch(RootBranchNet),
}

macro_rules! delegate {
    ($self:ident, $n:ident => $e:expr) => {
        match $self {
            Network::Mlp($n) => $e,
            Network::RootBranch($n) => $e,
        }
    };
}

impl FieldNet for Network {
    fn input_dim(&self) -> usize {
        delegate!(self, n => n.input_dim())
    }
    fn output_dim(&self) -> usize {
        delegate!(self, n => n.output_dim())
    }
    fn branch_count(&self) -> usize {
        delegate!(self, n => n.branch_count())
    }
    fn scaling(&self) -> &InputScaling {
        delegate!(self, n => n.scaling())
    }
    fn chain(&self, branch: usize) -> Vec<ChainLink<'_>> {
        delegate!(self, n => n.chain(branch))
    }
    fn param_count(&self) -> usize {
        delegate!(self, n => n.param_count())
    }
    fn params(&self) -> Vec<f64> {
        delegate!(self, n => n.params())
    }
    fn set_params(&mut self, values: &[f64]) -> Result<(), NetworkError> {
        delegate!(self, n => n.set_params(values))
    }
    fn resolve_branch(&self, branch: Option<usize>) -> Result<usize, NetworkError> {
        delegate!(self, n => n.resolve_branch(branch))
    }
}

fn build_stack(
    n_in: usize,
    hidden: &[LayerSpec],
    output_dim: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = n_in;
    for spec in hidden {
        layers.push(DenseLayer::glorot(width, spec.width, spec.activation, rng));
        width = spec.width;
    }
    if let Some(n_out) = output_dim {
        layers.push(DenseLayer::glorot(width, n_out, ActivationKind::Linear, rng));
    }
    layers
}

/// Glorot-normal weights (variance `2 / (fan_in + fan_out)`), zero biases.
pub fn init_params(shape: &MlpShape, seed: u64) -> Result<MlpParams, NetworkError> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MlpParams {
        layers: build_stack(shape.input_dim, &shape.hidden, Some(shape.output_dim), &mut rng),
        scaling: InputScaling::identity(shape.input_dim),
    })
}

pub fn init_root_branch(shape: &RootBranchShape, seed: u64) -> Result<RootBranchNet, NetworkError> {
    MlpShape {
        input_dim: shape.input_dim,
        hidden: shape.root.iter().chain(&shape.branch).copied().collect(),
        output_dim: shape.output_dim,
    }
    .validate()?;
    if shape.branches == 0 {
        return Err(NetworkError::Shape("at least one branch is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = build_stack(shape.input_dim, &shape.root, None, &mut rng);
    let root_out = shape.root.last().map(|l| l.width).unwrap_or(shape.input_dim);
    let branches = (0..shape.branches)
        .map(|_| build_stack(root_out, &shape.branch, Some(shape.output_dim), &mut rng))
        .collect();
    Ok(RootBranchNet {
        root,
        branches,
        scaling: InputScaling::identity(shape.input_dim),
    })
}

/// Plain evaluation of `u` at one physical point.
pub fn forward<N: FieldNet + ?Sized>(
    net: &N,
    branch: Option<usize>,
    point: &[f64],
) -> Result<Vec<f64>, NetworkError> {
    let b = net.resolve_branch(branch)?;
    if point.len() != net.input_dim() {
        return Err(NetworkError::InputDimension {
            expected: net.input_dim(),
            got: point.len(),
        });
    }
    let scaling = net.scaling();
    let mut h: Vec<f64> = point
        .iter()
        .enumerate()
        .map(|(i, &x)| scaling.normalize(i, x))
        .collect();
    for link in net.chain(b) {
        h = link.layer.apply(&h);
    }
    Ok(h)
}

/// `lower + (upper - lower) * sigmoid(raw)`: maps an unconstrained trainable
/// proxy onto a bounded coefficient.
pub fn reparam_bounded(raw: f64, lower: f64, upper: f64) -> f64 {
    debug_assert!(lower < upper);
    lower + (upper - lower) * sigmoid(raw)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_FORMAT: &str = "pdediscover-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    n_in: usize,
    n_out: usize,
    activation: ActivationKind,
    /// base64 of little-endian f64, row-major `n_out x n_in`
    weights: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointBody {
    Mlp {
        layers: Vec<LayerRecord>,
    },
    RootBranch {
        root: Vec<LayerRecord>,
        branches: Vec<Vec<LayerRecord>>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    input_dim: usize,
    output_dim: usize,
    param_count: usize,
    scaling: InputScaling,
    #[serde(flatten)]
    body: CheckpointBody,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(text: &str, expected: usize) -> Result<Vec<f64>, NetworkError> {
    let bytes = B64
        .decode(text)
        .map_err(|e| NetworkError::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(NetworkError::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn to_record(l: &DenseLayer) -> LayerRecord {
    LayerRecord {
        n_in: l.n_in,
        n_out: l.n_out,
        activation: l.activation,
        weights: encode_f64(&l.weights),
        bias: encode_f64(&l.bias),
    }
}

fn from_record(r: &LayerRecord) -> Result<DenseLayer, NetworkError> {
    let weights = decode_f64(&r.weights, r.n_in * r.n_out)?;
    let bias = decode_f64(&r.bias, r.n_out)?;
    if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
        return Err(NetworkError::Checkpoint("non-finite parameter".into()));
    }
    Ok(DenseLayer {
        n_in: r.n_in,
        n_out: r.n_out,
        activation: r.activation,
        weights,
        bias,
    })
}

fn check_chain(layers: &[DenseLayer], mut width: usize) -> Result<usize, NetworkError> {
    for l in layers {
        if l.n_in != width {
            return Err(NetworkError::Checkpoint(format!(
                "layer expects {} inputs but previous layer gives {width}",
                l.n_in
            )));
        }
        width = l.n_out;
    }
    Ok(width)
}

impl Network {
    pub fn to_checkpoint_json(&self) -> String {
        let body = match self {
            Network::Mlp(n) => CheckpointBody::Mlp {
                layers: n.layers.iter().map(to_record).collect(),
            },
            Network::RootBranch(n) => CheckpointBody::RootBranch {
                root: n.root.iter().map(to_record).collect(),
                branches: n
                    .branches
                    .iter()
                    .map(|b| b.iter().map(to_record).collect())
                    .collect(),
            },
        };
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            param_count: self.param_count(),
            scaling: self.scaling().clone(),
            body,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Network, NetworkError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.scaling.dim() != file.input_dim {
            return Err(NetworkError::Checkpoint("scaling dimension mismatch".into()));
        }
        let net = match &file.body {
            CheckpointBody::Mlp { layers } => {
                let layers = layers.iter().map(from_record).collect::<Result<Vec<_>, _>>()?;
                if layers.is_empty() {
                    return Err(NetworkError::Checkpoint("no layers".into()));
                }
                if check_chain(&layers, file.input_dim)? != file.output_dim {
                    return Err(NetworkError::Checkpoint("output width mismatch".into()));
                }
                Network::Mlp(MlpParams {
                    layers,
                    scaling: file.scaling.clone(),
                })
            }
            CheckpointBody::RootBranch { root, branches } => {
                let root = root.iter().map(from_record).collect::<Result<Vec<_>, _>>()?;
                let root_out = check_chain(&root, file.input_dim)?;
                let mut stacks = Vec::new();
                for b in branches {
                    let stack = b.iter().map(from_record).collect::<Result<Vec<_>, _>>()?;
                    if check_chain(&stack, root_out)? != file.output_dim {
                        return Err(NetworkError::Checkpoint("output width mismatch".into()));
                    }
                    stacks.push(stack);
                }
                if stacks.is_empty() {
                    return Err(NetworkError::Checkpoint("no branches".into()));
                }
                Network::RootBranch(RootBranchNet {
                    root,
                    branches: stacks,
                    scaling: file.scaling.clone(),
                })
            }
        };
        if net.param_count() != file.param_count {
            return Err(NetworkError::Checkpoint("parameter count mismatch".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network, NetworkError> {
        Network::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(hidden: usize, width: usize) -> MlpShape {
        MlpShape {
            input_dim: 2,
            hidden: LayerSpec::stack(hidden, width, ActivationKind::Tanh),
            output_dim: 1,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(&shape(3, 20), 7).unwrap();
        let b = init_params(&shape(3, 20), 7).unwrap();
        let c = init_params(&shape(3, 20), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn glorot_variance_of_square_layer() {
        // 20 -> 20 hidden layer: target variance 2 / 40
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for seed in 0..10 {
            let p = init_params(&shape(2, 20), seed).unwrap();
            for w in &p.layers[1].weights {
                sum += w;
                sum_sq += w * w;
                n += 1.0;
            }
            assert!(p.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        }
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!((var / 0.05 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let mut p = init_params(&shape(2, 5), 1).unwrap();
        for l in &mut p.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.3);
        }
        // hidden layers produce tanh(0.3) but the output weights are zero
        let u = forward(&p, None, &[0.2, -0.4]).unwrap();
        assert_eq!(u, vec![0.3]);
    }

    #[test]
    fn single_branch_matches_concatenated_mlp() {
        let rb = init_root_branch(
            &RootBranchShape {
                input_dim: 2,
                root: LayerSpec::stack(2, 6, ActivationKind::Tanh),
                branch: LayerSpec::stack(2, 4, ActivationKind::Sin),
                branches: 1,
                output_dim: 2,
            },
            11,
        )
        .unwrap();
        let mlp = MlpParams {
            layers: rb.root.iter().chain(&rb.branches[0]).cloned().collect(),
            scaling: rb.scaling.clone(),
        };
        assert_eq!(mlp.params(), rb.params());
        for pt in [[0.1, 0.2], [-0.7, 0.9]] {
            assert_eq!(forward(&rb, Some(0), &pt).unwrap(), forward(&mlp, None, &pt).unwrap());
        }
    }

    #[test]
    fn identical_branches_agree() {
        let mut rb = init_root_branch(
            &RootBranchShape {
                input_dim: 2,
                root: LayerSpec::stack(1, 5, ActivationKind::Tanh),
                branch: LayerSpec::stack(1, 5, ActivationKind::Tanh),
                branches: 3,
                output_dim: 1,
            },
            3,
        )
        .unwrap();
        let first = rb.branches[0].clone();
        rb.branches.iter_mut().for_each(|b| *b = first.clone());
        let pt = [0.3, 0.6];
        let u0 = forward(&rb, Some(0), &pt).unwrap();
        for b in 1..3 {
            assert_eq!(forward(&rb, Some(b), &pt).unwrap(), u0);
        }
    }

    #[test]
    fn branch_argument_is_validated() {
        let rb = init_root_branch(
            &RootBranchShape {
                input_dim: 2,
                root: LayerSpec::stack(1, 3, ActivationKind::Tanh),
                branch: LayerSpec::stack(1, 3, ActivationKind::Tanh),
                branches: 2,
                output_dim: 1,
            },
            0,
        )
        .unwrap();
        assert!(matches!(forward(&rb, None, &[0.0, 0.0]), Err(NetworkError::BranchRequired)));
        assert!(matches!(
            forward(&rb, Some(2), &[0.0, 0.0]),
            Err(NetworkError::BranchOutOfRange { index: 2, count: 2 })
        ));
        let mlp = init_params(&shape(1, 3), 0).unwrap();
        assert!(forward(&mlp, Some(1), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let p = init_params(&shape(3, 8), 5).unwrap();
        let a = forward(&p, None, &[0.25, 0.5]).unwrap();
        let b = forward(&p, None, &[0.25, 0.5]).unwrap();
        assert_eq!(a, b);
        assert!(a[0].is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = init_params(&shape(2, 7), 21).unwrap();
        p.scaling = InputScaling::from_bounds(&[(-8.0, 8.0), (0.0, 10.0)]);
        let net = Network::Mlp(p);
        let back = Network::from_checkpoint_json(&net.to_checkpoint_json()).unwrap();
        assert_eq!(back, net);
        let pt = [1.5, 3.25];
        assert_eq!(
            forward(&net, None, &pt).unwrap()[0].to_bits(),
            forward(&back, None, &pt).unwrap()[0].to_bits()
        );

        let rb = Network::RootBranch(
            init_root_branch(
                &RootBranchShape {
                    input_dim: 3,
                    root: LayerSpec::stack(1, 4, ActivationKind::Tanh),
                    branch: LayerSpec::stack(2, 3, ActivationKind::Sin),
                    branches: 2,
                    output_dim: 2,
                },
                2,
            )
            .unwrap(),
        );
        assert_eq!(Network::from_checkpoint_json(&rb.to_checkpoint_json()).unwrap(), rb);
    }

    #[test]
    fn checkpoint_rejects_truncated_payload() {
        let net = Network::Mlp(init_params(&shape(1, 3), 0).unwrap());
        let text = net.to_checkpoint_json();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["bias"] = serde_json::Value::String(B64.encode([0u8; 5]));
        assert!(Network::from_checkpoint_json(&v.to_string()).is_err());
    }

    #[test]
    fn bounded_reparameterization() {
        assert_eq!(reparam_bounded(0.0, 0.0, 5.0), 2.5);
        assert!((reparam_bounded(2.0, 0.0, 1.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((reparam_bounded(2.0, 0.0, 1.0) - 0.8808).abs() < 1e-4);
        assert!((reparam_bounded(50.0, 0.0, 150.0) - 150.0).abs() < 1e-9);
        let mut prev = f64::NEG_INFINITY;
        for i in -20..=20 {
            let v = reparam_bounded(i as f64 * 0.5, -1.0, 3.0);
            assert!(v > -1.0 && v < 3.0 && v > prev);
            prev = v;
        }
    }
}
