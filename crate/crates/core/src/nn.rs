//! MLP layer kit: specs, parameter stores, batchnorm state, dropout masks,
//! forward passes and optimizers.
//!
//! A network is described by an [`MlpSpec`] (per-layer widths and flags), its
//! learnable tensors live in a [`ParamStore`], and batchnorm running
//! statistics live in a separate [`BatchNormState`] because they advance
//! during train-mode forwards without being gradient-updated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{GradMap, NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub batchnorm: bool,
    pub relu: bool,
    pub dropout_after: bool,
}

/// Layer-by-layer description of an MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layers: Vec<LayerSpec>,
    /// Dropout site on the network input itself, ahead of the first layer.
    /// For a classifier over learned features this makes the twin draw mask
    /// the features directly, not just the hidden units reading them.
    dropout_input: bool,
}

impl MlpSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<MlpSpec> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_width != w[1].in_width {
                return Err(Error::contract(format!(
                    "inconsistent layer widths: {} feeds {}",
                    w[0].out_width, w[1].in_width
                )));
            }
        }
        if layers
            .iter()
            .any(|l| l.in_width == 0 || l.out_width == 0)
        {
            return Err(Error::contract("layer widths must be positive"));
        }
        Ok(MlpSpec {
            layers,
            dropout_input: false,
        })
    }

    pub fn with_input_dropout(mut self) -> MlpSpec {
        self.dropout_input = true;
        self
    }

    pub fn has_input_dropout(&self) -> bool {
        self.dropout_input
    }

    /// Stack where every layer is linear → batchnorm → relu. Used for feature
    /// generators whose output is itself a hidden representation.
    pub fn feature_stack(widths: &[usize]) -> Result<MlpSpec> {
        Self::from_widths(widths, |_, _| (true, true, false))
    }

    /// Stack where hidden layers are linear → batchnorm → relu (optionally
    /// followed by dropout) and the final layer is plain linear logits.
    pub fn classifier_stack(widths: &[usize], dropout: bool) -> Result<MlpSpec> {
        let last = widths.len().saturating_sub(2);
        Self::from_widths(widths, |i, _| {
            if i == last {
                (false, false, false)
            } else {
                (true, true, dropout)
            }
        })
    }

    fn from_widths(
        widths: &[usize],
        flags: impl Fn(usize, usize) -> (bool, bool, bool),
    ) -> Result<MlpSpec> {
        if widths.len() < 2 {
            return Err(Error::contract("need at least an input and an output width"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (batchnorm, relu, dropout_after) = flags(i, n);
                LayerSpec {
                    in_width: widths[i],
                    out_width: widths[i + 1],
                    batchnorm,
                    relu,
                    dropout_after,
                }
            })
            .collect();
        MlpSpec::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().out_width
    }

    /// Width of the layer feeding the final linear layer, when one exists.
    pub fn last_hidden_width(&self) -> Option<usize> {
        (self.layers.len() >= 2).then(|| self.layers[self.layers.len() - 2].out_width)
    }

    /// Activation width of every dropout site in application order: the
    /// input site first (when present), then each dropout-bearing layer.
    pub fn dropout_site_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        if self.dropout_input {
            widths.push(self.input_width());
        }
        widths.extend(
            self.layers
                .iter()
                .filter(|l| l.dropout_after)
                .map(|l| l.out_width),
        );
        widths
    }
}

// ---------------------------------------------------------------------------
// Parameters and batchnorm state
// ---------------------------------------------------------------------------

/// Ordered map of named learnable tensors. Shapes are fixed at insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            None => Err(Error::contract(format!("unknown parameter {name:?}"))),
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::shapes("param set", slot.shape(), tensor.shape()));
                }
                *slot = tensor;
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Running mean/variance per batchnorm layer, plus the shared momentum and ε.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub momentum: f64,
    pub eps: f64,
    layers: BTreeMap<usize, BnLayerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn empty() -> BatchNormState {
        BatchNormState {
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            layers: BTreeMap::new(),
        }
    }

    pub fn insert_layer(&mut self, index: usize, width: usize) {
        self.layers.insert(
            index,
            BnLayerState {
                running_mean: Tensor::zeros(&[width]),
                running_var: Tensor::ones(&[width]),
            },
        );
    }

    pub fn layer(&self, index: usize) -> Option<&BnLayerState> {
        self.layers.get(&index)
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut BnLayerState> {
        self.layers.get_mut(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BnLayerState)> {
        self.layers.iter().map(|(&i, s)| (i, s))
    }

    pub(crate) fn insert_raw(&mut self, index: usize, state: BnLayerState) {
        self.layers.insert(index, state);
    }
}

// ---------------------------------------------------------------------------
// Dropout masks
// ---------------------------------------------------------------------------

/// Explicit binary keep-mask, so dropout draws are reproducible values rather
/// than hidden generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    tensor: Tensor,
}

impl DropoutMask {
    pub fn from_tensor(tensor: Tensor) -> Result<DropoutMask> {
        if tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        Ok(DropoutMask { tensor })
    }

    pub fn ones(shape: &[usize]) -> DropoutMask {
        DropoutMask {
            tensor: Tensor::ones(shape),
        }
    }

    /// Per-entry Bernoulli keep-mask over an `[n×width]` activation.
    pub fn sample(rng: &mut Rng, rows: usize, cols: usize, keep: f64) -> DropoutMask {
        let data = (0..rows * cols)
            .map(|_| if rng.bernoulli(keep) { 1.0 } else { 0.0 })
            .collect();
        DropoutMask {
            tensor: Tensor::raw(vec![rows, cols], data),
        }
    }

    /// `[rows×width]` mask keeping only the indexed unit in every row.
    pub fn single_unit(rows: usize, width: usize, unit: usize) -> Result<DropoutMask> {
        if unit >= width {
            return Err(Error::contract(format!(
                "unit index {unit} out of range for width {width}"
            )));
        }
        let mut data = vec![0.0; rows * width];
        for i in 0..rows {
            data[i * width + unit] = 1.0;
        }
        Ok(DropoutMask {
            tensor: Tensor::raw(vec![rows, width], data),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn keep_fraction(&self) -> f64 {
        self.tensor.data().iter().sum::<f64>() / self.tensor.numel() as f64
    }
}

/// One fresh mask per dropout site of `spec`, for a batch of `rows` rows.
pub fn sample_masks(rng: &mut Rng, spec: &MlpSpec, rate: f64, rows: usize) -> Vec<DropoutMask> {
    let keep = 1.0 - rate;
    spec.dropout_site_widths()
        .iter()
        .map(|&width| DropoutMask::sample(rng, rows, width, keep))
        .collect()
}

/// Two independent mask sets: the twin classifier draw.
pub fn sample_twin_masks(
    rng: &mut Rng,
    spec: &MlpSpec,
    rate: f64,
    rows: usize,
) -> (Vec<DropoutMask>, Vec<DropoutMask>) {
    let first = sample_masks(rng, spec, rate, rows);
    let second = sample_masks(rng, spec, rate, rows);
    (first, second)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn layer_param_names(i: usize) -> (String, String, String, String) {
    (
        format!("layer{i}.weight"),
        format!("layer{i}.bias"),
        format!("layer{i}.gamma"),
        format!("layer{i}.beta"),
    )
}

/// Glorot-uniform weights, zero biases, unit gamma, zero beta, and fresh
/// running statistics (mean 0, variance 1).
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> (ParamStore, BatchNormState) {
    let mut params = ParamStore::new();
    let mut bn = BatchNormState::empty();
    for (i, layer) in spec.layers().iter().enumerate() {
        let (w_name, b_name, g_name, beta_name) = layer_param_names(i);
        let bound = (6.0 / (layer.in_width + layer.out_width) as f64).sqrt();
        let w_data: Vec<f64> = (0..layer.in_width * layer.out_width)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        params
            .insert(w_name, Tensor::raw(vec![layer.in_width, layer.out_width], w_data))
            .expect("names are unique by construction");
        params
            .insert(b_name, Tensor::zeros(&[layer.out_width]))
            .expect("names are unique by construction");
        if layer.batchnorm {
            params
                .insert(g_name, Tensor::ones(&[layer.out_width]))
                .expect("names are unique by construction");
            params
                .insert(beta_name, Tensor::zeros(&[layer.out_width]))
                .expect("names are unique by construction");
            bn.insert_layer(i, layer.out_width);
        }
    }
    (params, bn)
}

/// A spec together with its parameters and batchnorm state.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: MlpSpec,
    pub params: ParamStore,
    pub bn: BatchNormState,
}

impl Model {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Model {
        let (params, bn) = init_params(&spec, rng);
        Model { spec, params, bn }
    }

    /// Eval-mode forward returning plain values (throwaway tape).
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &self.params);
        let input = tape.leaf(x.clone());
        let out = mlp_forward_eval(&mut tape, &self.spec, &binding, &self.bn, input, None, 0.0)?;
        Ok(tape.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Leaf nodes for every parameter of a store on one tape. Binding the store
/// once per tape means repeated forwards share leaves, so gradients from all
/// uses accumulate onto the same node.
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Binding {
        let nodes = params
            .iter()
            .map(|(name, tensor)| (name.to_string(), tape.leaf(tensor.clone())))
            .collect();
        Binding { nodes }
    }

    /// Binding over existing leaves, for callers that own the leaf nodes
    /// (the gradient-check suite perturbs them directly).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Binding {
        Binding {
            nodes: pairs.into_iter().collect(),
        }
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    /// Extracts named gradients from a backward pass. Parameters the root did
    /// not depend on are absent from the result.
    pub fn grads(&self, gm: &GradMap) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| gm.get(id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

enum BnForward<'a> {
    Train(&'a mut BatchNormState),
    Eval(&'a BatchNormState),
}

struct ForwardOpts<'a> {
    masks: Option<&'a [DropoutMask]>,
    dropout_rate: f64,
    /// `(layer index, [width] 0/1 row)` applied after that layer's activation
    /// with no rescaling.
    hard_mask: Option<(usize, &'a Tensor)>,
    /// Stop after this layer index (inclusive).
    upto: Option<usize>,
}

fn forward_layers(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &Binding,
    mut bn: BnForward<'_>,
    x: NodeId,
    opts: ForwardOpts<'_>,
) -> Result<NodeId> {
    let rows = tape.value(x).shape()[0];
    let site_widths = spec.dropout_site_widths();
    if let Some(masks) = opts.masks {
        if masks.len() != site_widths.len() {
            return Err(Error::contract(format!(
                "expected {} dropout masks, got {}",
                site_widths.len(),
                masks.len()
            )));
        }
        for (mask, &width) in masks.iter().zip(&site_widths) {
            if mask.tensor().shape() != [rows, width] {
                return Err(Error::shapes(
                    "dropout mask",
                    &[rows, width],
                    mask.tensor().shape(),
                ));
            }
        }
    }

    let mut h = x;
    let mut site_idx = 0;
    if spec.has_input_dropout() {
        if let Some(masks) = opts.masks {
            h = tape.dropout(h, &masks[site_idx], opts.dropout_rate)?;
        }
        site_idx += 1;
    }
    for (i, layer) in spec.layers().iter().enumerate() {
        let w = binding
            .node(&format!("layer{i}.weight"))
            .ok_or_else(|| Error::contract(format!("missing parameter layer{i}.weight")))?;
        let b = binding
            .node(&format!("layer{i}.bias"))
            .ok_or_else(|| Error::contract(format!("missing parameter layer{i}.bias")))?;
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;

        if layer.batchnorm {
            let gamma = binding
                .node(&format!("layer{i}.gamma"))
                .ok_or_else(|| Error::contract(format!("missing parameter layer{i}.gamma")))?;
            let beta = binding
                .node(&format!("layer{i}.beta"))
                .ok_or_else(|| Error::contract(format!("missing parameter layer{i}.beta")))?;
            h = match &mut bn {
                BnForward::Train(state) => {
                    let (momentum, eps) = (state.momentum, state.eps);
                    let layer_state = state
                        .layer_mut(i)
                        .ok_or_else(|| Error::contract(format!("missing bn state for layer {i}")))?;
                    // Split borrows: running mean and var live in one struct.
                    let BnLayerState {
                        running_mean,
                        running_var,
                    } = layer_state;
                    tape.batchnorm(h, gamma, beta, running_mean, running_var, momentum, eps, true)?
                }
                BnForward::Eval(state) => {
                    let layer_state = state
                        .layer(i)
                        .ok_or_else(|| Error::contract(format!("missing bn state for layer {i}")))?;
                    let mut mean = layer_state.running_mean.clone();
                    let mut var = layer_state.running_var.clone();
                    tape.batchnorm(h, gamma, beta, &mut mean, &mut var, state.momentum, state.eps, false)?
                }
            };
        }

        if layer.relu {
            h = tape.relu(h);
        }

        if layer.dropout_after {
            if let Some(masks) = opts.masks {
                h = tape.dropout(h, &masks[site_idx], opts.dropout_rate)?;
            }
            site_idx += 1;
        }

        if let Some((mask_layer, row)) = opts.hard_mask {
            if mask_layer == i {
                if row.shape() != [layer.out_width] {
                    return Err(Error::shapes("hard mask", &[layer.out_width], row.shape()));
                }
                let mut data = Vec::with_capacity(rows * layer.out_width);
                for _ in 0..rows {
                    data.extend_from_slice(row.data());
                }
                let tiled =
                    DropoutMask::from_tensor(Tensor::raw(vec![rows, layer.out_width], data))?;
                h = tape.dropout(h, &tiled, 0.0)?;
            }
        }

        if opts.upto == Some(i) {
            break;
        }
    }
    Ok(h)
}

/// Train-mode forward: batch statistics (running stats advance) and dropout
/// applied with inverted scaling. One mask per dropout site is required.
pub fn mlp_forward_train(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &Binding,
    bn: &mut BatchNormState,
    x: NodeId,
    masks: &[DropoutMask],
    dropout_rate: f64,
) -> Result<NodeId> {
    forward_layers(
        tape,
        spec,
        binding,
        BnForward::Train(bn),
        x,
        ForwardOpts {
            masks: Some(masks),
            dropout_rate,
            hard_mask: None,
            upto: None,
        },
    )
}

/// Eval-mode forward: frozen running statistics and no dropout unless masks
/// are passed explicitly (then applied with the given rate's scaling).
pub fn mlp_forward_eval(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &Binding,
    bn: &BatchNormState,
    x: NodeId,
    masks: Option<&[DropoutMask]>,
    dropout_rate: f64,
) -> Result<NodeId> {
    forward_layers(
        tape,
        spec,
        binding,
        BnForward::Eval(bn),
        x,
        ForwardOpts {
            masks,
            dropout_rate,
            hard_mask: None,
            upto: None,
        },
    )
}

/// Eval-mode forward that keeps only one unit of `layer_index`'s activation,
/// with no rescaling. Used for per-neuron decision boundaries.
pub fn mlp_forward_eval_unit_mask(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &Binding,
    bn: &BatchNormState,
    x: NodeId,
    layer_index: usize,
    unit_row: &Tensor,
) -> Result<NodeId> {
    forward_layers(
        tape,
        spec,
        binding,
        BnForward::Eval(bn),
        x,
        ForwardOpts {
            masks: None,
            dropout_rate: 0.0,
            hard_mask: Some((layer_index, unit_row)),
            upto: None,
        },
    )
}

/// Eval-mode activations of hidden layer `upto` (inclusive), differentiable
/// through the tape. This is the feature map used for feature matching.
pub fn mlp_forward_eval_features(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &Binding,
    bn: &BatchNormState,
    x: NodeId,
    upto: usize,
) -> Result<NodeId> {
    if upto >= spec.layers().len() {
        return Err(Error::contract(format!(
            "feature layer {upto} out of range for a {}-layer net",
            spec.layers().len()
        )));
    }
    forward_layers(
        tape,
        spec,
        binding,
        BnForward::Eval(bn),
        x,
        ForwardOpts {
            masks: None,
            dropout_rate: 0.0,
            hard_mask: None,
            upto: Some(upto),
        },
    )
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-parameter optimizer state. Moment tensors exist for exactly the
/// parameters the optimizer was created over.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    t: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore) -> OptimizerState {
        let zeros = |p: &ParamStore| -> BTreeMap<String, Tensor> {
            p.iter()
                .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        OptimizerState {
            kind,
            learning_rate,
            t: 0,
            first_moment: zeros(params),
            second_moment: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters absent from `grads` are untouched, moments
    /// included; unknown names or mismatched shapes are contract errors.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shapes("optimizer step", param.shape(), grad.shape()));
            }
            if !self.first_moment.contains_key(name) {
                return Err(Error::contract(format!(
                    "parameter {name:?} is not tracked by this optimizer"
                )));
            }
        }
        self.t += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, grad) in grads {
                    let updated = params.get(name).unwrap().zip_map(grad, |p, g| p - lr * g);
                    params.set(name, updated)?;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (name, grad) in grads {
                    let m = self.first_moment.get_mut(name).unwrap();
                    let v = self.second_moment.get_mut(name).unwrap();
                    *m = m.zip_map(grad, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g);
                    *v = v.zip_map(grad, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g);
                    let p = params.get(name).unwrap();
                    let mut out = p.clone();
                    for i in 0..out.numel() {
                        let mhat = m.data()[i] / bc1;
                        let vhat = v.data()[i] / bc2;
                        out.data_mut()[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                    params.set(name, out)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_classifier() -> MlpSpec {
        MlpSpec::classifier_stack(&[5, 5, 2], true).unwrap()
    }

    #[test]
    fn init_shapes_follow_spec() {
        let spec = MlpSpec::classifier_stack(&[2, 5], false).unwrap();
        let mut rng = Rng::new(3);
        let (params, _) = init_params(&spec, &mut rng);
        assert_eq!(params.get("layer0.weight").unwrap().shape(), &[2, 5]);
        assert_eq!(params.get("layer0.bias").unwrap().shape(), &[5]);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = toy_classifier();
        let (a, _) = init_params(&spec, &mut Rng::new(17));
        let (b, _) = init_params(&spec, &mut Rng::new(17));
        assert_eq!(a, b);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let spec = MlpSpec::classifier_stack(&[2, 5], false).unwrap();
        let bound = (6.0f64 / 7.0).sqrt();
        for seed in 0..20 {
            let (params, _) = init_params(&spec, &mut Rng::new(seed));
            for &w in params.get("layer0.weight").unwrap().data() {
                assert!(w.abs() <= bound);
            }
        }
    }

    #[test]
    fn dropout_sites_and_last_hidden() {
        let spec = toy_classifier();
        assert_eq!(spec.dropout_site_widths(), vec![5]);
        assert_eq!(spec.last_hidden_width(), Some(5));
        let with_input = toy_classifier().with_input_dropout();
        assert_eq!(with_input.dropout_site_widths(), vec![5, 5]);
    }

    #[test]
    fn forward_eval_ignores_missing_masks() {
        let spec = toy_classifier();
        let mut rng = Rng::new(5);
        let model = Model::init(spec, &mut rng);
        let x = Tensor::from_vec(vec![3, 5], (0..15).map(|i| i as f64 / 10.0).collect()).unwrap();
        let out = model.forward_values(&x).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
    }

    #[test]
    fn forward_train_requires_masks() {
        let spec = toy_classifier();
        let mut rng = Rng::new(5);
        let mut model = Model::init(spec.clone(), &mut rng);
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &model.params);
        let x = tape.leaf(Tensor::zeros(&[3, 5]));
        let err = mlp_forward_train(&mut tape, &spec, &binding, &mut model.bn, x, &[], 0.5);
        assert!(err.is_err());
    }

    #[test]
    fn forward_train_same_masks_bit_identical() {
        let spec = toy_classifier();
        let mut rng = Rng::new(9);
        let model = Model::init(spec.clone(), &mut rng);
        let x = Tensor::from_vec(vec![4, 5], (0..20).map(|i| (i as f64).sin()).collect()).unwrap();
        let masks = sample_masks(&mut rng.split(1), &spec, 0.5, 4);

        let run = |masks: &[DropoutMask]| {
            let mut m = model.clone();
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, &m.params);
            let input = tape.leaf(x.clone());
            let out =
                mlp_forward_train(&mut tape, &spec, &binding, &mut m.bn, input, masks, 0.5).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(&masks), run(&masks));

        let other = sample_masks(&mut rng.split(2), &spec, 0.5, 4);
        assert_ne!(run(&masks), run(&other));
    }

    #[test]
    fn sgd_step_hand_value() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &params);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(2.0))]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[0.8]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // At t = 1 the bias-corrected update is lr·c/(|c| + ε) ≈ lr for any c ≠ 0.
        for &c in &[3.0, -0.4, 1e-3] {
            let mut params = ParamStore::new();
            params.insert("p", Tensor::scalar(0.0)).unwrap();
            let lr = 2e-4;
            let mut opt = OptimizerState::new(OptimizerKind::Adam, lr, &params);
            let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(c))]);
            opt.step(&mut params, &grads).unwrap();
            let delta = params.get("p").unwrap().data()[0].abs();
            assert!((delta - lr).abs() < 1e-6 * lr.max(1.0), "c={c}, delta={delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut params = ParamStore::new();
            params.insert("p", Tensor::scalar(0.7)).unwrap();
            let mut opt = OptimizerState::new(kind, 0.1, &params);
            let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(params.get("p").unwrap().data(), &[0.7]);
        }
    }

    #[test]
    fn absent_parameters_are_untouched() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1.0)).unwrap();
        params.insert("b", Tensor::scalar(2.0)).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &params);
        let grads = BTreeMap::from([("a".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("b").unwrap().data(), &[2.0]);
    }

    #[test]
    fn step_rejects_unknown_names_and_bad_shapes() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1.0)).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &params);

        let unknown = BTreeMap::from([("zzz".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut params, &unknown).is_err());

        let bad_shape = BTreeMap::from([("a".to_string(), Tensor::zeros(&[2]))]);
        assert!(opt.step(&mut params, &bad_shape).is_err());
    }

    #[test]
    fn twin_mask_keep_frequency() {
        // rate 0.5 over many draws → per-site keep frequency 0.5 ± 0.02.
        let spec = toy_classifier();
        let mut rng = Rng::new(77);
        let mut kept = 0.0;
        let mut total = 0.0;
        for _ in 0..100 {
            let (a, b) = sample_twin_masks(&mut rng, &spec, 0.5, 10);
            for m in a.iter().chain(b.iter()) {
                kept += m.tensor().data().iter().sum::<f64>();
                total += m.tensor().numel() as f64;
            }
        }
        let freq = kept / total;
        assert!((freq - 0.5).abs() < 0.02, "keep frequency {freq}");
    }

    #[test]
    fn rate_zero_masks_are_all_ones() {
        let spec = toy_classifier();
        let mut rng = Rng::new(3);
        let (a, b) = sample_twin_masks(&mut rng, &spec, 0.0, 6);
        for m in a.iter().chain(b.iter()) {
            assert!(m.tensor().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn twin_masks_deterministic_per_seed() {
        let spec = toy_classifier();
        let first = sample_twin_masks(&mut Rng::new(123), &spec, 0.5, 8);
        let second = sample_twin_masks(&mut Rng::new(123), &spec, 0.5, 8);
        assert_eq!(first, second);
    }

    #[test]
    fn dropout_mask_average_is_unbiased() {
        // Mask-average of inverted dropout over many draws approaches x
        // entry-wise within 3 standard errors.
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let rate = 0.3;
        let keep = 1.0 - rate;
        let draws = 100_000;
        let mut rng = Rng::new(2024);
        let mut sums = vec![0.0; 3];
        for _ in 0..draws {
            let mask = DropoutMask::sample(&mut rng, 1, 3, keep);
            let mut tape = Tape::new();
            let xs = tape.leaf(Tensor::raw(vec![1, 3], x.data().to_vec()));
            let y = tape.dropout(xs, &mask, rate).unwrap();
            for (s, &v) in sums.iter_mut().zip(tape.value(y).data()) {
                *s += v;
            }
        }
        for (i, &xv) in x.data().iter().enumerate() {
            let mean = sums[i] / draws as f64;
            let se = xv.abs() * ((1.0 - keep) / keep / draws as f64).sqrt();
            assert!(
                (mean - xv).abs() <= 3.0 * se,
                "entry {i}: mean {mean} vs {xv} (se {se})"
            );
        }
    }
}
