//! Dense multi-layer perceptron with an optional set of named linear heads
//! sharing the trunk, plus the explicit forward/backward passes.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
            Activation::Sigmoid => pre.mapv(sigmoid),
        }
    }

    /// Multiplies `grad` in place by the activation derivative evaluated
    /// at the pre-activation `pre` (with `out` the activation output).
    fn backprop(self, grad: &mut Array2<f64>, pre: &Array2<f64>, out: &Array2<f64>) {
        match self {
            Activation::Relu => {
                ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            Activation::Identity => {}
            Activation::Sigmoid => {
                ndarray::Zip::from(grad)
                    .and(out)
                    .for_each(|g, &s| *g *= s * (1.0 - s));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One affine map `y = x W^T + b` followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.nrows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn pre_activation(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Gradient of one [`Dense`] layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// Feed-forward network: a trunk of dense layers and zero or more named
/// linear heads reading the trunk output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    heads: BTreeMap<String, Dense>,
    version: u64,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    version: u64,
    head: Option<String>,
    /// Input to each applied layer, in order (trunk layers, then the head).
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    outs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outs.last().unwrap_or_else(|| &self.inputs[0])
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn head(&self) -> Option<&str> {
        self.head.as_deref()
    }

    /// Restricts the trace to the given rows, e.g. to re-use one forward
    /// pass for a sub-batch.
    pub fn select_rows(&self, rows: &[usize]) -> Trace {
        let pick = |m: &Array2<f64>| m.select(Axis(0), rows);
        Trace {
            version: self.version,
            head: self.head.clone(),
            inputs: self.inputs.iter().map(pick).collect(),
            pre: self.pre.iter().map(pick).collect(),
            outs: self.outs.iter().map(pick).collect(),
        }
    }
}

/// Parameter gradients mirroring an [`MlpModel`], plus the gradient with
/// respect to the input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<DenseGrad>,
    pub heads: BTreeMap<String, DenseGrad>,
    pub input: Option<Array2<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model.layers.iter().map(DenseGrad::zeros_like).collect(),
            heads: model
                .heads
                .iter()
                .map(|(k, h)| (k.clone(), DenseGrad::zeros_like(h)))
                .collect(),
            input: None,
        }
    }

    fn grads(&self) -> impl Iterator<Item = &DenseGrad> {
        self.layers.iter().chain(self.heads.values())
    }

    fn grads_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad> {
        self.layers.iter_mut().chain(self.heads.values_mut())
    }

    /// Adds `other` into `self`. Input gradients are summed when both exist.
    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.heads.keys().ne(other.heads.keys())
        {
            return Err(Error::Shape("gradient bundles have different layouts".into()));
        }
        for (a, b) in self.grads_mut().zip(other.grads()) {
            if a.weight.raw_dim() != b.weight.raw_dim() {
                return Err(Error::Shape("gradient bundles have different layouts".into()));
            }
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        match (&mut self.input, &other.input) {
            (Some(a), Some(b)) if a.raw_dim() == b.raw_dim() => *a += b,
            (None, Some(b)) => self.input = Some(b.clone()),
            _ => {}
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads_mut() {
            g.weight *= factor;
            g.bias *= factor;
        }
        if let Some(input) = &mut self.input {
            *input *= factor;
        }
    }

    /// Trunk-layer gradients flattened in parameter order (heads excluded).
    pub fn trunk_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }

    /// All parameter gradients, trunk first then heads in name order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.grads() {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.grads()
            .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| *v == 0.0))
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        Self::with_heads(layers, BTreeMap::new())
    }

    pub fn with_heads(layers: Vec<Dense>, heads: BTreeMap<String, Dense>) -> Result<Self> {
        if layers.is_empty() && heads.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        if let Some(last) = layers.last() {
            for (name, head) in &heads {
                if head.inputs() != last.outputs() {
                    return Err(Error::Shape(format!(
                        "head `{name}` expects {} inputs, trunk emits {}",
                        head.inputs(),
                        last.outputs()
                    )));
                }
            }
        }
        Ok(Self {
            layers,
            heads,
            version: 0,
        })
    }

    /// Builds a trunk from a width list, e.g. `[4, 16, 3]` gives two layers.
    /// Hidden layers use `hidden`, the last trunk layer uses `last`.
    pub fn from_widths<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape("need at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    /// Trunk from `widths` (all hidden activations) and one linear head per
    /// `(name, classes)` entry.
    pub fn multi_head<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        heads: &[(&str, usize)],
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = Self::from_widths(widths, hidden, hidden, rng)?;
        let feat = *widths.last().expect("widths checked above");
        let heads = heads
            .iter()
            .map(|(name, classes)| {
                (
                    name.to_string(),
                    Dense::init(feat, *classes, Activation::Identity, rng),
                )
            })
            .collect();
        Self::with_heads(trunk.layers, heads)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn heads(&self) -> &BTreeMap<String, Dense> {
        &self.heads
    }

    pub fn head(&self, name: &str) -> Option<&Dense> {
        self.heads.get(name)
    }

    /// Monotone counter bumped by every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .or_else(|| self.heads.values().next())
            .map(Dense::inputs)
            .unwrap_or(0)
    }

    pub fn output_dim(&self, head: Option<&str>) -> Option<usize> {
        match head {
            Some(h) => self.heads.get(h).map(Dense::outputs),
            None => self.layers.last().map(Dense::outputs),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .chain(self.heads.values())
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, inputs: &Array2<f64>, head: Option<&str>) -> Result<Trace> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match model input {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let head_layer = match head {
            Some(name) => Some(
                self.heads
                    .get(name)
                    .ok_or_else(|| Error::Shape(format!("unknown head `{name}`")))?,
            ),
            None => None,
        };
        let applied = self.layers.iter().chain(head_layer);
        let mut trace = Trace {
            version: self.version,
            head: head.map(str::to_string),
            inputs: Vec::with_capacity(self.layers.len() + 1),
            pre: Vec::with_capacity(self.layers.len() + 1),
            outs: Vec::with_capacity(self.layers.len() + 1),
        };
        let mut x = inputs.clone();
        for layer in applied {
            let pre = layer.pre_activation(&x);
            let out = layer.activation.apply(&pre);
            trace.inputs.push(x);
            trace.pre.push(pre);
            x = out.clone();
            trace.outs.push(out);
        }
        Ok(trace)
    }

    /// Forward pass returning only the outputs.
    pub fn predict(&self, inputs: &Array2<f64>, head: Option<&str>) -> Result<Array2<f64>> {
        let mut trace = self.forward(inputs, head)?;
        Ok(trace.outs.pop().unwrap_or_else(|| inputs.clone()))
    }

    pub fn backward(&self, trace: &Trace, output_grad: &Array2<f64>) -> Result<GradientBundle> {
        if trace.version != self.version {
            return Err(Error::Contract(format!(
                "trace recorded at model version {} but model is at version {}",
                trace.version, self.version
            )));
        }
        if output_grad.raw_dim() != trace.output().raw_dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                trace.output().shape()
            )));
        }
        let mut bundle = GradientBundle::zeros_like(self);
        let head_layer = match &trace.head {
            Some(name) => Some((
                name.clone(),
                self.heads
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("head `{name}` vanished")))?,
            )),
            None => None,
        };
        let mut grad = output_grad.clone();
        let n_trunk = self.layers.len();
        let total = trace.inputs.len();
        for idx in (0..total).rev() {
            let layer = if idx < n_trunk {
                &self.layers[idx]
            } else {
                head_layer.as_ref().map(|(_, l)| *l).expect("head applied")
            };
            layer
                .activation
                .backprop(&mut grad, &trace.pre[idx], &trace.outs[idx]);
            let dw = grad.t().dot(&trace.inputs[idx]);
            let db = grad.sum_axis(Axis(0));
            let slot = if idx < n_trunk {
                &mut bundle.layers[idx]
            } else {
                let name = &head_layer.as_ref().expect("head applied").0;
                bundle.heads.get_mut(name).expect("zeros_like covers heads")
            };
            slot.weight = dw;
            slot.bias = db;
            grad = grad.dot(&layer.weight);
        }
        bundle.input = Some(grad);
        Ok(bundle)
    }

    /// Per-sample flattened parameter gradients (trunk, then the traced
    /// head) computed from one batched pass. Row `i` of `output_grad` is the
    /// gradient of sample `i`'s own loss.
    pub fn per_sample_gradients(
        &self,
        trace: &Trace,
        output_grad: &Array2<f64>,
    ) -> Result<Vec<Vec<f64>>> {
        if trace.version != self.version {
            return Err(Error::Contract("stale trace".into()));
        }
        if output_grad.raw_dim() != trace.output().raw_dim() {
            return Err(Error::Shape("output gradient does not match output".into()));
        }
        let n_trunk = self.layers.len();
        let total = trace.inputs.len();
        let batch = trace.batch_size();
        let layer_at = |idx: usize| -> &Dense {
            if idx < n_trunk {
                &self.layers[idx]
            } else {
                &self.heads[trace.head.as_ref().expect("head applied")]
            }
        };
        let mut deltas = vec![Array2::zeros((0, 0)); total];
        let mut grad = output_grad.clone();
        for idx in (0..total).rev() {
            let layer = layer_at(idx);
            layer
                .activation
                .backprop(&mut grad, &trace.pre[idx], &trace.outs[idx]);
            let next = grad.dot(&layer.weight);
            deltas[idx] = grad;
            grad = next;
        }
        let mut out = vec![Vec::new(); batch];
        for (i, row) in out.iter_mut().enumerate() {
            for idx in 0..total {
                let delta = deltas[idx].row(i);
                let input = trace.inputs[idx].row(i);
                for d in delta.iter() {
                    row.extend(input.iter().map(|x| d * x));
                }
                row.extend(delta.iter());
            }
        }
        Ok(out)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().chain(self.heads.values_mut())
    }

    fn params(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(self.heads.values())
    }

    /// Flattened parameters: per layer weight (row-major) then bias; trunk
    /// first, heads in name order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.params() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for l in self.params_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        self.touch();
        self.check_finite()
    }

    /// Number of trunk parameters (the prefix of [`Self::flat_params`]).
    pub fn trunk_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_layout(&self, other: &MlpModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.heads.keys().eq(other.heads.keys())
            && self
                .params()
                .zip(other.params())
                .all(|(a, b)| a.weight.raw_dim() == b.weight.raw_dim() && a.activation == b.activation)
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.flat_params().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    /// Applies `f(param, grad)` to every parameter paired with its gradient.
    pub(crate) fn zip_update(
        &mut self,
        grads: &GradientBundle,
        mut f: impl FnMut(&mut f64, f64),
    ) -> Result<()> {
        if self.layers.len() != grads.layers.len() || self.heads.keys().ne(grads.heads.keys()) {
            return Err(Error::Shape("gradient layout does not match model".into()));
        }
        for (l, g) in self.params().zip(grads.grads()) {
            if l.weight.raw_dim() != g.weight.raw_dim() || l.bias.len() != g.bias.len() {
                return Err(Error::Shape("gradient layout does not match model".into()));
            }
        }
        let mut pairs: Vec<(&mut Dense, &DenseGrad)> =
            self.layers.iter_mut().chain(self.heads.values_mut()).zip(grads.grads()).collect();
        for (l, g) in pairs.iter_mut() {
            ndarray::Zip::from(&mut l.weight)
                .and(&g.weight)
                .for_each(|p, &d| f(p, d));
            ndarray::Zip::from(&mut l.bias)
                .and(&g.bias)
                .for_each(|p, &d| f(p, d));
        }
        self.touch();
        self.check_finite()
    }

    /// Runs `f` on every parameter array mutably.
    pub fn map_params(&mut self, mut f: impl FnMut(&mut f64)) -> Result<()> {
        for l in self.params_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(&mut f);
        }
        self.touch();
        self.check_finite()
    }
}
