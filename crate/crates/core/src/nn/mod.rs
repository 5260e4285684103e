//! Layer library and the fixed model zoo.
//!
//! A [`ModelGraph`] is a sequential list of [`LayerSpec`]s plus their
//! parameters. Skip connections are expressed with
//! [`LayerSpec::SkipConcat`], which concatenates the running activation
//! with the output of an earlier layer along the channel axis.

mod builders;
mod init;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::{ConvGeometry, Precision, Tape, Tensor, Var};

pub use builders::{build_convnet, build_mlp, build_xunet, XUnetConfig, DEFAULT_MLP_HIDDEN};
pub use init::{init_conv, init_deconv, init_dense, init_variance, InitSpec};

/// Default `a` of the sinusoidal linear unit.
pub const DEFAULT_SLU_A: f64 = 0.5;

/// `max(0, x) + a·sin(x)` for a single value.
pub fn slu_scalar(x: f64, a: f64) -> f64 {
    x.max(0.0) + a * x.sin()
}

/// Elementwise SLU without tape participation.
pub fn slu(x: &Tensor, a: f64) -> Tensor {
    x.map(|v| slu_scalar(v, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SluParams {
    pub a: f64,
}

impl Default for SluParams {
    fn default() -> Self {
        Self { a: DEFAULT_SLU_A }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { geometry: ConvGeometry },
    Deconv2d { geometry: ConvGeometry },
    MaxPool2d { kernel: usize, stride: usize },
    Relu,
    Slu { a: f64 },
    Sigmoid,
    Flatten,
    /// Concatenate with the output of layer `from` (channels: current, then skip).
    SkipConcat { from: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Slu { .. } => "slu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SkipConcat { .. } => "skip-concat",
        }
    }

    /// Shapes `(weight, bias)` of this layer's parameters, if any.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            LayerSpec::Conv2d { geometry: g } => Some((
                vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
                vec![g.out_channels],
            )),
            LayerSpec::Deconv2d { geometry: g } => Some((
                vec![g.in_channels, g.out_channels, g.kernel_h, g.kernel_w],
                vec![g.out_channels],
            )),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize], outputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::InvalidShape {
            op: "model graph",
            detail: format!("{}: {detail}", self.name()),
        };
        match *self {
            LayerSpec::Dense { inputs, outputs: o } => {
                if input != [inputs] {
                    return Err(bad(format!("expected [{inputs}], got {input:?}")));
                }
                Ok(vec![o])
            }
            LayerSpec::Conv2d { geometry: g } => {
                if input.len() != 3 || input[0] != g.in_channels {
                    return Err(bad(format!("expected [{}, h, w], got {input:?}", g.in_channels)));
                }
                let (h, w) = g.conv_output(input[1], input[2])?;
                Ok(vec![g.out_channels, h, w])
            }
            LayerSpec::Deconv2d { geometry: g } => {
                if input.len() != 3 || input[0] != g.in_channels {
                    return Err(bad(format!("expected [{}, h, w], got {input:?}", g.in_channels)));
                }
                let (h, w) = g.transposed_output(input[1], input[2])?;
                Ok(vec![g.out_channels, h, w])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if input.len() != 3 || kernel == 0 || stride == 0 || input[1] < kernel || input[2] < kernel {
                    return Err(bad(format!("cannot pool {input:?}")));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu | LayerSpec::Slu { .. } | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::SkipConcat { from } => {
                let skip = outputs
                    .get(from)
                    .ok_or_else(|| bad(format!("skip source {from} is not an earlier layer")))?;
                if input.len() != 3 || skip.len() != 3 || input[1..] != skip[1..] {
                    return Err(bad(format!("cannot concat {input:?} with {skip:?}")));
                }
                Ok(vec![input[0] + skip[0], input[1], input[2]])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Convnet,
    Xunet,
    Custom,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Convnet => "convnet",
            ModelKind::Xunet => "xunet",
            ModelKind::Custom => "custom",
        }
    }
}

/// What the final layer produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum OutputKind {
    Logits { classes: usize },
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Quantity differentiated by [`ModelGraph::input_gradient`].
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Mean cross-entropy against the given labels.
    CrossEntropy(&'a [usize]),
    /// Cross-entropy summed over the batch, so each row's input gradient
    /// does not depend on the batch size.
    CrossEntropySum(&'a [usize]),
    /// Sum over the batch of the logit of each row's target class.
    TargetLogit(&'a [usize]),
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    kind: ModelKind,
    layers: Vec<LayerSpec>,
    params: Vec<NamedParam>,
    input_shape: Vec<usize>,
    output: OutputKind,
    precision: Precision,
    frozen: bool,
}

impl ModelGraph {
    /// Assembles a graph, checking that layer shapes compose and that the
    /// parameters match the layer list.
    pub fn new(
        kind: ModelKind,
        layers: Vec<LayerSpec>,
        params: Vec<NamedParam>,
        input_shape: Vec<usize>,
        output: OutputKind,
        precision: Precision,
    ) -> Result<Self> {
        let graph = Self {
            kind,
            layers,
            params,
            input_shape,
            output,
            precision,
            frozen: false,
        };
        let shapes = graph.layer_shapes()?;
        let out = shapes.last().cloned().unwrap_or_else(|| graph.input_shape.clone());
        match graph.output {
            OutputKind::Logits { classes } if out != [classes] => {
                return Err(invalid(format!("classifier ends in {out:?}, expected [{classes}]")));
            }
            OutputKind::Mask if out.len() != 3 || out[0] != 1 || out[1..] != graph.input_shape[1..] => {
                return Err(invalid(format!(
                    "mask head produces {out:?} for input {:?}",
                    graph.input_shape
                )));
            }
            _ => {}
        }
        let expected: Vec<Vec<usize>> = graph
            .layers
            .iter()
            .filter_map(LayerSpec::param_shapes)
            .flat_map(|(w, b)| [w, b])
            .collect();
        if expected.len() != graph.params.len() {
            return Err(invalid(format!(
                "layer list needs {} parameter arrays, found {}",
                expected.len(),
                graph.params.len()
            )));
        }
        for (shape, p) in expected.iter().zip(&graph.params) {
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    left: p.tensor.shape().to_vec(),
                    right: shape.clone(),
                });
            }
        }
        Ok(graph)
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for layer in &self.layers {
            current = layer.output_shape(&current, &shapes)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    /// Replaces parameter values; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::Unfrozen("parameters of a frozen model cannot be replaced".into()));
        }
        if values.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, mut v) in self.params.iter_mut().zip(values) {
            p.tensor.expect_shape(&v, "set_params")?;
            self.precision.round_tensor(&mut v);
            p.tensor = v.with_requires_grad(false);
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn classes(&self) -> Option<usize> {
        match self.output {
            OutputKind::Logits { classes } => Some(classes),
            OutputKind::Mask => None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        for p in &mut self.params {
            precision.round_tensor(&mut p.tensor);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// SHA-256 over parameter names and the bit patterns of their values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: shape.to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    /// Forward pass on a tape. `x` is a batch `[n, ...input_shape]`.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        Ok(*self.run_layers(tape, params, x)?.last().unwrap_or(&x))
    }

    /// Runs every layer and returns the output var of each.
    fn run_layers(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Vec<Var>> {
        self.check_batch(tape.value(x)?.shape())?;
        if params.len() != self.params.len() {
            return Err(invalid("parameter binding does not match the model"));
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut next_param = 0;
        let mut h = x;
        for layer in &self.layers {
            let used = if layer.param_shapes().is_some() { 2 } else { 0 };
            h = apply_layer(tape, layer, &params[next_param..next_param + used], h, &outputs)?;
            next_param += used;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Inference on a batch without gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(self.precision);
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &params, xv)?;
        Ok(tape.value(out)?.clone())
    }

    /// The input followed by the output of every layer, for a batch.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(self.precision);
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let outputs = self.run_layers(&mut tape, &params, xv)?;
        std::iter::once(xv)
            .chain(outputs)
            .map(|v| tape.value(v).cloned())
            .collect()
    }

    /// Logits for a single image `[...input_shape]`.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&image.unsqueeze0())?.into_data())
    }

    /// Arg-max class for a single image.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok(Tensor::from_parts(vec![logits.len()], logits).argmax())
    }

    /// Arg-max classes for a batch.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| Tensor::from_parts(vec![k], row.to_vec()).argmax())
            .collect())
    }

    /// Value of the objective and its gradient with respect to the batch input.
    pub fn input_gradient(&self, x: &Tensor, objective: Objective<'_>) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new(self.precision);
        let params = self.bind(&mut tape, false);
        let xv = tape.param(x.clone());
        let logits = self.forward_on(&mut tape, &params, xv)?;
        let loss = match objective {
            Objective::CrossEntropy(labels) => tape.cross_entropy(logits, labels)?,
            Objective::CrossEntropySum(labels) => {
                let logp = tape.log_softmax(logits)?;
                let picked = tape.pick(logp, labels)?;
                let total = tape.sum(picked)?;
                tape.neg(total)?
            }
            Objective::TargetLogit(targets) => {
                let picked = tape.pick(logits, targets)?;
                tape.sum(picked)?
            }
        };
        let value = tape.value(loss)?.item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads.wrt(xv)?.clone()))
    }
}

fn apply_layer(tape: &mut Tape, layer: &LayerSpec, params: &[Var], h: Var, outputs: &[Var]) -> Result<Var> {
    match *layer {
        LayerSpec::Dense { .. } => {
            let z = tape.matmul(h, params[0])?;
            tape.add_row_bias(z, params[1])
        }
        LayerSpec::Conv2d { geometry } => tape.conv2d(h, params[0], Some(params[1]), geometry),
        LayerSpec::Deconv2d { geometry } => tape.deconv2d(h, params[0], Some(params[1]), geometry),
        LayerSpec::MaxPool2d { kernel, stride } => tape.max_pool2d(h, kernel, stride),
        LayerSpec::Relu => tape.relu(h),
        LayerSpec::Slu { a } => tape.slu(h, a),
        LayerSpec::Sigmoid => tape.sigmoid(h),
        LayerSpec::Flatten => {
            let shape = tape.value(h)?.shape().to_vec();
            let rest: usize = shape[1..].iter().product();
            tape.reshape(h, &[shape[0], rest])
        }
        LayerSpec::SkipConcat { from } => tape.concat_channels(h, outputs[from]),
    }
}

/// Row-wise softmax of a logits matrix `[n, k]`.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax",
            detail: format!("expected [n, k], got {:?}", logits.shape()),
        });
    }
    let k = logits.shape()[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(logits.shape().to_vec(), data)
}
