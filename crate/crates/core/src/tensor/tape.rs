//! Gradient tape.
//!
//! Every operation appends a node whose parents already live on the tape,
//! so node order is a topological order and the backward sweep is a single
//! reverse pass that visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::{sign, Precision, Tensor};
use crate::error::{invalid, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Slu(f64),
    Sigmoid,
    Exp,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, UnaryKind),
    Binary(usize, usize, BinaryKind),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Deconv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    ConcatChannels(usize, usize),
    RepeatChannels(usize),
    LogSoftmax(usize),
    Pick {
        input: usize,
        indices: Vec<usize>,
    },
    Clamp {
        input: usize,
        pass: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf recorded with `requires_grad`. Leaves that did not
    /// participate in the loss receive zeros.
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        if var.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        self.grads
            .get(var.index)
            .and_then(Option::as_ref)
            .ok_or_else(|| invalid("gradient requested for a node that is not a requires_grad leaf"))
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.precision.round_tensor(&mut value);
        value.requires_grad = needs_grad;
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        let out = match kind {
            UnaryKind::Neg => xv.map(|v| -v),
            UnaryKind::Scale(c) => xv.map(|v| v * c),
            UnaryKind::AddScalar(c) => xv.map(|v| v + c),
            UnaryKind::Relu => xv.map(|v| v.max(0.0)),
            UnaryKind::Slu(a) => xv.map(|v| v.max(0.0) + a * v.sin()),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Abs => xv.map(f64::abs),
        };
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::Unary(i, kind), ng))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    /// `max(0, x) + a·sin(x)`; the step part has derivative 0 at `x = 0`.
    pub fn slu(&mut self, x: Var, a: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Slu(a))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let out = if av.shape() == bv.shape() {
            av.zip_map(bv, "binary", f)?
        } else if bv.rank() == 0 {
            let s = bv.data()[0];
            av.map(|x| f(x, s))
        } else if av.rank() == 0 {
            let s = av.data()[0];
            bv.map(|y| f(s, y))
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        let ng = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Binary(ia, ib, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Hadamard product (or scalar product when one side is rank 0).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.nodes[i].value.sum();
        let ng = self.grad_flag(&[i]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(i), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.is_empty() {
            return Err(invalid("mean of an empty tensor"));
        }
        let m = v.sum() / v.len() as f64;
        let ng = self.grad_flag(&[i]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(i), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = kernels::matmul_dims(av.shape(), bv.shape())?;
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n));
        let ng = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// `x: [n, f] + bias: [f]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if xv.rank() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let f = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.grad_flag(&[ix, ib]);
        Ok(self.push(out, Op::AddRowBias(ix, ib), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.reshape(shape.to_vec())?;
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::Reshape(i), ng))
    }

    fn conv_like(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry, transposed: bool) -> Result<Var> {
        let op_name = if transposed { "deconv2d" } else { "conv2d" };
        let (ix, iw) = (self.idx(x)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let expected_w = if transposed {
            vec![geom.in_channels, geom.out_channels, geom.kernel_h, geom.kernel_w]
        } else {
            vec![geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w]
        };
        if xv.rank() != 4 || xv.shape()[1] != geom.in_channels {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: xv.shape().to_vec(),
                right: vec![0, geom.in_channels, 0, 0],
            });
        }
        if wv.shape() != expected_w.as_slice() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: wv.shape().to_vec(),
                right: expected_w,
            });
        }
        let bias_data = match ib {
            Some(b) => {
                let bv = &self.nodes[b].value;
                if bv.shape() != [geom.out_channels] {
                    return Err(Error::ShapeMismatch {
                        op: op_name,
                        left: bv.shape().to_vec(),
                        right: vec![geom.out_channels],
                    });
                }
                Some(bv.data())
            }
            None => None,
        };
        let (n, h, w) = (xv.shape()[0], xv.shape()[2], xv.shape()[3]);
        let (data, oh, ow) = if transposed {
            kernels::deconv2d_forward(xv.data(), n, h, w, &geom, wv.data(), bias_data)?
        } else {
            kernels::conv2d_forward(xv.data(), n, h, w, &geom, wv.data(), bias_data)?
        };
        let out = Tensor::from_parts(vec![n, geom.out_channels, oh, ow], data);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        let ng = self.grad_flag(&parents);
        let op = if transposed {
            Op::Deconv2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            }
        } else {
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                geom,
            }
        };
        Ok(self.push(out, op, ng))
    }

    /// `x: [n, in, h, w]`, `weight: [out, in, kh, kw]`, `bias: [out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.conv_like(x, weight, bias, geom, false)
    }

    /// Transposed convolution, `weight: [in, out, kh, kw]`.
    pub fn deconv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.conv_like(x, weight, bias, geom, true)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        if xv.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                detail: format!("expected [n, c, h, w], got {:?}", xv.shape()),
            });
        }
        let s = xv.shape();
        let (data, argmax, oh, ow) = kernels::maxpool_forward(xv.data(), s[0] * s[1], s[2], s[3], kernel, stride)?;
        let out = Tensor::from_parts(vec![s[0], s[1], oh, ow], data);
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::MaxPool2d { input: i, argmax }, ng))
    }

    /// Concatenates `[n, c1, h, w]` and `[n, c2, h, w]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sa[0];
        let (ca, cb) = (av.len() / n, bv.len() / n);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for s in 0..n {
            data.extend_from_slice(&av.data()[s * ca..(s + 1) * ca]);
            data.extend_from_slice(&bv.data()[s * cb..(s + 1) * cb]);
        }
        let out = Tensor::from_parts(vec![n, sa[1] + sb[1], sa[2], sa[3]], data);
        let ng = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::ConcatChannels(ia, ib), ng))
    }

    /// Repeats a single-channel `[n, 1, h, w]` tensor to `[n, times, h, w]`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        let s = xv.shape();
        if s.len() != 4 || s[1] != 1 || times == 0 {
            return Err(Error::InvalidShape {
                op: "repeat_channels",
                detail: format!("expected [n, 1, h, w], got {s:?}"),
            });
        }
        let plane = s[2] * s[3];
        let mut data = Vec::with_capacity(xv.len() * times);
        for chunk in xv.data().chunks(plane) {
            for _ in 0..times {
                data.extend_from_slice(chunk);
            }
        }
        let out = Tensor::from_parts(vec![s[0], times, s[2], s[3]], data);
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::RepeatChannels(i), ng))
    }

    /// Row-wise log-softmax of `[n, k]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        if xv.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "log_softmax",
                detail: format!("expected [n, k], got {:?}", xv.shape()),
            });
        }
        let k = xv.shape()[1];
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::LogSoftmax(i), ng))
    }

    /// Selects `x[r, indices[r]]` from `[n, k]`, giving `[n]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        if xv.rank() != 2 || xv.shape()[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: xv.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let k = xv.shape()[1];
        if let Some(&bad) = indices.iter().find(|&&c| c >= k) {
            return Err(invalid(format!("class index {bad} out of range for {k} classes")));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| xv.data()[r * k + c]).collect();
        let out = Tensor::from_parts(vec![indices.len()], data);
        let ng = self.grad_flag(&[i]);
        Ok(self.push(
            out,
            Op::Pick {
                input: i,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Elementwise clip into `[lo, hi]`. The gradient passes unchanged where
    /// no clipping happened and is zero where the bound was applied.
    pub fn clamp_between(&mut self, x: Var, lo: &Tensor, hi: &Tensor) -> Result<Var> {
        let i = self.idx(x)?;
        let xv = &self.nodes[i].value;
        xv.expect_shape(lo, "clamp_between")?;
        xv.expect_shape(hi, "clamp_between")?;
        let mut pass = Vec::with_capacity(xv.len());
        let data = xv
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&l, &h))| {
                let c = v.max(l).min(h);
                pass.push(c == v);
                c
            })
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.grad_flag(&[i]);
        Ok(self.push(out, Op::Clamp { input: i, pass }, ng))
    }

    /// Mean softmax cross-entropy of `logits: [n, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let picked = self.pick(ls, labels)?;
        let m = self.mean(picked)?;
        self.neg(m)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut leaves)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let slot = &mut leaves[i];
                match slot {
                    Some(t) => self.precision.round_tensor(t),
                    None => *slot = Some(node.value.zeros_like()),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::Unary(x, kind) => {
                let xv = self.nodes[*x].value.data();
                let yv = node.value.data();
                let contrib = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&x, &y))| {
                        g * match *kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Relu => (x > 0.0) as u8 as f64,
                            UnaryKind::Slu(a) => (x > 0.0) as u8 as f64 + a * x.cos(),
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Exp => y,
                            UnaryKind::Abs => sign(x),
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, contrib);
            }
            Op::Binary(a, b, kind) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let out_len = g.len();
                // Value of the other operand at output position j.
                let at = |t: &Tensor, j: usize| if t.len() == out_len { t.data()[j] } else { t.data()[0] };
                let fold = |t: &Tensor, full: Vec<f64>| -> Vec<f64> {
                    if t.len() == full.len() {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                if self.needs(*a) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(j, gj)| gj * at(bv, j)).collect(),
                    };
                    self.accumulate(grads, *a, fold(av, full));
                }
                if self.needs(*b) {
                    let full: Vec<f64> = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(j, gj)| gj * at(av, j)).collect(),
                    };
                    self.accumulate(grads, *b, fold(bv, full));
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&g, bv.data(), m, n, k, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(av.data(), &g, k, m, n, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRowBias(x, b) => {
                let f = self.nodes[*b].value.len();
                if self.needs(*b) {
                    let mut gb = vec![0.0; f];
                    for row in g.chunks(f) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            }
            | Op::Deconv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xv = &self.nodes[*input].value;
                let wv = &self.nodes[*weight].value;
                let (n, h, w) = (xv.shape()[0], xv.shape()[2], xv.shape()[3]);
                let need_x = self.needs(*input);
                let cg = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(xv.data(), n, h, w, geom, wv.data(), &g, need_x)?
                } else {
                    kernels::deconv2d_backward(xv.data(), n, h, w, geom, wv.data(), &g, need_x)?
                };
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *input, gx);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gx = vec![0.0; self.nodes[*input].value.len()];
                for (gj, &src) in g.iter().zip(argmax) {
                    gx[src] += gj;
                }
                self.accumulate(grads, *input, gx);
            }
            Op::ConcatChannels(a, b) => {
                let n = node.value.shape()[0];
                let ca = self.nodes[*a].value.len() / n;
                let cb = self.nodes[*b].value.len() / n;
                let mut ga = Vec::with_capacity(ca * n);
                let mut gb = Vec::with_capacity(cb * n);
                for chunk in g.chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::RepeatChannels(x) => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                let times = s[1];
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                for (p, dst) in gx.chunks_mut(plane).enumerate() {
                    for t in 0..times {
                        let src = &g[(p * times + t) * plane..(p * times + t + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(k).zip(node.value.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gj, yj)| gj - yj.exp() * total));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Pick { input, indices } => {
                let k = self.nodes[*input].value.shape()[1];
                let mut gx = vec![0.0; self.nodes[*input].value.len()];
                for (r, (&c, gj)) in indices.iter().zip(&g).enumerate() {
                    gx[r * k + c] += gj;
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Clamp { input, pass } => {
                let gx = g.iter().zip(pass).map(|(gj, &p)| if p { *gj } else { 0.0 }).collect();
                self.accumulate(grads, *input, gx);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
