use super::init::{init_conv, init_deconv, init_dense};
use super::{LayerSpec, ModelGraph, ModelKind, NamedParam, OutputKind, DEFAULT_SLU_A};
use crate::error::{invalid, Error, Result};
use crate::tensor::{ConvGeometry, Precision, Rng, Tensor};

pub const DEFAULT_MLP_HIDDEN: &[usize] = &[256, 128];

/// Collects layers and initializes their parameters in declaration order.
struct GraphBuilder<'a> {
    layers: Vec<LayerSpec>,
    params: Vec<NamedParam>,
    rng: &'a mut Rng,
    precision: Precision,
}

impl<'a> GraphBuilder<'a> {
    fn new(rng: &'a mut Rng, precision: Precision) -> Self {
        Self {
            layers: Vec::new(),
            params: Vec::new(),
            rng,
            precision,
        }
    }

    fn push(&mut self, layer: LayerSpec) -> Result<usize> {
        let idx = self.layers.len();
        let weight = match layer {
            LayerSpec::Dense { inputs, outputs } => Some(init_dense(inputs, outputs, self.rng, self.precision)?),
            LayerSpec::Conv2d { geometry: g } => Some(init_conv(
                g.in_channels,
                g.out_channels,
                g.kernel_h,
                g.kernel_w,
                self.rng,
                self.precision,
            )?),
            LayerSpec::Deconv2d { geometry: g } => Some(init_deconv(
                g.in_channels,
                g.out_channels,
                g.kernel_h,
                g.kernel_w,
                self.rng,
                self.precision,
            )?),
            _ => None,
        };
        if let (Some(weight), Some((_, bias_shape))) = (weight, layer.param_shapes()) {
            self.params.push(NamedParam {
                name: format!("layer{idx}.{}.weight", layer.name()),
                tensor: weight,
            });
            self.params.push(NamedParam {
                name: format!("layer{idx}.{}.bias", layer.name()),
                tensor: Tensor::zeros(bias_shape),
            });
        }
        self.layers.push(layer);
        Ok(idx)
    }

    fn finish(self, kind: ModelKind, input_shape: &[usize], output: OutputKind) -> Result<ModelGraph> {
        ModelGraph::new(kind, self.layers, self.params, input_shape.to_vec(), output, self.precision)
    }
}

fn check_image_shape(input_shape: &[usize]) -> Result<()> {
    if input_shape.len() != 3 || input_shape.contains(&0) {
        return Err(invalid(format!("image shape must be [c, h, w], got {input_shape:?}")));
    }
    Ok(())
}

/// Flatten → (dense, ReLU)* → dense logits.
pub fn build_mlp(
    input_shape: &[usize],
    hidden: &[usize],
    classes: usize,
    rng: &mut Rng,
    precision: Precision,
) -> Result<ModelGraph> {
    check_image_shape(input_shape)?;
    let mut b = GraphBuilder::new(rng, precision);
    b.push(LayerSpec::Flatten)?;
    let mut width: usize = input_shape.iter().product();
    for &h in hidden {
        b.push(LayerSpec::Dense {
            inputs: width,
            outputs: h,
        })?;
        b.push(LayerSpec::Relu)?;
        width = h;
    }
    b.push(LayerSpec::Dense {
        inputs: width,
        outputs: classes,
    })?;
    b.finish(ModelKind::Mlp, input_shape, OutputKind::Logits { classes })
}

/// Three conv/ReLU/pool blocks (16, 32, 64 channels) and two dense layers.
pub fn build_convnet(input_shape: &[usize], classes: usize, rng: &mut Rng, precision: Precision) -> Result<ModelGraph> {
    check_image_shape(input_shape)?;
    let mut b = GraphBuilder::new(rng, precision);
    let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
    for out in [16, 32, 64] {
        if h < 2 || w < 2 {
            return Err(invalid(format!("input {input_shape:?} too small for three pooling stages")));
        }
        b.push(LayerSpec::Conv2d {
            geometry: ConvGeometry::new(c, out, 3, 1, 1),
        })?;
        b.push(LayerSpec::Relu)?;
        b.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 })?;
        c = out;
        h /= 2;
        w /= 2;
    }
    b.push(LayerSpec::Flatten)?;
    b.push(LayerSpec::Dense {
        inputs: c * h * w,
        outputs: 128,
    })?;
    b.push(LayerSpec::Relu)?;
    b.push(LayerSpec::Dense {
        inputs: 128,
        outputs: classes,
    })?;
    b.finish(ModelKind::Convnet, input_shape, OutputKind::Logits { classes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XUnetConfig {
    /// Channel widths of the three encoder levels.
    pub widths: [usize; 3],
    pub slu_a: f64,
}

impl Default for XUnetConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            slu_a: DEFAULT_SLU_A,
        }
    }
}

/// Three-level UNet emitting a single-channel `[0, 1]` mask.
///
/// Encoder: conv3×3 + SLU per level, 2×2 max-pool between levels.
/// Decoder: 2×2 stride-2 deconv + SLU, skip concat, conv3×3 + SLU.
/// Head: 1×1 conv and sigmoid.
pub fn build_xunet(input_shape: &[usize], cfg: &XUnetConfig, rng: &mut Rng, precision: Precision) -> Result<ModelGraph> {
    check_image_shape(input_shape)?;
    if !input_shape[1].is_multiple_of(4) || !input_shape[2].is_multiple_of(4) {
        return Err(Error::InvalidShape {
            op: "build_xunet",
            detail: format!(
                "spatial dims {}x{} must be divisible by 4",
                input_shape[1], input_shape[2]
            ),
        });
    }
    if !cfg.slu_a.is_finite() || cfg.widths.contains(&0) {
        return Err(invalid("X-UNet widths must be positive and the SLU parameter finite"));
    }
    let [w1, w2, w3] = cfg.widths;
    let slu = LayerSpec::Slu { a: cfg.slu_a };
    let conv = |i, o| LayerSpec::Conv2d {
        geometry: ConvGeometry::new(i, o, 3, 1, 1),
    };
    let up = |i, o| LayerSpec::Deconv2d {
        geometry: ConvGeometry::new(i, o, 2, 2, 0),
    };
    let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };

    let mut b = GraphBuilder::new(rng, precision);
    b.push(conv(input_shape[0], w1))?;
    let skip1 = b.push(slu.clone())?;
    b.push(pool.clone())?;
    b.push(conv(w1, w2))?;
    let skip2 = b.push(slu.clone())?;
    b.push(pool)?;
    b.push(conv(w2, w3))?;
    b.push(slu.clone())?;

    b.push(up(w3, w2))?;
    b.push(slu.clone())?;
    b.push(LayerSpec::SkipConcat { from: skip2 })?;
    b.push(conv(2 * w2, w2))?;
    b.push(slu.clone())?;

    b.push(up(w2, w1))?;
    b.push(slu.clone())?;
    b.push(LayerSpec::SkipConcat { from: skip1 })?;
    b.push(conv(2 * w1, w1))?;
    b.push(slu)?;

    b.push(LayerSpec::Conv2d {
        geometry: ConvGeometry::new(w1, 1, 1, 1, 0),
    })?;
    b.push(LayerSpec::Sigmoid)?;
    b.finish(ModelKind::Xunet, input_shape, OutputKind::Mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_uniform;

    #[test]
    fn mlp_shapes() {
        let mut rng = Rng::new(0);
        let m = build_mlp(&[1, 28, 28], DEFAULT_MLP_HIDDEN, 10, &mut rng, Precision::F32).unwrap();
        let out = m.forward(&rng_uniform(&mut rng, &[4, 1, 28, 28])).unwrap();
        assert_eq!(out.shape(), &[4, 10]);
    }

    #[test]
    fn convnet_shapes() {
        let mut rng = Rng::new(0);
        let m = build_convnet(&[3, 32, 32], 10, &mut rng, Precision::F32).unwrap();
        let out = m.forward(&rng_uniform(&mut rng, &[2, 3, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[2, 10]);
    }

    #[test]
    fn xunet_mask_range_and_determinism() {
        let mut rng = Rng::new(0);
        let m = build_xunet(&[1, 28, 28], &XUnetConfig::default(), &mut rng, Precision::F32).unwrap();
        let x = rng_uniform(&mut rng, &[1, 1, 28, 28]);
        let a = m.forward(&x).unwrap();
        assert_eq!(a.shape(), &[1, 1, 28, 28]);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
        assert_eq!(a, m.forward(&x).unwrap());
        // arbitrary finite, far out-of-range inputs
        let wild = x.map(|v| (v - 0.5) * 1e3);
        let b = m.forward(&wild).unwrap();
        assert!(b.min() >= 0.0 && b.max() <= 1.0 && b.all_finite());
    }

    #[test]
    fn xunet_rejects_indivisible_dims() {
        let mut rng = Rng::new(0);
        assert!(build_xunet(&[1, 30, 28], &XUnetConfig::default(), &mut rng, Precision::F32).is_err());
        assert!(build_xunet(&[3, 32, 32], &XUnetConfig::default(), &mut rng, Precision::F32).is_ok());
    }

    #[test]
    fn convnet_input_gradient_nonzero() {
        let mut rng = Rng::new(2);
        let m = build_convnet(&[3, 32, 32], 10, &mut rng, Precision::F64).unwrap();
        let x = rng_uniform(&mut rng, &[1, 3, 32, 32]);
        let (_, g) = m.input_gradient(&x, crate::nn::Objective::CrossEntropy(&[3])).unwrap();
        assert!(g.norm_l2() > 0.0);
    }
}
