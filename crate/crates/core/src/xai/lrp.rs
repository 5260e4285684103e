use super::{check_target, Explanation, XaiMethod};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelGraph};
use crate::tensor::kernels::{conv2d_forward, conv2d_input_grad, matmul, matmul_nt_acc};
use crate::tensor::Tensor;

/// Relevance totals recorded while propagating, output side first.
#[derive(Debug, Clone, PartialEq)]
pub struct LrpTrace {
    /// `sums[0]` is the target logit; `sums[i + 1]` is the total relevance
    /// after propagating back through the `i`-th layer counted from the top.
    pub sums: Vec<f64>,
}

/// Epsilon-rule relevance propagation from the target logit to the input.
pub fn lrp_epsilon(model: &ModelGraph, image: &Tensor, target: usize, eps: f64) -> Result<Explanation> {
    Ok(lrp_epsilon_trace(model, image, target, eps)?.0)
}

/// [`lrp_epsilon`] together with the per-layer relevance totals.
pub fn lrp_epsilon_trace(model: &ModelGraph, image: &Tensor, target: usize, eps: f64) -> Result<(Explanation, LrpTrace)> {
    check_target(model, target)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(crate::error::invalid("lrp epsilon must be positive"));
    }
    if let Some(bad) = model.layers().iter().find(|l| !supported(l)) {
        return Err(Error::UnsupportedLayer {
            method: "lrp",
            layer: bad.name().to_string(),
        });
    }
    let acts = model.activations(&image.unsqueeze0())?;
    let logits = acts.last().expect("classifier has layers");
    let mut relevance = vec![0.0; logits.len()];
    relevance[target] = logits.data()[target];
    let mut sums = vec![relevance[target]];

    let params = model.params();
    let mut param_idx = params.len();
    for (i, layer) in model.layers().iter().enumerate().rev() {
        let input = &acts[i];
        relevance = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                param_idx -= 2;
                let w = params[param_idx].tensor.data();
                let z = matmul(input.data(), w, 1, inputs, outputs);
                let s = stabilized_ratio(&relevance, &z, eps);
                let mut c = vec![0.0; inputs];
                matmul_nt_acc(&s, w, 1, outputs, inputs, &mut c);
                hadamard(input.data(), &c)
            }
            LayerSpec::Conv2d { geometry } => {
                param_idx -= 2;
                let w = params[param_idx].tensor.data();
                let (h, wd) = (input.shape()[2], input.shape()[3]);
                let (z, _, _) = conv2d_forward(input.data(), 1, h, wd, &geometry, w, None)?;
                let s = stabilized_ratio(&relevance, &z, eps);
                let c = conv2d_input_grad(1, h, wd, &geometry, w, &s)?;
                hadamard(input.data(), &c)
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let shape = input.shape();
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let (_, argmax, _, _) =
                    crate::tensor::kernels::maxpool_forward(input.data(), planes, h, w, kernel, stride)?;
                let mut routed = vec![0.0; input.len()];
                for (r, &src) in relevance.iter().zip(&argmax) {
                    routed[src] += r;
                }
                routed
            }
            // ReLU and flatten pass relevance through unchanged.
            _ => relevance,
        };
        sums.push(relevance.iter().sum());
    }
    let mut attribution = Tensor::new(image.shape().to_vec(), relevance)?;
    model.precision().round_tensor(&mut attribution);
    let mut e = Explanation::new(attribution, XaiMethod::Lrp, target);
    e.epsilon = Some(eps);
    Ok((e, LrpTrace { sums }))
}

fn supported(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::MaxPool2d { .. } | LayerSpec::Relu | LayerSpec::Flatten
    )
}

/// `R_k / (z_k + eps·sign(z_k))` with `sign(0) = +1`, so a zero
/// pre-activation never divides by zero.
fn stabilized_ratio(relevance: &[f64], z: &[f64], eps: f64) -> Vec<f64> {
    relevance
        .iter()
        .zip(z)
        .map(|(&r, &zk)| {
            if r == 0.0 {
                0.0
            } else {
                r / (zk + if zk >= 0.0 { eps } else { -eps })
            }
        })
        .collect()
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_convnet, build_mlp, ModelKind, NamedParam, OutputKind};
    use crate::tensor::{rng_uniform, Precision, Rng};

    fn single_dense(w: &[f64]) -> ModelGraph {
        let n = w.len();
        let weight: Vec<f64> = w.iter().flat_map(|&v| [v, 1.0]).collect();
        ModelGraph::new(
            ModelKind::Custom,
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: n, outputs: 2 }],
            vec![
                NamedParam {
                    name: "w".into(),
                    tensor: Tensor::new([n, 2], weight).unwrap(),
                },
                NamedParam {
                    name: "b".into(),
                    tensor: Tensor::zeros([2]),
                },
            ],
            vec![1, 1, n],
            OutputKind::Logits { classes: 2 },
            Precision::F64,
        )
        .unwrap()
    }

    #[test]
    fn single_dense_layer_closed_form() {
        let w = [0.5, -2.0, 1.5];
        let m = single_dense(&w);
        let x = Tensor::new([1, 1, 3], vec![0.8, 0.1, 0.6]).unwrap();
        let e = lrp_epsilon(&m, &x, 0, 1e-9).unwrap();
        for (i, r) in e.attribution.data().iter().enumerate() {
            assert!((r - w[i] * x.data()[i]).abs() < 1e-8, "{r}");
        }
    }

    #[test]
    fn zero_input_gives_zero_relevance() {
        let m = single_dense(&[1.0, 2.0, 3.0]);
        let x = Tensor::zeros([1, 1, 3]);
        let e = lrp_epsilon(&m, &x, 0, 1e-6).unwrap();
        assert!(e.attribution.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conservation_on_random_models() {
        let mut rng = Rng::new(5);
        let mlp = build_mlp(&[1, 8, 8], &[16, 8], 4, &mut rng, Precision::F64).unwrap();
        let cnn = build_convnet(&[1, 8, 8], 4, &mut rng, Precision::F64).unwrap();
        for m in [&mlp, &cnn] {
            let x = rng_uniform(&mut rng, &[1, 8, 8]);
            let (e, trace) = lrp_epsilon_trace(m, &x, 1, 1e-6).unwrap();
            let logit = m.logits(&x).unwrap()[1];
            assert_eq!(trace.sums[0], logit);
            assert_eq!(trace.sums.len(), m.layers().len() + 1);
            assert!((e.attribution.sum() - logit).abs() <= 0.05 * logit.abs().max(1e-3));
        }
    }

    #[test]
    fn slu_is_rejected() {
        let mut rng = Rng::new(0);
        let xunet = crate::nn::build_xunet(&[1, 8, 8], &Default::default(), &mut rng, Precision::F32).unwrap();
        let x = Tensor::zeros([1, 8, 8]);
        // the mask model has no classes, so target validation already fails
        assert!(lrp_epsilon(&xunet, &x, 0, 1e-6).is_err());
        let slu_net = ModelGraph::new(
            ModelKind::Custom,
            vec![LayerSpec::Flatten, LayerSpec::Slu { a: 0.5 }],
            vec![],
            vec![1, 1, 2],
            OutputKind::Logits { classes: 2 },
            Precision::F64,
        )
        .unwrap();
        let err = lrp_epsilon(&slu_net, &Tensor::zeros([1, 1, 2]), 0, 1e-6).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLayer { .. }), "{err}");
    }
}
