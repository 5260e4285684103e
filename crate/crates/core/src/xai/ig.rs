use super::{check_target, Explanation, XaiMethod};
use crate::error::{invalid, Result};
use crate::nn::{ModelGraph, Objective};
use crate::tensor::Tensor;

/// Path points evaluated per forward/backward pass.
const CHUNK: usize = 64;

/// Right-point Riemann approximation of integrated gradients:
/// `(x − x′) ⊙ (1/m) Σₖ ∇F(x′ + (k/m)(x − x′))` for `k = 1..=m`.
pub fn integrated_gradients(
    model: &ModelGraph,
    image: &Tensor,
    target: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<Explanation> {
    check_target(model, target)?;
    image.expect_shape(baseline, "integrated gradients baseline")?;
    if steps == 0 {
        return Err(invalid("integrated gradients need at least one step"));
    }
    let diff = image.sub(baseline)?;
    let per = image.len();
    let mut total = vec![0.0; per];
    let mut k = 1;
    while k <= steps {
        let count = CHUNK.min(steps - k + 1);
        let mut points = Vec::with_capacity(count * per);
        for j in 0..count {
            let t = (k + j) as f64 / steps as f64;
            points.extend(baseline.data().iter().zip(diff.data()).map(|(b, d)| b + t * d));
        }
        let mut shape = vec![count];
        shape.extend_from_slice(image.shape());
        let batch = Tensor::new(shape, points)?;
        let targets = vec![target; count];
        let (_, grad) = model.input_gradient(&batch, Objective::TargetLogit(&targets))?;
        for row in grad.data().chunks(per) {
            total.iter_mut().zip(row).for_each(|(acc, g)| *acc += g);
        }
        k += count;
    }
    let m = steps as f64;
    let attribution = diff.zip_map(
        &Tensor::new(image.shape().to_vec(), total)?,
        "integrated gradients",
        |d, g| d * g / m,
    )?;
    let mut e = Explanation::new(attribution, XaiMethod::Ig, target);
    e.steps = Some(steps);
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, ModelKind, NamedParam, OutputKind};
    use crate::tensor::Precision;

    /// F(x) = w·x + c as a flatten + dense graph with two outputs.
    fn linear(w: &[f64]) -> ModelGraph {
        let n = w.len();
        let mut weight = Vec::with_capacity(2 * n);
        for &wi in w {
            weight.push(wi);
            weight.push(-wi);
        }
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
                    tensor: Tensor::new([2], vec![0.25, 0.0]).unwrap(),
                },
            ],
            vec![1, 1, n],
            OutputKind::Logits { classes: 2 },
            Precision::F64,
        )
        .unwrap()
    }

    #[test]
    fn linear_model_closed_form() {
        let w = [0.5, -1.5, 2.0, 0.125];
        let m = linear(&w);
        let x = Tensor::new([1, 1, 4], vec![0.2, 0.4, 0.9, 1.0]).unwrap();
        for steps in [1, 3, 100] {
            let e = integrated_gradients(&m, &x, 0, &x.zeros_like(), steps).unwrap();
            for (i, a) in e.attribution.data().iter().enumerate() {
                assert!((a - w[i] * x.data()[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_path_gives_zero() {
        let m = linear(&[1.0, 2.0]);
        let x = Tensor::new([1, 1, 2], vec![0.3, 0.7]).unwrap();
        let e = integrated_gradients(&m, &x, 1, &x, 8).unwrap();
        assert!(e.attribution.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = linear(&[1.0, 2.0]);
        let x = Tensor::new([1, 1, 2], vec![0.3, 0.7]).unwrap();
        assert!(integrated_gradients(&m, &x, 0, &x, 0).is_err());
        let wrong = Tensor::zeros([1, 2, 1]);
        assert!(integrated_gradients(&m, &x, 0, &wrong, 4).is_err());
        assert!(integrated_gradients(&m, &x, 2, &x.zeros_like(), 4).is_err());
    }
}
