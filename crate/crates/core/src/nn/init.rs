use crate::error::{invalid, Result};
use crate::tensor::{Precision, Rng, Tensor};

/// Variance of the normal initializer:
/// `1 / (((in + out) / 2) · kernel_h · kernel_w)`.
///
/// Dense layers use a 1×1 kernel, which gives `2 / (in + out)`.
pub fn init_variance(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> f64 {
    let mean_channels = (in_channels + out_channels) as f64 / 2.0;
    1.0 / (mean_channels * (kernel_h * kernel_w) as f64)
}

/// Normal initializer specification for one weight tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub mean: f64,
    pub variance: f64,
}

impl InitSpec {
    pub fn for_kernel(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(invalid("initializer dimensions must be at least 1"));
        }
        Ok(Self {
            mean: 0.0,
            variance: init_variance(in_channels, out_channels, kernel_h, kernel_w),
        })
    }

    pub fn sample(&self, shape: &[usize], rng: &mut Rng, precision: Precision) -> Tensor {
        let std = self.variance.sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| precision.round(self.mean + std * rng.normal())).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Convolution weights `[out, in, kh, kw]` drawn from the normal initializer.
pub fn init_conv(
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    rng: &mut Rng,
    precision: Precision,
) -> Result<Tensor> {
    let spec = InitSpec::for_kernel(in_channels, out_channels, kernel_h, kernel_w)?;
    Ok(spec.sample(&[out_channels, in_channels, kernel_h, kernel_w], rng, precision))
}

/// Transposed-convolution weights `[in, out, kh, kw]`.
pub fn init_deconv(
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    rng: &mut Rng,
    precision: Precision,
) -> Result<Tensor> {
    let spec = InitSpec::for_kernel(in_channels, out_channels, kernel_h, kernel_w)?;
    Ok(spec.sample(&[in_channels, out_channels, kernel_h, kernel_w], rng, precision))
}

/// Dense weights `[in, out]`.
pub fn init_dense(inputs: usize, outputs: usize, rng: &mut Rng, precision: Precision) -> Result<Tensor> {
    let spec = InitSpec::for_kernel(inputs, outputs, 1, 1)?;
    Ok(spec.sample(&[inputs, outputs], rng, precision))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        assert!((init_variance(8, 16, 3, 3) - 1.0 / 108.0).abs() < 1e-15);
        assert_eq!(init_variance(1, 1, 1, 1), 1.0);
        assert_eq!(init_variance(10, 30, 1, 1), 2.0 / 40.0);
        // non-square kernels use the element count
        assert_eq!(init_variance(2, 2, 1, 3), 1.0 / 6.0);
    }

    #[test]
    fn empirical_variance_within_ten_percent() {
        let mut rng = Rng::new(11);
        // 8*16*9 = 1152 per tensor; draw enough tensors for 10^4 samples
        let mut values = Vec::new();
        while values.len() < 10_000 {
            let w = init_conv(8, 16, 3, 3, &mut rng, Precision::F64).unwrap();
            values.extend_from_slice(w.data());
        }
        values.truncate(10_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        let target = 1.0 / 108.0;
        assert!((var - target).abs() / target < 0.1, "var {var}");
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(InitSpec::for_kernel(0, 1, 1, 1).is_err());
        assert!(init_conv(1, 1, 0, 3, &mut Rng::new(0), Precision::F32).is_err());
    }
}
