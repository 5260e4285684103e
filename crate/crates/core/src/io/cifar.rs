use std::path::Path;

use super::{byte_to_unit, unit_to_byte, Dataset};
use crate::error::{format_err, invalid, Result};
use crate::tensor::Tensor;

/// One label byte followed by 3×32×32 channel-planar pixels.
pub const CIFAR_RECORD: usize = 3073;
const PIXELS: usize = CIFAR_RECORD - 1;

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10(paths: &[&Path]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(invalid("no CIFAR-10 batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        let context = format!("cifar batch {}", path.display());
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                context,
                format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            if record[0] >= 10 {
                return Err(format_err(context, format!("label {} is not below 10", record[0])));
            }
            labels.push(usize::from(record[0]));
            pixels.extend(record[1..].iter().map(|&b| byte_to_unit(b)));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, "cifar10")
}

/// Writes a `[n, 3, 32, 32]` dataset in the CIFAR-10 binary layout.
pub fn write_cifar10(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.image_shape() != [3, 32, 32] {
        return Err(invalid(format!("CIFAR-10 images are 3x32x32, got {:?}", dataset.image_shape())));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        if label >= 10 {
            return Err(invalid(format!("CIFAR-10 label {label} is not below 10")));
        }
        out.push(label as u8);
        for &v in &dataset.images.data()[i * PIXELS..(i + 1) * PIXELS] {
            out.push(unit_to_byte(v)?);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        std::fs::write(&p, &rec).unwrap();
        let d = load_cifar10(&[&p]).unwrap();
        assert_eq!((d.len(), d.labels[0]), (1, 7));
        assert!(d.images.data().iter().all(|&v| v == 0.0));

        std::fs::write(&p, &rec[..PIXELS]).unwrap();
        assert!(load_cifar10(&[&p]).is_err());
        rec[0] = 10;
        std::fs::write(&p, &rec).unwrap();
        assert!(load_cifar10(&[&p]).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let px: Vec<f64> = (0..2 * PIXELS).map(|i| byte_to_unit((i % 251) as u8)).collect();
        let d = Dataset::new(Tensor::new([2, 3, 32, 32], px).unwrap(), vec![4, 9], 10, "c").unwrap();
        write_cifar10(&d, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 2 * CIFAR_RECORD as u64);
        let back = load_cifar10(&[&p, &p]).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.slice(0, 2).unwrap().images, d.images);
    }
}
