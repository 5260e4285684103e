use std::path::Path;

use super::unit_to_byte;
use crate::error::{format_err, invalid, Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"XTN1";

/// Binary PGM (`P5`, maxval 255) of a `[h, w]` or `[1, h, w]` image.
pub fn pgm_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *t.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "export_pgm",
                detail: format!("expected [h, w] or [1, h, w], got {:?}", t.shape()),
            })
        }
    };
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    for &v in t.data() {
        out.push(unit_to_byte(v)?);
    }
    Ok(out)
}

pub fn export_pgm(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(t)?)?;
    Ok(())
}

/// Flat tensor file: `XTN1`, little-endian `u32` rank, `u32` dims, then
/// little-endian `f32` values.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let ctx = format!("tensor file {}", path.display());
    let truncated = |expected: usize| Error::Truncated {
        context: ctx.clone(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(format_err(ctx, "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes")) as usize;
    let rank = word(4);
    if rank > 8 {
        return Err(invalid(format!("tensor rank {rank} is implausible")));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    let expected = header + 4 * shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_examples() {
        let mut expected = b"P5 2 2 255\n".to_vec();
        expected.extend([0, 0, 0, 0]);
        assert_eq!(pgm_bytes(&Tensor::zeros([2, 2])).unwrap(), expected);
        let t = Tensor::new([1, 1, 3], vec![1.0, 0.5, 0.25]).unwrap();
        let b = pgm_bytes(&t).unwrap();
        assert_eq!(&b[b.len() - 3..], &[255, 128, 64]);
        assert!(pgm_bytes(&Tensor::full([1, 1], 1.5)).is_err());
        assert!(pgm_bytes(&Tensor::zeros([2, 1, 1])).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = Tensor::new([2, 3], vec![0.5, -1.0, 2.25, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        save_tensor(&t, &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_tensor(&p).is_err());
    }
}
