use std::path::Path;

use super::{byte_to_unit, unit_to_byte, Dataset};
use crate::error::{format_err, invalid, Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, context: &str) -> Result<u32> {
    let slice = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        context: context.to_string(),
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

/// Parses an IDX file, returning its dimensions and payload. `magic` must
/// match the unsigned-byte type code and dimension count.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, context: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, context)?;
    if found != magic {
        return Err(format_err(context, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, context).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            context: context.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(format_err(context, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an IDX image/label pair (unsigned-byte images of rank 3, labels of
/// rank 1). Pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    let (dims, pixels) = parse_idx(&img_bytes, IMAGES_MAGIC, "idx images")?;
    let (ldims, raw_labels) = parse_idx(&lbl_bytes, LABELS_MAGIC, "idx labels")?;
    if dims[0] != ldims[0] {
        return Err(format_err(
            "idx",
            format!("{} images but {} labels", dims[0], ldims[0]),
        ));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], pixels.iter().map(|&b| byte_to_unit(b)).collect())?;
    Dataset::new(images, labels, classes, "idx")
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = dataset.images.shape();
    if shape[1] != 1 {
        return Err(invalid("IDX images must have one channel"));
    }
    if dataset.labels.iter().any(|&l| l > 255) {
        return Err(invalid("IDX labels must fit in a byte"));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [shape[0], shape[2], shape[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in dataset.images.data() {
        img.push(unit_to_byte(v)?);
    }
    let mut lbl = Vec::with_capacity(8 + dataset.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lbl.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(images, img)?;
    std::fs::write(labels, lbl)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn two_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[2, 28, 28]);
        img.extend((0..1568).map(|i| (i % 256) as u8));
        let mut lbl = header(LABELS_MAGIC, &[2]);
        lbl.extend([3, 9]);
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lbl).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.images.shape(), &[2, 1, 28, 28]);
        assert_eq!(d.images.data()[255], 1.0);
        assert_eq!(d.labels, vec![3, 9]);

        // labels magic on the image path
        std::fs::write(&ip, &lbl).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        // truncated pixels
        std::fs::write(&ip, &img[..img.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));
        // count mismatch
        std::fs::write(&ip, &img).unwrap();
        let mut one = header(LABELS_MAGIC, &[1]);
        one.push(0);
        std::fs::write(&lp, &one).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn write_then_load_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<f64> = (0..8).map(|i| f64::from(i * 30) / 255.0).collect();
        let d = Dataset::new(Tensor::new([2, 1, 2, 2], pixels).unwrap(), vec![1, 0], 2, "x").unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &ip, &lp).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[16..], &[0, 30, 60, 90, 120, 150, 180, 210]);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(back.labels, d.labels);
    }
}
