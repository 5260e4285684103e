//! Deterministic synthetic image sets that stand in for downloaded data.
//!
//! Pixels are quantized to multiples of 1/255 so every dataset survives a
//! round trip through the byte-oriented file formats unchanged.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// A Gaussian blob whose position depends on the class.
    Blobs,
    /// A horizontal bar whose row depends on the class.
    Bars,
    /// Handwriting-like seven-segment digits on a black background.
    Strokes,
    /// Colored seven-segment digits over smooth colored backgrounds.
    Scenes,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "bars" => Ok(Self::Bars),
            "strokes" => Ok(Self::Strokes),
            "scenes" => Ok(Self::Scenes),
            other => Err(Error::UnknownName {
                kind: "synthetic dataset",
                name: other.into(),
                known: "blobs, bars, strokes, scenes".into(),
            }),
        }
    }
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Bars => "bars",
            Self::Strokes => "strokes",
            Self::Scenes => "scenes",
        }
    }
}

/// Segments a..g of a seven-segment glyph in unit glyph coordinates.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.5)),
];

/// Lit segments per digit, as bit masks over a..g.
const DIGITS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111,
];

/// `n` images of shape `[c, h, w]` with exactly balanced labels (counts
/// differ by at most one), shuffled by `seed`.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, shape: &[usize], classes: usize, seed: u64) -> Result<Dataset> {
    let &[c, h, w] = shape else {
        return Err(invalid(format!("synthetic shape must be [c, h, w], got {shape:?}")));
    };
    if c == 0 || h < 4 || w < 4 {
        return Err(invalid(format!("synthetic images of shape {shape:?} are too small")));
    }
    if classes < 2 || n < classes {
        return Err(invalid(format!("need at least 2 classes and n >= classes, got n {n}, classes {classes}")));
    }
    if matches!(kind, SyntheticKind::Strokes | SyntheticKind::Scenes) && classes > 10 {
        return Err(invalid("digit glyphs support at most 10 classes"));
    }
    if kind == SyntheticKind::Bars && classes > h {
        return Err(invalid("bars need at least one row per class"));
    }
    let base = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    base.fork(u64::MAX).shuffle(&mut labels);
    let per = c * h * w;
    let mut data = Vec::with_capacity(n * per);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = base.fork(i as u64);
        let image = match kind {
            SyntheticKind::Blobs => blob(label, classes, c, h, w, &mut rng),
            SyntheticKind::Bars => bar(label, classes, c, h, w, &mut rng),
            SyntheticKind::Strokes => strokes(label, c, h, w, &mut rng),
            SyntheticKind::Scenes => scene(label, c, h, w, &mut rng),
        };
        data.extend(image.into_iter().map(quantize));
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(images, labels, classes, kind.as_str())
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn blob(label: usize, classes: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let size = h.min(w) as f64;
    let angle = std::f64::consts::TAU * label as f64 / classes as f64;
    let cx = w as f64 / 2.0 + 0.3 * size * angle.cos() + rng.uniform_range(-1.5, 1.5);
    let cy = h as f64 / 2.0 + 0.3 * size * angle.sin() + rng.uniform_range(-1.5, 1.5);
    let sigma = 0.12 * size;
    let amp = rng.uniform_range(0.8, 1.0);
    let plane: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            amp * (-d2 / (2.0 * sigma * sigma)).exp() + rng.uniform_range(0.0, 0.05)
        })
        .collect();
    (0..c).flat_map(|_| plane.iter().copied()).collect()
}

fn bar(label: usize, classes: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let band = h as f64 / classes as f64;
    let centre = (label as f64 + 0.5) * band + rng.uniform_range(-0.15, 0.15) * band;
    let half = (band / 4.0).max(0.5);
    let amp = rng.uniform_range(0.7, 1.0);
    let plane: Vec<f64> = (0..h * w)
        .map(|p| {
            let y = (p / w) as f64 + 0.5;
            let v = if (y - centre).abs() <= half { amp } else { 0.0 };
            v + rng.uniform_range(0.0, 0.05)
        })
        .collect();
    (0..c).flat_map(|_| plane.iter().copied()).collect()
}

/// Stroke coverage in `[0, 1]` of a jittered digit glyph, row-major `h × w`.
fn glyph(digit: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0 + rng.uniform_range(-0.07, 0.07) * wf;
    let cy = hf / 2.0 + rng.uniform_range(-0.07, 0.07) * hf;
    let sx = wf * rng.uniform_range(0.28, 0.4);
    let sy = hf * rng.uniform_range(0.48, 0.6);
    let shear = rng.uniform_range(-0.18, 0.18) * sy;
    let half_width = rng.uniform_range(0.8, 1.5) * hf / 28.0;
    let to_image = |(u, v): (f64, f64)| (cx + sx * (u - 0.5) + shear * (0.5 - v), cy + sy * (v - 0.5));
    let mut segs = Vec::new();
    for (k, &(a, b)) in SEGMENTS.iter().enumerate() {
        if DIGITS[digit] >> k & 1 == 1 {
            let mut jitter = |(u, v): (f64, f64)| (u + rng.uniform_range(-0.06, 0.06), v + rng.uniform_range(-0.04, 0.04));
            let (a, b) = (jitter(a), jitter(b));
            segs.push((to_image(a), to_image(b)));
        }
    }
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            segs.iter()
                .map(|&(a, b)| (1.0 - (segment_distance((x, y), a, b) - half_width)).clamp(0.0, 1.0))
                .fold(0.0, f64::max)
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn strokes(label: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let ink = rng.uniform_range(0.85, 1.0);
    let plane: Vec<f64> = glyph(label, h, w, rng).into_iter().map(|v| v * ink).collect();
    (0..c).flat_map(|_| plane.iter().copied()).collect()
}

fn scene(label: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let cover = glyph(label, h, w, rng);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let (b0, gx, gy) = (rng.uniform_range(0.1, 0.45), rng.uniform_range(-0.15, 0.15), rng.uniform_range(-0.15, 0.15));
        let ink = rng.uniform_range(0.6, 1.0);
        for (p, &cov) in cover.iter().enumerate() {
            let (y, x) = ((p / w) as f64 / h as f64 - 0.5, (p % w) as f64 / w as f64 - 0.5);
            let bg = b0 + gx * x + gy * y + rng.uniform_range(-0.03, 0.03);
            out.push(bg * (1.0 - cov) + ink * cov);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        for kind in [SyntheticKind::Blobs, SyntheticKind::Bars, SyntheticKind::Strokes, SyntheticKind::Scenes] {
            let a = synthetic_dataset(kind, 53, &[1, 16, 16], 5, 7).unwrap();
            assert_eq!(a, synthetic_dataset(kind, 53, &[1, 16, 16], 5, 7).unwrap());
            assert_ne!(a.images, synthetic_dataset(kind, 53, &[1, 16, 16], 5, 8).unwrap().images);
            let mut counts = [0usize; 5];
            a.labels.iter().for_each(|&l| counts[l] += 1);
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            assert!(a.images.data().iter().all(|&v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
        }
    }

    #[test]
    fn digit_glyphs_differ_by_class() {
        let d = synthetic_dataset(SyntheticKind::Strokes, 10, &[1, 28, 28], 10, 1).unwrap();
        let sums: Vec<f64> = (0..10).map(|i| d.images.index_axis0(i).unwrap().sum()).collect();
        assert!(sums.iter().all(|&s| s > 10.0), "{sums:?}");
        assert!(synthetic_dataset(SyntheticKind::Strokes, 20, &[1, 28, 28], 11, 1).is_err());
        assert!(synthetic_dataset(SyntheticKind::Blobs, 3, &[1, 8, 8], 5, 1).is_err());
    }
}
