//! Dice and mean IoU on binary masks, averaged per image.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;

use crate::error::{shape_err, Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{} values for a {height}x{width} mask", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(shape_err!("ragged mask rows"));
        }
        Self::new(h, w, rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect())
    }

    /// Thresholds a `(H, W)` logit map at 0 (probability 0.5); 0 itself is background.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (h, w) = logits.dims2()?;
        let v: Vec<f32> = logits.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        Self::new(h, w, v.into_iter().map(|x| x > 0.0).collect())
    }

    /// Reads a `(H, W)` tensor holding exactly 0 or 1.
    pub fn from_binary_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let v: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::Dataset(format!("mask value {bad} is not binary")));
        }
        Self::new(h, w, v.into_iter().map(|x| x == 1.0).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    Ok(())
}

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize) {
    let inter = pred.data.iter().zip(&gt.data).filter(|(p, g)| **p && **g).count();
    (inter, pred.count(), gt.count())
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// Lesion-class IoU; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiouMode {
    /// Mean of background and lesion IoU.
    #[default]
    TwoClass,
    /// Lesion IoU only.
    LesionOnly,
}

impl MiouMode {
    pub fn from_two_class_flag(two_class: bool) -> Self {
        if two_class {
            Self::TwoClass
        } else {
            Self::LesionOnly
        }
    }
}

pub fn miou(pred: &BinaryMask, gt: &BinaryMask, mode: MiouMode) -> Result<f64> {
    let lesion = iou(pred, gt)?;
    Ok(match mode {
        MiouMode::LesionOnly => lesion,
        MiouMode::TwoClass => 0.5 * (lesion + iou(&pred.complement(), &gt.complement())?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    pub dice: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub miou: f64,
    pub n_images: usize,
    pub per_image: Option<Vec<ImageScore>>,
}

impl MetricsReport {
    /// Mean of per-image scores.
    pub fn from_scores(scores: Vec<ImageScore>, keep_per_image: bool) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
        }
        let n = scores.len() as f64;
        let dice = scores.iter().map(|s| s.dice).sum::<f64>() / n;
        let miou = scores.iter().map(|s| s.miou).sum::<f64>() / n;
        Ok(Self {
            dice,
            miou,
            n_images: scores.len(),
            per_image: keep_per_image.then_some(scores),
        })
    }

    /// Flat `key=value` lines; per-image rows are `image.<i>.dice` / `image.<i>.miou`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dice={}", self.dice);
        let _ = writeln!(s, "miou={}", self.miou);
        let _ = writeln!(s, "n_images={}", self.n_images);
        if let Some(per) = &self.per_image {
            for (i, p) in per.iter().enumerate() {
                let _ = writeln!(s, "image.{i}.dice={}", p.dice);
                let _ = writeln!(s, "image.{i}.miou={}", p.miou);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Scores prediction/ground-truth pairs and averages per image.
pub fn evaluate_pairs<'a, I>(pairs: I, mode: MiouMode, keep_per_image: bool) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>,
{
    let scores = pairs
        .into_iter()
        .map(|(p, g)| {
            Ok(ImageScore {
                dice: dice(p, g)?,
                miou: miou(p, g, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scores(scores, keep_per_image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let g = BinaryMask::from_rows(&[&[1, 0], &[1, 1]]).unwrap();
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        assert_eq!(miou(&g, &g, MiouMode::TwoClass).unwrap(), 1.0);
    }

    #[test]
    fn empty_empty_is_one() {
        let e = BinaryMask::from_rows(&[&[0, 0], &[0, 0]]).unwrap();
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(miou(&e, &e, MiouMode::TwoClass).unwrap(), 1.0);
        assert_eq!(miou(&e, &e, MiouMode::LesionOnly).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = BinaryMask::from_rows(&[&[0, 0]]).unwrap();
        let b = BinaryMask::from_rows(&[&[0], &[0]]).unwrap();
        assert!(dice(&a, &b).is_err());
        assert!(miou(&a, &b, MiouMode::TwoClass).is_err());
    }

    #[test]
    fn logits_threshold_at_zero() {
        let t = Tensor::from_vec(vec![-1f32, 0.0, 1e-6, 3.0], (2, 2), &candle_core::Device::Cpu).unwrap();
        let m = BinaryMask::from_logits(&t).unwrap();
        assert_eq!(m.data, vec![false, false, true, true]);
    }

    #[test]
    fn non_binary_tensor_rejected() {
        let t = Tensor::from_vec(vec![0f32, 0.5], (1, 2), &candle_core::Device::Cpu).unwrap();
        assert!(BinaryMask::from_binary_tensor(&t).is_err());
    }

    #[test]
    fn kv_serialization() {
        let r = MetricsReport::from_scores(
            vec![ImageScore { dice: 1.0, miou: 0.5 }, ImageScore { dice: 0.5, miou: 0.5 }],
            true,
        )
        .unwrap();
        let s = r.to_kv_string();
        assert!(s.starts_with("dice=0.75\nmiou=0.5\nn_images=2\n"));
        assert!(s.contains("image.1.dice=0.5"));
        assert!(MetricsReport::from_scores(vec![], false).is_err());
    }
}
