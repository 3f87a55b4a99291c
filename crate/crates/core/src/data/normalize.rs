use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and (floored) population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Statistics over every pixel of every `[C, H, W]` training image.
pub fn compute_stats<T: Scalar>(train_images: &[Tensor<T>]) -> Result<NormalizationStats> {
    let first = train_images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training images to compute statistics from".into()))?;
    let c = first.shape()[0];
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for img in train_images {
        if img.shape() != first.shape() {
            return Err(Error::InvalidShape(format!("{:?} vs {:?}", img.shape(), first.shape())));
        }
        let plane = img.len() / c;
        for ch in 0..c {
            sum[ch] += img.data()[ch * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
            count[ch] += plane;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0f64; c];
    for img in train_images {
        let plane = img.len() / c;
        for ch in 0..c {
            sq[ch] += img.data()[ch * plane..][..plane]
                .iter()
                .map(|v| (v.as_f64() - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(s, &n)| (s / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

pub fn apply_stats<T: Scalar>(image: &Tensor<T>, stats: &NormalizationStats) -> Result<Tensor<T>> {
    let c = image.shape().first().copied().unwrap_or(0);
    if c != stats.mean.len() || image.shape().len() != 3 {
        return Err(Error::InvalidShape(format!(
            "image {:?} vs stats for {} channels",
            image.shape(),
            stats.mean.len()
        )));
    }
    let plane = image.len() / c;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            T::of((v.as_f64() - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR))
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

pub fn save_stats(path: &Path, stats: &NormalizationStats) -> Result<()> {
    let text = serde_json::to_string_pretty(stats)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<NormalizationStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stats: NormalizationStats = serde_json::from_str(&text)?;
    if stats.mean.len() != stats.std.len() || stats.mean.is_empty() {
        return Err(Error::Format(format!("{}: malformed stats", path.display())));
    }
    Ok(stats)
}
