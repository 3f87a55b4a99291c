//! Gradient-weighted class activation maps over the final dense block.
//!
//! For class `k` with logit `y_k` and final-block activation `A` (`C×h×w`):
//! `α_c = mean_{ij} ∂y_k/∂A_c[i,j]`, `map = ReLU(Σ_c α_c·A_c)`, then divided
//! by its maximum. The logit, not the probability, is differentiated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::netpbm::{write_ppm, GrayImage, RgbImage};
use crate::data::resize::resize_bilinear;
use crate::data::synth::Region;
use crate::densenet::{Model, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BLEND_ALPHA: f64 = 0.5;

/// Colormap anchors at 0, 0.5 and 1: blue, yellow, red.
pub const COLORMAP_ANCHORS: [[f64; 3]; 3] = [[0.0, 0.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Row-major `height×width` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source_layer: String,
    pub class_index: usize,
    /// Peak of `Σ_c α_c·A_c` before ReLU and normalization; `<= 0` means no
    /// region supports the class and the map is all zeros.
    pub raw_max: f64,
}

impl Heatmap {
    pub fn is_empty(&self) -> bool {
        self.raw_max <= 0.0
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Combines a `[C, h, w]` activation with the logit's gradient at that
/// activation into a normalized map.
pub fn heatmap_from_gradients<T: Scalar>(
    activation: &Tensor<T>,
    gradient: &Tensor<T>,
    class_index: usize,
    source_layer: &str,
) -> Result<Heatmap> {
    let shape = activation.shape();
    if shape.len() != 3 || gradient.shape() != shape {
        return Err(Error::InvalidShape(format!(
            "activation {shape:?} and gradient {:?} must be equal [C, h, w]",
            gradient.shape()
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let area = h * w;
    let mut raw = vec![0.0; area];
    for ch in 0..c {
        let gplane = &gradient.data()[ch * area..][..area];
        let alpha = gplane.iter().map(|v| v.as_f64()).sum::<f64>() / area as f64;
        let aplane = &activation.data()[ch * area..][..area];
        for (r, a) in raw.iter_mut().zip(aplane) {
            *r += alpha * a.as_f64();
        }
    }
    let raw_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if raw_max > 0.0 {
        raw.iter().map(|&v| v.max(0.0) / raw_max).collect()
    } else {
        vec![0.0; area]
    };
    Ok(Heatmap {
        values,
        height: h,
        width: w,
        source_layer: source_layer.to_string(),
        class_index,
        raw_max,
    })
}

/// Heatmap plus the model's output for the explained class.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub heatmap: Heatmap,
    pub logit: f64,
    pub probability: f64,
}

/// Explains `class_index` for one prepared `[C, H, W]` image.
pub fn gradcam<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class_index: usize) -> Result<GradCam> {
    let k = model.config().num_classes;
    if class_index >= k {
        return Err(Error::Range(format!("class index {class_index} for a {k}-class model")));
    }
    let batch = Tensor::stack(&[image])?;
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch, Mode::Eval)?;
    let features = g.value(fp.features)?.clone();
    drop(g);

    // re-run the head with the activation as a leaf so its gradient is kept
    let mut g = Graph::new();
    let vars: Vec<Var> = model.params().iter().map(|p| g.constant(p.value.clone())).collect();
    let a = g.leaf(features.clone(), true);
    let (logits, probs) = model.head(&mut g, a, &vars, &mut Mode::Eval)?;
    let pick = g.constant(Tensor::from_fn(&[1, k], |i| if i == class_index { T::one() } else { T::zero() }));
    let selected = g.mul(logits, pick)?;
    let target = g.sum(selected)?;
    let grads = g.backward(target)?;
    let grad = grads.get_or_zeros(a, &features);

    let (_, c, h, w) = features.dims4()?;
    let layer = format!("block{}.output", model.plan().blocks.len() - 1);
    let heatmap = heatmap_from_gradients(
        &features.reshape(&[c, h, w])?,
        &grad.reshape(&[c, h, w])?,
        class_index,
        &layer,
    )?;
    Ok(GradCam {
        heatmap,
        logit: g.value(target)?.item()?.as_f64(),
        probability: g.value(probs)?.data()[class_index].as_f64(),
    })
}

/// Bilinear upsampling to `height×width`; shrinking is refused.
pub fn upsample_heatmap(map: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    if height < map.height || width < map.width {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample a {}x{} map to {height}x{width}",
            map.height, map.width
        )));
    }
    let values = resize_bilinear(&map.values, map.height, map.width, height, width)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Heatmap {
        values,
        height,
        width,
        ..map.clone()
    })
}

/// Piecewise-linear blue→yellow→red color for `v` in `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let (lo, hi, t) = if v <= 0.5 {
        (COLORMAP_ANCHORS[0], COLORMAP_ANCHORS[1], v * 2.0)
    } else {
        (COLORMAP_ANCHORS[1], COLORMAP_ANCHORS[2], (v - 0.5) * 2.0)
    };
    [0, 1, 2].map(|i| lo[i] + (hi[i] - lo[i]) * t)
}

/// `out = (1 − α·v)·gray + α·v·colormap(v)` per pixel, rounded to the
/// nearest byte.
pub fn overlay(image: &GrayImage, map: &Heatmap, blend_alpha: f64) -> Result<RgbImage> {
    if !(blend_alpha > 0.0 && blend_alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("blend alpha {blend_alpha} outside (0, 1]")));
    }
    if (map.height, map.width) != (image.height, image.width) {
        return Err(Error::InvalidShape(format!(
            "heatmap {}x{} does not match image {}x{}",
            map.height, map.width, image.height, image.width
        )));
    }
    let pixels = image
        .pixels
        .iter()
        .zip(&map.values)
        .map(|(&gray, &v)| {
            let a = blend_alpha * v;
            let cm = colormap(v);
            [0, 1, 2].map(|i| ((1.0 - a) * gray as f64 + a * cm[i]).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    })
}

/// Renders [`overlay`] and writes it as binary PPM.
pub fn write_overlay(image: &GrayImage, map: &Heatmap, blend_alpha: f64, path: &Path) -> Result<RgbImage> {
    let rgb = overlay(image, map, blend_alpha)?;
    write_ppm(path, &rgb)?;
    Ok(rgb)
}

/// Share of the map's mass inside `region`; 0 for an all-zero map.
pub fn localization_score(map: &Heatmap, region: &Region) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::InvalidArgument(format!("empty region {region:?}")));
    }
    if region.x1 > map.width || region.y1 > map.height {
        return Err(Error::InvalidArgument(format!(
            "region {region:?} exceeds the {}x{} map",
            map.height, map.width
        )));
    }
    let total: f64 = map.values.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = (region.y0..region.y1)
        .map(|y| map.values[y * map.width + region.x0..y * map.width + region.x1].iter().sum::<f64>())
        .sum();
    Ok(inside / total)
}

/// Per-overlay metadata written next to the PPM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image: String,
    pub class: String,
    pub class_index: usize,
    pub probability: f64,
    pub raw_max: f64,
    /// True when the map is identically zero and the overlay is the plain image.
    pub empty_heatmap: bool,
    pub source_layer: String,
    pub blend_alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization_score: Option<f64>,
}

pub fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
