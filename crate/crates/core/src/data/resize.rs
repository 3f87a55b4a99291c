use crate::data::netpbm::GrayImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear resampling with center-aligned pixels: destination pixel `d`
/// samples source coordinate `(d + 0.5)·src/dst − 0.5`, clamped to the edge.
pub fn resize_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<T>> {
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("target size {th}x{tw} is empty")));
    }
    if h == 0 || w == 0 || src.len() != h * w {
        return Err(Error::InvalidShape(format!("source {h}x{w} with {} values", src.len())));
    }
    if (h, w) == (th, tw) {
        return Ok(src.to_vec());
    }
    let axis = |dst: usize, n_src: usize, n_dst: usize| {
        let pos = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, T::of(pos - lo as f64))
    };
    let cols: Vec<_> = (0..tw).map(|x| axis(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = axis(y, h, th);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Converts a raw grayscale image into a `[C, H, W]` tensor of pixel values
/// (0–255 scale), resized to `target`, optionally replicated to 3 channels.
pub fn prepare_image<T: Scalar>(raw: &GrayImage, target: (usize, usize), replicate_to_3: bool) -> Result<Tensor<T>> {
    let src: Vec<T> = raw.pixels.iter().map(|&p| T::of(p as f64)).collect();
    let plane = resize_bilinear(&src, raw.height, raw.width, target.0, target.1)?;
    if replicate_to_3 {
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![3, target.0, target.1], data)
    } else {
        Tensor::new(vec![1, target.0, target.1], plane)
    }
}
