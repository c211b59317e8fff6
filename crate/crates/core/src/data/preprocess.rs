use super::{GrayImage, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear resampling of a row-major grid with corner-aligned sampling, so
/// corner pixels are preserved and same-size resizing is exact.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || out_w == 0 || out_h == 0 || src.len() != width * height {
        return Err(Error::invalid("resize_bilinear", format!("{width}x{height} -> {out_w}x{out_h} with {} values", src.len())));
    }
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, height);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, width);
            let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
            let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Bilinear resize to `size × size` followed by division by 255; returns `[1,size,size]`.
pub fn preprocess(raw: &GrayImage, size: usize) -> Result<Tensor> {
    if raw.width == 0 || raw.height == 0 || raw.pixels.is_empty() {
        return Err(Error::invalid("preprocess", "empty image"));
    }
    let src: Vec<f64> = raw.pixels.iter().map(|&p| f64::from(p)).collect();
    let resized = if raw.width == size && raw.height == size {
        src
    } else {
        resize_bilinear(&src, raw.width, raw.height, size, size)?
    };
    Tensor::new(&[1, size, size], resized.into_iter().map(|v| v / 255.0).collect())
}

/// Nearest-neighbour resize of a label map (labels are never blended).
pub fn resize_mask_nearest(mask: &LabelMap, size: usize) -> Result<LabelMap> {
    if size == 0 {
        return Err(Error::invalid("resize_mask_nearest", "target size must be >= 1"));
    }
    if mask.width == size && mask.height == size {
        return Ok(mask.clone());
    }
    let pick = |o: usize, n_in: usize| ((o * 2 + 1) * n_in / (size * 2)).min(n_in - 1);
    let mut labels = Vec::with_capacity(size * size);
    for oy in 0..size {
        let sy = pick(oy, mask.height);
        for ox in 0..size {
            labels.push(mask.labels[sy * mask.width + pick(ox, mask.width)]);
        }
    }
    LabelMap::new(size, size, labels)
}
