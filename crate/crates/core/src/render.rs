//! Diverging blue-white-red rendering of relevance maps.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Color for a normalized score in `[-1, 1]`: white at zero, red at `+1`,
/// blue at `-1`, linear in between, rounded half away from zero.
pub fn diverging_rgb(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| libm::round(255.0 * (1.0 - t)) as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Sums channels, divides by the largest absolute value and maps through
/// [`diverging_rgb`]. An all-zero map renders white.
pub fn render_heatmap(relevance: &Tensor) -> Result<Heatmap> {
    let (ch, h, w) = relevance.spatial_dims()?;
    let data = relevance.data();
    let plane: Vec<f64> = (0..h * w).map(|p| (0..ch).map(|c| data[c * h * w + p]).sum()).collect();
    let max_abs = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rgb = Vec::with_capacity(3 * h * w);
    for v in plane {
        let n = if max_abs > 0.0 { v / max_abs } else { 0.0 };
        rgb.extend_from_slice(&diverging_rgb(n));
    }
    Ok(Heatmap {
        width: w,
        height: h,
        rgb,
    })
}
