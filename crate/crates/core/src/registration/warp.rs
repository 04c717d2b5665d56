use super::{check_dims, DisplacementField, GrayImage};
use crate::error::Result;

/// Clamps `t` into `[0, n − 1]` and returns the two neighbouring indices and
/// the fractional weight of the upper one.
#[inline]
pub(crate) fn bracket(t: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, max) };
    let i0 = t.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, t - i0 as f64)
}

/// Bilinear sample at a continuous position; outside positions clamp to the
/// nearest edge pixel.
#[inline]
pub fn sample_bilinear(image: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, x1, fx) = bracket(x, image.width());
    let (y0, y1, fy) = bracket(y, image.height());
    let w = image.width();
    let d = image.data();
    let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
    let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Spatial transform: `out(x, y) = moving(x + dx(x, y), y + dy(x, y))`.
pub fn warp_image(moving: &GrayImage, ddf: &DisplacementField) -> Result<GrayImage> {
    check_dims(moving.dims(), ddf.dims())?;
    Ok(GrayImage::from_fn(
        moving.width(),
        moving.height(),
        |x, y| {
            let [dx, dy] = ddf.get(x, y);
            sample_bilinear(moving, x as f64 + dx, y as f64 + dy)
        },
    ))
}
