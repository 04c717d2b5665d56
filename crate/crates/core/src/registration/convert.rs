use super::{warp, GrayImage, RgbImage};

/// Luminance `0.299·r + 0.587·g + 0.114·b`.
///
/// Evaluated as `r + 0.587·(g − r) + 0.114·(b − r)` so that gray input maps
/// to itself exactly.
pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let [r, g, b] = image.get(x, y);
        r + 0.587 * (g - r) + 0.114 * (b - r)
    })
}

/// HSV saturation `(max − min) / max`, zero for black pixels.
pub fn saturation_channel(image: &RgbImage) -> GrayImage {
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let [r, g, b] = image.get(x, y);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        if max <= 0.0 {
            0.0
        } else {
            (max - min) / max
        }
    })
}

/// Bilinear resampling with pixel-center alignment: destination pixel `i`
/// samples source coordinate `(i + 0.5)·src/dst − 0.5`, clamped to the edge.
///
/// A factor-two reduction therefore averages exact 2×2 blocks.
pub fn resize(image: &GrayImage, dims: (usize, usize)) -> GrayImage {
    let (w, h) = dims;
    assert!(w > 0 && h > 0, "resize target must be non-empty");
    if image.dims() == dims {
        return image.clone();
    }
    let sx = image.width() as f64 / w as f64;
    let sy = image.height() as f64 / h as f64;
    GrayImage::from_fn(w, h, |x, y| {
        warp::sample_bilinear(
            image,
            (x as f64 + 0.5) * sx - 0.5,
            (y as f64 + 0.5) * sy - 0.5,
        )
    })
}
