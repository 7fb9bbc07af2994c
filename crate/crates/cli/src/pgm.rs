//! Binary portable graymap (P5) previews.

use tumorseg::{Image, LabelPlane};

fn header(width: usize, height: usize, maxval: u8) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// 8-bit preview of `image`, mapping `[lo, hi]` to `[0, 255]`.
pub fn image_pgm(image: &Image, lo: f64, hi: f64) -> Vec<u8> {
    let (h, w) = image.dims();
    let mut out = header(w, h, 255);
    let range = hi - lo;
    out.extend(image.data().iter().map(|&v| {
        if range > 0.0 {
            (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Raw label values with maxval 4.
pub fn label_pgm(labels: &LabelPlane) -> Vec<u8> {
    let (h, w) = labels.dims();
    let mut out = header(w, h, 4);
    out.extend_from_slice(labels.data());
    out
}

/// `(lo, hi)` of an image.
pub fn range(image: &Image) -> (f64, f64) {
    image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
