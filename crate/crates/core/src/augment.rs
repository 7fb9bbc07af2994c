//! Stochastic training-time augmentation applied jointly to an image and its
//! label plane.
//!
//! Geometric transforms (flip, rotation, shear, zoom, shift) are folded into a
//! single affine matrix about the image center and combined with an optional
//! elastic displacement field, so each sample is resampled exactly once:
//! bilinear for intensities, nearest-neighbor for labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::plane::{Image, LabelPlane, Plane};

/// Ranges and switches for every augmentation. Defaults reproduce the
/// reference training setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shift as a fraction of each dimension.
    pub shift_frac: f64,
    /// Maximum horizontal shear factor.
    pub shear_frac: f64,
    /// Maximum absolute relative zoom.
    pub zoom_frac: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub flip: bool,
    pub rotation: bool,
    pub shift: bool,
    pub shear: bool,
    pub zoom: bool,
    pub brightness: bool,
    pub elastic: bool,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotation_deg: 20.0,
            shift_frac: 0.10,
            shear_frac: 0.20,
            zoom_frac: 0.10,
            gamma_min: 0.8,
            gamma_max: 1.2,
            elastic_alpha: 720.0,
            elastic_sigma: 24.0,
            flip: true,
            rotation: true,
            shift: true,
            shear: true,
            zoom: true,
            brightness: true,
            elastic: true,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// A spec with every transform switched off.
    pub fn disabled() -> Self {
        Self {
            flip: false,
            rotation: false,
            shift: false,
            shear: false,
            zoom: false,
            brightness: false,
            elastic: false,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, p) in [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("shift_frac", self.shift_frac),
            ("shear_frac", self.shear_frac),
            ("elastic_alpha", self.elastic_alpha),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                v.push(format!("{name} must be non-negative, got {r}"));
            }
        }
        if !(0.0..1.0).contains(&self.zoom_frac) {
            v.push(format!(
                "zoom_frac must lie in [0, 1), got {}",
                self.zoom_frac
            ));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max) {
            v.push(format!(
                "gamma range must satisfy 0 < gamma_min <= gamma_max, got [{}, {}]",
                self.gamma_min, self.gamma_max
            ));
        }
        if self.elastic_sigma.is_nan() || self.elastic_sigma <= 0.0 {
            v.push(format!(
                "elastic_sigma must be positive, got {}",
                self.elastic_sigma
            ));
        }
        v
    }
}

/// One concrete realization of the augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    /// Horizontal shift as a fraction of the width.
    pub shift_x: f64,
    /// Vertical shift as a fraction of the height.
    pub shift_y: f64,
    pub shear: f64,
    pub zoom: f64,
    pub gamma: f64,
    pub elastic: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            angle_deg: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            shear: 0.0,
            zoom: 1.0,
            gamma: 1.0,
            elastic: false,
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Draws every augmentation parameter uniformly from its range. Disabled
/// transforms yield their identity value without consuming a different
/// number of random draws, so toggling one switch does not reshuffle the rest.
pub fn sample_params<R: Rng>(spec: &AugmentationSpec, rng: &mut R) -> AugmentDraw {
    let flip_h = rng.random_bool(spec.flip_h_prob.clamp(0.0, 1.0));
    let flip_v = rng.random_bool(spec.flip_v_prob.clamp(0.0, 1.0));
    let angle = symmetric(rng, spec.rotation_deg);
    let sx = symmetric(rng, spec.shift_frac);
    let sy = symmetric(rng, spec.shift_frac);
    let shear = if spec.shear_frac == 0.0 {
        0.0
    } else {
        rng.random_range(0.0..=spec.shear_frac)
    };
    let zoom = 1.0 + symmetric(rng, spec.zoom_frac);
    let gamma = if spec.gamma_min == spec.gamma_max {
        spec.gamma_min
    } else {
        rng.random_range(spec.gamma_min..=spec.gamma_max)
    };
    AugmentDraw {
        flip_h: spec.flip && flip_h,
        flip_v: spec.flip && flip_v,
        angle_deg: if spec.rotation { angle } else { 0.0 },
        shift_x: if spec.shift { sx } else { 0.0 },
        shift_y: if spec.shift { sy } else { 0.0 },
        shear: if spec.shear { shear } else { 0.0 },
        zoom: if spec.zoom { zoom } else { 1.0 },
        gamma: if spec.brightness { gamma } else { 1.0 },
        elastic: spec.elastic,
    }
}

/// Homogeneous 3x3 transform acting on `(x, y, 1)` with `x` the column and
/// `y` the row coordinate.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn translation(tx: f64, ty: f64) -> Mat3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

pub fn flip(horizontal: bool, vertical: bool) -> Mat3 {
    let sx = if horizontal { -1.0 } else { 1.0 };
    let sy = if vertical { -1.0 } else { 1.0 };
    [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rotation(angle_deg: f64) -> Mat3 {
    if angle_deg == 0.0 {
        return IDENTITY;
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn shear_x(factor: f64) -> Mat3 {
    [[1.0, factor, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn scale(factor: f64) -> Mat3 {
    [[factor, 0.0, 0.0], [0.0, factor, 0.0], [0.0, 0.0, 1.0]]
}

/// Forward transform for `draw` on a `height x width` plane: about the
/// center, flip, then rotate, shear, zoom and finally shift.
pub fn affine_matrix(draw: &AugmentDraw, height: usize, width: usize) -> Mat3 {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let steps = [
        flip(draw.flip_h, draw.flip_v),
        rotation(draw.angle_deg),
        shear_x(draw.shear),
        scale(draw.zoom),
        translation(draw.shift_x * width as f64, draw.shift_y * height as f64),
    ];
    let mut m = translation(-cx, -cy);
    for step in &steps {
        m = matmul(step, &m);
    }
    matmul(&translation(cx, cy), &m)
}

/// Inverse of an affine (last row `0 0 1`) matrix.
pub fn invert_affine(m: &Mat3) -> Result<Mat3> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::InvalidArgument("affine matrix is singular".into()));
    }
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    let tx = -(a * m[0][2] + b * m[1][2]);
    let ty = -(c * m[0][2] + d * m[1][2]);
    Ok([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]])
}

/// Per-pixel displacement in pixels; `dx` along columns, `dy` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dx: Image,
    pub dy: Image,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            dx: Plane::filled(height, width, 0.0),
            dy: Plane::filled(height, width, 0.0),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.dx
            .data()
            .iter()
            .chain(self.dy.data())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur(plane: &Image, kernel: &[f64]) -> Image {
    let (h, w) = plane.dims();
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let acc = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * plane.get(y, clamp(x as isize + j as isize - r, w)))
                .sum();
            tmp.set(y, x, acc);
        }
    }
    let mut out = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let acc = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp.get(clamp(y as isize + j as isize - r, h), x))
                .sum();
            out.set(y, x, acc);
        }
    }
    out
}

/// Random elastic displacement: uniform(-1, 1) noise per pixel, smoothed
/// with a normalized Gaussian of std `sigma` (truncated at 4 sigma, edges
/// replicated), scaled by `alpha`. The result is not renormalized.
pub fn elastic_field<R: Rng>(
    height: usize,
    width: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DisplacementField> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "elastic sigma must be positive, got {sigma}"
        )));
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "elastic alpha must be non-negative, got {alpha}"
        )));
    }
    let mut noise = || {
        let data = (0..height * width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Plane::new(height, width, data)
    };
    let (nx, ny) = (noise()?, noise()?);
    if alpha == 0.0 {
        return Ok(DisplacementField::zeros(height, width));
    }
    let kernel = gaussian_kernel(sigma);
    let scale = |p: Image| {
        let (h, w) = p.dims();
        Plane::new(h, w, p.into_data().into_iter().map(|v| v * alpha).collect())
    };
    Ok(DisplacementField {
        dx: scale(blur(&nx, &kernel))?,
        dy: scale(blur(&ny, &kernel))?,
    })
}

/// Snaps coordinates that are integral up to rounding noise so that exact
/// permutations (flips, identity) resample bit-exactly.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (h, w) = img.dims();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let fetch = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img.get(yy as usize, xx as usize)
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return fetch(y0, x0);
    }
    let top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x0 + 1.0) * fx;
    let bottom = fetch(y0 + 1.0, x0) * (1.0 - fx) + fetch(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(lbl: &LabelPlane, x: f64, y: f64) -> u8 {
    let (h, w) = lbl.dims();
    let (xr, yr) = (x.round(), y.round());
    if yr < 0.0 || xr < 0.0 || yr >= h as f64 || xr >= w as f64 {
        0
    } else {
        lbl.get(yr as usize, xr as usize)
    }
}

/// Warps an image/label pair by `matrix` followed by `field` using inverse
/// mapping: output pixel `q` samples the source at `matrix^-1 q + field(q)`.
/// Out-of-bounds samples read 0 for both planes.
pub fn warp_pair(
    image: &Image,
    label: &LabelPlane,
    matrix: &Mat3,
    field: Option<&DisplacementField>,
) -> Result<(Image, LabelPlane)> {
    if image.dims() != label.dims() {
        return Err(Error::shape(
            "warp_pair",
            format!("image {:?} vs label {:?}", image.dims(), label.dims()),
        ));
    }
    let (h, w) = image.dims();
    if let Some(f) = field {
        if f.dx.dims() != (h, w) || f.dy.dims() != (h, w) {
            return Err(Error::shape(
                "warp_pair",
                format!("displacement field {:?} vs image {:?}", f.dx.dims(), (h, w)),
            ));
        }
    }
    let inv = invert_affine(matrix)?;
    let mut out_img = Plane::filled(h, w, 0.0);
    let mut out_lbl = Plane::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            let (qx, qy) = (x as f64, y as f64);
            let mut sx = inv[0][0] * qx + inv[0][1] * qy + inv[0][2];
            let mut sy = inv[1][0] * qx + inv[1][1] * qy + inv[1][2];
            if let Some(f) = field {
                sx += f.dx.get(y, x);
                sy += f.dy.get(y, x);
            }
            let (sx, sy) = (snap(sx), snap(sy));
            out_img.set(y, x, bilinear(image, sx, sy));
            out_lbl.set(y, x, nearest(label, sx, sy));
        }
    }
    Ok((out_img, out_lbl))
}

/// Gamma correction on min-max rescaled intensities, mapped back to the
/// original range. Constant images are returned unchanged.
pub fn brightness(image: &Image, gamma: f64) -> Result<Image> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if image.data().is_empty() || range <= 0.0 || gamma == 1.0 {
        return Ok(image.clone());
    }
    let data = image
        .data()
        .iter()
        .map(|&v| ((v - lo) / range).powf(gamma) * range + lo)
        .collect();
    Plane::new(image.height(), image.width(), data)
}

/// Applies a fresh random augmentation to an image/label pair.
pub fn augment_planes<R: Rng>(
    image: &Image,
    label: &LabelPlane,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(Image, LabelPlane)> {
    let draw = sample_params(spec, rng);
    let (h, w) = image.dims();
    let field = if draw.elastic {
        Some(elastic_field(
            h,
            w,
            spec.elastic_alpha,
            spec.elastic_sigma,
            rng,
        )?)
    } else {
        None
    };
    let bright = brightness(image, draw.gamma)?;
    warp_pair(&bright, label, &affine_matrix(&draw, h, w), field.as_ref())
}

/// Augments a training slice with an RNG seeded from `seed`.
pub fn augment(sample: &SliceSample, spec: &AugmentationSpec, seed: u64) -> Result<SliceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, target) = augment_planes(&sample.image, &sample.target, spec, &mut rng)?;
    Ok(SliceSample {
        image,
        target,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Plane::new(
            h,
            w,
            (0..h * w)
                .map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0)
                .collect(),
        )
        .unwrap()
    }

    fn labels(h: usize, w: usize) -> LabelPlane {
        Plane::new(h, w, (0..h * w).map(|i| ((i * 7) % 5) as u8).collect()).unwrap()
    }

    fn apply(m: &Mat3, x: f64, y: f64) -> (f64, f64) {
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    #[test]
    fn identity_draw_gives_identity_matrix() {
        let m = affine_matrix(&AugmentDraw::identity(), 9, 13);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - IDENTITY[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_about_center() {
        let draw = AugmentDraw {
            angle_deg: 90.0,
            ..AugmentDraw::identity()
        };
        // 5x5 plane, center (2, 2). (x, y) = (4, 2) rotates to (2, 4).
        let m = affine_matrix(&draw, 5, 5);
        let (x, y) = apply(&m, 4.0, 2.0);
        assert!((x - 2.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
        let (x, y) = apply(&m, 2.0, 2.0);
        assert!((x - 2.0).abs() < 1e-12 && (y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn composition_order() {
        let draw = AugmentDraw {
            flip_h: true,
            flip_v: false,
            angle_deg: 13.0,
            shift_x: 0.05,
            shift_y: -0.08,
            shear: 0.11,
            zoom: 1.07,
            gamma: 1.0,
            elastic: false,
        };
        let (h, w) = (20, 30);
        let (cx, cy) = (14.5, 9.5);
        let mut expected = translation(cx, cy);
        for step in [
            translation(draw.shift_x * w as f64, draw.shift_y * h as f64),
            scale(draw.zoom),
            shear_x(draw.shear),
            rotation(draw.angle_deg),
            flip(true, false),
            translation(-cx, -cy),
        ] {
            expected = matmul(&expected, &step);
        }
        let m = affine_matrix(&draw, h, w);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let (img, lbl) = (ramp(12, 10), labels(12, 10));
        let zero = DisplacementField::zeros(12, 10);
        let (i2, l2) = warp_pair(&img, &lbl, &IDENTITY, Some(&zero)).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, lbl);
    }

    #[test]
    fn double_flip_is_exact() {
        let (img, lbl) = (ramp(11, 14), labels(11, 14));
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let draw = AugmentDraw {
                flip_h: fh,
                flip_v: fv,
                ..AugmentDraw::identity()
            };
            let m = affine_matrix(&draw, 11, 14);
            let (i1, l1) = warp_pair(&img, &lbl, &m, None).unwrap();
            assert_ne!(i1, img);
            let (i2, l2) = warp_pair(&i1, &l1, &m, None).unwrap();
            assert_eq!(i2, img);
            assert_eq!(l2, lbl);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(warp_pair(&ramp(4, 4), &labels(4, 5), &IDENTITY, None).is_err());
    }

    #[test]
    fn zero_alpha_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = elastic_field(16, 16, 0.0, 4.0, &mut rng).unwrap();
        assert_eq!(f.max_abs(), 0.0);
        assert!(elastic_field(16, 16, 1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn field_bounded_by_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = elastic_field(32, 32, 720.0, 2.0, &mut rng).unwrap();
        assert!(f.max_abs() <= 720.0);
        assert!(f.max_abs() > 0.0);
    }

    #[test]
    fn brightness_cases() {
        let img = ramp(6, 6);
        let same = brightness(&img, 1.0).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Plane::filled(3, 3, 4.2);
        assert_eq!(brightness(&flat, 1.7).unwrap(), flat);
        let two = Plane::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(brightness(&two, 2.0).unwrap().data(), &[0.0, 0.25, 1.0]);
        assert!(brightness(&img, 0.0).is_err());
    }

    #[test]
    fn disabled_spec_is_identity() {
        let (img, lbl) = (ramp(16, 16), labels(16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (i2, l2) = augment_planes(&img, &lbl, &AugmentationSpec::disabled(), &mut rng).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, lbl);
    }

    #[test]
    fn seeded_draws_repeat() {
        let spec = AugmentationSpec::default();
        let a = sample_params(&spec, &mut ChaCha8Rng::seed_from_u64(77));
        let b = sample_params(&spec, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }
}
