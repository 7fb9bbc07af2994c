//! Synthetic head phantoms with nested tumor shells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normalized_slices, voxel_index, Cohort, LabelVolume, Modality, SliceSample, Volume};
use crate::error::{Error, Result};
use crate::metrics::RegionKind;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOptions {
    /// In-plane extent (X = Y).
    pub size: usize,
    /// Number of axial slices.
    pub depth: usize,
    /// LGG phantoms carry no enhancing shell.
    pub cohort: Cohort,
    pub noise_std: f64,
}

impl PhantomOptions {
    pub fn new(size: usize, depth: usize) -> Self {
        Self {
            size,
            depth,
            cohort: Cohort::Hgg,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub flair: Volume,
    pub t1c: Volume,
    pub labels: LabelVolume,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Shell label by normalized ellipsoidal radius: necrosis (1) innermost,
/// then enhancing (4), non-enhancing (3) and edema (2) outermost.
fn shell_label(rho: f64, cohort: Cohort) -> u8 {
    match rho {
        r if r < 0.25 => 1,
        r if r < 0.5 => {
            if cohort == Cohort::Lgg {
                3
            } else {
                4
            }
        }
        r if r < 0.75 => 3,
        r if r < 1.0 => 2,
        _ => 0,
    }
}

/// Deterministic phantom: an ellipsoidal head of smoothly varying tissue
/// intensity plus Gaussian noise, zero outside, containing one or two
/// tumors. FLAIR brightens every tumor label, T1c brightens label 4 only.
pub fn generate_phantom(opts: &PhantomOptions, seed: u64) -> Result<Phantom> {
    let (size, depth) = (opts.size, opts.depth);
    if size < 8 || depth < 3 {
        return Err(Error::InvalidArgument(format!(
            "phantom needs size >= 8 and depth >= 3, got {size}x{size}x{depth}"
        )));
    }
    if size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom size {size} must be even"
        )));
    }
    let noise = Normal::new(0.0, opts.noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [size, size, depth];
    let s = size as f64;
    let d = depth as f64;
    let center = [(s - 1.0) / 2.0, (s - 1.0) / 2.0, (d - 1.0) / 2.0];
    let head = Ellipsoid {
        center,
        radii: [0.46 * s, 0.40 * s, 0.42 * d],
    };
    let gradient_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n_tumors = if rng.random_bool(0.5) { 1 } else { 2 };
    let tumors: Vec<Ellipsoid> = (0..n_tumors)
        .map(|_| {
            let radii = [
                rng.random_range(0.12..0.20) * s,
                rng.random_range(0.12..0.20) * s,
                rng.random_range(0.22..0.32) * d,
            ];
            let center = [
                center[0] + rng.random_range(-0.18..0.18) * s,
                center[1] + rng.random_range(-0.14..0.14) * s,
                center[2] + rng.random_range(-0.08..0.08) * d,
            ];
            Ellipsoid { center, radii }
        })
        .collect();

    let n = size * size * depth;
    let mut labels = vec![0u8; n];
    let mut flair = vec![0.0; n];
    let mut t1c = vec![0.0; n];
    let (gx, gy) = (gradient_dir.cos(), gradient_dir.sin());
    for x in 0..size {
        for y in 0..size {
            for z in 0..depth {
                let p = [x as f64, y as f64, z as f64];
                if head.rho(p) >= 1.0 {
                    continue;
                }
                let idx = voxel_index(dims, x, y, z);
                let tissue = 0.5 + 0.15 * (gx * (p[0] / s - 0.5) + gy * (p[1] / s - 0.5));
                let rho = tumors
                    .iter()
                    .map(|t| t.rho(p))
                    .fold(f64::INFINITY, f64::min);
                let label = shell_label(rho, opts.cohort);
                labels[idx] = label;
                let flair_boost = match label {
                    0 => 0.0,
                    2 => 0.55,
                    _ => 0.65,
                };
                let t1c_boost = match label {
                    4 => 0.7,
                    1 => -0.15,
                    _ => 0.0,
                };
                flair[idx] = tissue + flair_boost + noise.sample(&mut rng);
                t1c[idx] = tissue + t1c_boost + noise.sample(&mut rng);
            }
        }
    }
    Ok(Phantom {
        flair: Volume::new(dims, flair, Modality::Flair)?,
        t1c: Volume::new(dims, t1c, Modality::T1c)?,
        labels: LabelVolume::new(dims, labels)?,
    })
}

/// The first `count` non-empty axial slices of consecutive phantoms
/// (seeds `seed`, `seed + 1`, ...), z-scored and targeted for `task`.
pub fn phantom_slices(
    count: usize,
    opts: &PhantomOptions,
    task: RegionKind,
    seed: u64,
) -> Result<Vec<SliceSample>> {
    let mut out = Vec::with_capacity(count);
    let mut case = 0u64;
    while out.len() < count {
        let p = generate_phantom(opts, seed.wrapping_add(case))?;
        let raw = match task.modality() {
            Modality::Flair => &p.flair,
            Modality::T1c => &p.t1c,
        };
        let id = format!("phantom{case:03}");
        out.extend(normalized_slices(raw, &p.labels, task, &id)?);
        case += 1;
    }
    out.truncate(count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::region_mask;

    #[test]
    fn deterministic_and_nested() {
        let opts = PhantomOptions::new(32, 8);
        let a = generate_phantom(&opts, 4).unwrap();
        let b = generate_phantom(&opts, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.data.iter().all(|&l| l <= 4));
        let complete = region_mask(&a.labels.data, RegionKind::Complete).unwrap();
        let core = region_mask(&a.labels.data, RegionKind::Core).unwrap();
        let enh = region_mask(&a.labels.data, RegionKind::Enhancing).unwrap();
        assert!(complete.contains(&1));
        for i in 0..complete.len() {
            assert!(enh[i] <= core[i] && core[i] <= complete[i]);
        }
    }

    #[test]
    fn lgg_has_no_enhancing() {
        let mut opts = PhantomOptions::new(32, 8);
        opts.cohort = Cohort::Lgg;
        let p = generate_phantom(&opts, 1).unwrap();
        assert!(!p.labels.data.contains(&4));
    }

    #[test]
    fn end_planes_are_empty() {
        let p = generate_phantom(&PhantomOptions::new(32, 12), 2).unwrap();
        assert!(p.flair.axial(0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_tiny_sizes() {
        assert!(generate_phantom(&PhantomOptions::new(4, 8), 0).is_err());
        assert!(generate_phantom(&PhantomOptions::new(33, 8), 0).is_err());
    }
}
