//! Volumes, slice extraction, normalization, cross-validation folds and the
//! on-disk formats.

mod manifest;
mod mvol;
mod phantom;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{region_mask, RegionKind};
use crate::plane::{Image, LabelPlane, Plane};

pub use manifest::{CaseRecord, Cohort, Manifest};
pub use mvol::{Mvol, MvolData, DTYPE_F32, DTYPE_U8, MAGIC, VERSION};
pub use phantom::{generate_phantom, phantom_slices, Phantom, PhantomOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flair,
    T1c,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1c => "t1c",
        }
    }
}

/// Flat index of voxel `(x, y, z)` in a row-major `X, Y, Z` grid.
#[inline]
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// A scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub modality: Modality,
}

/// An integer label volume with values in `{0, 1, 2, 3, 4}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>, modality: Modality) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::LengthMismatch {
                declared: numel,
                actual: data.len(),
            });
        }
        Ok(Self {
            dims,
            data,
            spacing: [1.0; 3],
            modality,
        })
    }

    /// Axial plane `z` as an `X x Y` image.
    pub fn axial(&self, z: usize) -> Image {
        let [x, y, _] = self.dims;
        let data = (0..x * y)
            .map(|i| self.data[voxel_index(self.dims, i / y, i % y, z)])
            .collect();
        Plane::new(x, y, data).expect("axial plane size")
    }

    pub fn load(path: impl AsRef<Path>, modality: Modality) -> Result<Self> {
        let m = Mvol::read(path)?;
        match m.data {
            MvolData::Real(v) => {
                Self::new(m.dims, v.into_iter().map(f64::from).collect(), modality)
            }
            MvolData::Labels(_) => Err(Error::Format(
                "expected a 32-bit real intensity volume, found a label volume".into(),
            )),
        }
    }

    /// Stores intensities as little-endian `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Mvol {
            dims: self.dims,
            data: MvolData::Real(self.data.iter().map(|&v| v as f32).collect()),
        }
        .write(path)
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::LengthMismatch {
                declared: numel,
                actual: data.len(),
            });
        }
        if let Some(&bad) = data.iter().find(|&&v| v > 4) {
            return Err(Error::LabelAlphabet(bad));
        }
        Ok(Self { dims, data })
    }

    pub fn axial(&self, z: usize) -> LabelPlane {
        let [x, y, _] = self.dims;
        let data = (0..x * y)
            .map(|i| self.data[voxel_index(self.dims, i / y, i % y, z)])
            .collect();
        Plane::new(x, y, data).expect("axial plane size")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = Mvol::read(path)?;
        match m.data {
            MvolData::Labels(v) => Self::new(m.dims, v),
            MvolData::Real(_) => Err(Error::Format(
                "expected an 8-bit label volume, found a real-valued volume".into(),
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Mvol {
            dims: self.dims,
            data: MvolData::Labels(self.data.clone()),
        }
        .write(path)
    }
}

/// Whole-volume z-score with population standard deviation. Volumes whose
/// standard deviation is below `1e-8` map to all zeros.
pub fn normalize(volume: &Volume) -> Volume {
    let n = volume.data.len().max(1) as f64;
    let mean = volume.data.iter().sum::<f64>() / n;
    let var = volume
        .data
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < 1e-8 {
        vec![0.0; volume.data.len()]
    } else {
        volume.data.iter().map(|v| (v - mean) / std).collect()
    };
    Volume {
        data,
        ..volume.clone()
    }
}

/// A 2D axial slice with its binary training target.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Image,
    /// Binary mask (0 or 1).
    pub target: LabelPlane,
    pub case_id: String,
    pub slice_index: usize,
    pub task: RegionKind,
}

/// Axial slices of `volume` with targets derived from `labels` for `task`.
/// Planes whose intensities are all zero are skipped.
pub fn extract_slices(
    volume: &Volume,
    labels: &LabelVolume,
    task: RegionKind,
    case_id: &str,
) -> Result<Vec<SliceSample>> {
    if volume.modality != task.modality() {
        return Err(Error::InvalidArgument(format!(
            "{} segmentation requires the {} volume, got {}",
            task.name(),
            task.modality().name(),
            volume.modality.name()
        )));
    }
    if volume.dims != labels.dims {
        return Err(Error::shape(
            "extract_slices",
            format!("volume {:?} vs labels {:?}", volume.dims, labels.dims),
        ));
    }
    let mut out = Vec::new();
    for z in 0..volume.dims[2] {
        let image = volume.axial(z);
        if image.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let lbl = labels.axial(z);
        let (h, w) = lbl.dims();
        let target = Plane::new(h, w, region_mask(lbl.data(), task)?)?;
        out.push(SliceSample {
            image,
            target,
            case_id: case_id.to_string(),
            slice_index: z,
            task,
        });
    }
    Ok(out)
}

/// Z-scores `raw` and slices it, dropping the planes that are entirely zero
/// in the raw volume (z-scoring would otherwise shift them off zero).
pub fn normalized_slices(
    raw: &Volume,
    labels: &LabelVolume,
    task: RegionKind,
    case_id: &str,
) -> Result<Vec<SliceSample>> {
    let keep: Vec<usize> = (0..raw.dims[2])
        .filter(|&z| raw.axial(z).data().iter().any(|&v| v != 0.0))
        .collect();
    let all = extract_slices(&normalize(raw), labels, task, case_id)?;
    Ok(all
        .into_iter()
        .filter(|s| keep.binary_search(&s.slice_index).is_ok())
        .collect())
}

/// One cross-validation partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by contiguous chunking into `k` test folds whose
/// sizes differ by at most one (larger folds first).
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    if case_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} cases cannot be split into {k} folds",
            case_ids.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = case_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate case id {dup}")));
    }
    let mut order = case_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + len..])
            .cloned()
            .collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    #[test]
    fn normalize_two_values() {
        let v = Volume::new([1, 1, 2], vec![0.0, 2.0], Modality::Flair).unwrap();
        assert_eq!(normalize(&v).data, vec![-1.0, 1.0]);
        let c = Volume::new([1, 2, 2], vec![3.0; 4], Modality::Flair).unwrap();
        assert_eq!(normalize(&c).data, vec![0.0; 4]);
    }

    #[test]
    fn fold_sizes() {
        let folds = kfold_split(&ids(54), 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![11, 11, 11, 11, 10]);
        let folds = kfold_split(&ids(10), 5, 1).unwrap();
        assert!(folds
            .iter()
            .all(|f| f.test.len() == 2 && f.train.len() == 8));
        assert!(kfold_split(&ids(4), 5, 1).is_err());
        assert_eq!(
            kfold_split(&ids(10), 5, 9).unwrap(),
            kfold_split(&ids(10), 5, 9).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_modality() {
        let vol = Volume::new([2, 2, 1], vec![1.0; 4], Modality::Flair).unwrap();
        let lbl = LabelVolume::new([2, 2, 1], vec![0, 4, 0, 0]).unwrap();
        assert!(extract_slices(&vol, &lbl, RegionKind::Enhancing, "c").is_err());
        assert_eq!(
            extract_slices(&vol, &lbl, RegionKind::Complete, "c")
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn all_zero_volume_has_no_slices() {
        let vol = Volume::new([4, 4, 3], vec![0.0; 48], Modality::T1c).unwrap();
        let lbl = LabelVolume::new([4, 4, 3], vec![0; 48]).unwrap();
        assert!(extract_slices(&vol, &lbl, RegionKind::Enhancing, "c")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn label_alphabet_enforced() {
        assert!(matches!(
            LabelVolume::new([1, 1, 2], vec![0, 5]),
            Err(Error::LabelAlphabet(5))
        ));
    }
}
