//! Per-case glue between volumes on disk, slices and whole-volume masks.

use crate::data::{
    normalize, normalized_slices, voxel_index, CaseRecord, LabelVolume, SliceSample, Volume,
};
use crate::error::{Error, Result};
use crate::metrics::RegionKind;
use crate::model::UNetModel;
use crate::tensor::Tensor;

/// Slices used to train or test `task` on one manifest case.
pub fn case_slices(record: &CaseRecord, task: RegionKind) -> Result<Vec<SliceSample>> {
    let raw = record.load_volume(task.modality())?;
    let labels = record.load_labels()?;
    normalized_slices(&raw, &labels, task, &record.case)
}

/// Binary mask for a whole raw (unnormalized) volume. Planes that are
/// entirely zero in `raw` are predicted as background without running the
/// network; the rest go through in mini-batches of `batch` slices.
pub fn segment_volume(model: &UNetModel, raw: &Volume, batch: usize) -> Result<LabelVolume> {
    let [x_dim, y_dim, z_dim] = raw.dims;
    let cfg = model.config();
    if (x_dim, y_dim) != (cfg.input_height, cfg.input_width) {
        return Err(Error::shape(
            "segment_volume",
            format!(
                "volume planes are {x_dim}x{y_dim}, model expects {}x{}",
                cfg.input_height, cfg.input_width
            ),
        ));
    }
    let norm = normalize(raw);
    let active: Vec<usize> = (0..z_dim)
        .filter(|&z| raw.axial(z).data().iter().any(|&v| v != 0.0))
        .collect();
    let plane = x_dim * y_dim;
    let mut mask = vec![0u8; raw.data.len()];
    for chunk in active.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for &z in chunk {
            data.extend_from_slice(norm.axial(z).data());
        }
        let pred = model.predict_mask(&Tensor::new(vec![chunk.len(), 1, x_dim, y_dim], data)?)?;
        for (s, &z) in chunk.iter().enumerate() {
            for x in 0..x_dim {
                for y in 0..y_dim {
                    mask[voxel_index(raw.dims, x, y, z)] = pred[s * plane + x * y_dim + y];
                }
            }
        }
    }
    LabelVolume::new(raw.dims, mask)
}
