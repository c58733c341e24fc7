//! Recolouring-based motion compensation: reference-frame attributes are
//! transferred onto the target geometry instead of estimating motion.

use std::sync::Arc;

use crate::data::{geometry_to_matrix, PointCloudFrame, TemporalWindow, Voxel};
use crate::error::{Error, Result};
use crate::neighborhood::knn;
use crate::tensor::Matrix;

/// Default number of reference points blended per target point.
pub const DEFAULT_RECOLOR_K: usize = 3;

/// A reference frame re-expressed on the target geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualFrame {
    pub frame: PointCloudFrame,
    pub source_index: usize,
}

/// Inverse-distance-weighted transfer of `reference` attributes onto
/// `target_geometry`. A reference point at distance zero is copied verbatim.
pub fn recolor(reference: &PointCloudFrame, target_geometry: &[Voxel], k_r: usize) -> Result<VirtualFrame> {
    recolor_shared(reference, &Arc::new(target_geometry.to_vec()), k_r)
}

pub(crate) fn recolor_shared(reference: &PointCloudFrame, target: &Arc<Vec<Voxel>>, k_r: usize) -> Result<VirtualFrame> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if k_r == 0 {
        return Err(Error::InvalidConfig("recolour k must be at least 1".into()));
    }
    let source_index = reference.frame_index;
    if reference.shared_geometry().as_slice() == target.as_slice() {
        let frame = PointCloudFrame::from_parts(target.clone(), reference.attributes().clone(), source_index, reference.qp);
        return Ok(VirtualFrame { frame, source_index });
    }
    let k = k_r.min(reference.len());
    let neighbors = knn(&geometry_to_matrix(target), &reference.geometry_matrix(), k)?;
    let src = reference.attributes();
    let channels = src.cols();
    let mut out = Matrix::zeros(target.len(), channels);
    for i in 0..target.len() {
        let idx = neighbors.indices(i);
        let dist = neighbors.distances(i);
        let row = out.row_mut(i);
        if dist[0] == 0.0 {
            row.copy_from_slice(src.row(idx[0]));
            continue;
        }
        let mut total = 0.0;
        for (&j, &d) in idx.iter().zip(dist) {
            let w = 1.0 / d;
            total += w;
            for (o, a) in row.iter_mut().zip(src.row(j)) {
                *o += w * a;
            }
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    let frame = PointCloudFrame::from_parts(target.clone(), out, source_index, reference.qp);
    Ok(VirtualFrame { frame, source_index })
}

/// Replaces every reference frame by its recolouring onto the target
/// geometry. The target passes through untouched.
pub fn compensate_window(window: &TemporalWindow, k_r: usize) -> Result<TemporalWindow> {
    let target = window.target();
    let geometry = target.shared_geometry().clone();
    let center = window.target_position();
    let frames = window
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i == center {
                Ok(target.clone())
            } else {
                recolor_shared(f, &geometry, k_r).map(|v| v.frame)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    TemporalWindow::new(frames, window.radius())
}
