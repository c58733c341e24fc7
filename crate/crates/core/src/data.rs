//! Point-cloud frames, temporal windows and colour-space conversion.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Integer voxel coordinates of one point.
pub type Voxel = [i32; 3];

/// One voxelised frame: unique integer geometry plus per-point attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    geometry: Arc<Vec<Voxel>>,
    attributes: Matrix,
    pub frame_index: usize,
    /// Known only for training data.
    pub qp: Option<i32>,
}

impl PointCloudFrame {
    /// Validates that geometry rows are unique and that every point has one attribute row.
    pub fn new(geometry: Vec<Voxel>, attributes: Matrix, frame_index: usize) -> Result<Self> {
        if attributes.rows() != geometry.len() {
            return Err(Error::InvalidFrame(format!(
                "{} attribute rows for {} points",
                attributes.rows(),
                geometry.len()
            )));
        }
        if attributes.cols() == 0 && !geometry.is_empty() {
            return Err(Error::InvalidFrame("no attribute channels".into()));
        }
        let mut seen = HashSet::with_capacity(geometry.len());
        for (i, v) in geometry.iter().enumerate() {
            if !seen.insert(*v) {
                return Err(Error::InvalidFrame(format!("duplicate point {v:?} at row {i}")));
            }
        }
        Ok(Self {
            geometry: Arc::new(geometry),
            attributes,
            frame_index,
            qp: None,
        })
    }

    /// Skips the uniqueness check. Callers guarantee the invariant, for
    /// example by reusing another frame's geometry.
    pub(crate) fn from_parts(geometry: Arc<Vec<Voxel>>, attributes: Matrix, frame_index: usize, qp: Option<i32>) -> Self {
        debug_assert_eq!(geometry.len(), attributes.rows());
        Self {
            geometry,
            attributes,
            frame_index,
            qp,
        }
    }

    pub fn with_qp(mut self, qp: Option<i32>) -> Self {
        self.qp = qp;
        self
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.attributes.cols()
    }

    pub fn geometry(&self) -> &[Voxel] {
        &self.geometry
    }

    pub(crate) fn shared_geometry(&self) -> &Arc<Vec<Voxel>> {
        &self.geometry
    }

    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    /// Same geometry and metadata, new attributes.
    pub fn with_attributes(&self, attributes: Matrix) -> Result<Self> {
        if attributes.rows() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} attribute rows for {} points",
                attributes.rows(),
                self.len()
            )));
        }
        Ok(Self::from_parts(self.geometry.clone(), attributes, self.frame_index, self.qp))
    }

    /// Geometry promoted to reals, `n × 3`.
    pub fn geometry_matrix(&self) -> Matrix {
        geometry_to_matrix(&self.geometry)
    }

    /// A single attribute channel as a one-channel frame.
    pub fn channel(&self, c: usize) -> Result<Self> {
        if c >= self.channels() {
            return Err(Error::WrongChannelCount {
                expected: c + 1,
                found: self.channels(),
            });
        }
        self.with_attributes(Matrix::column(&self.attributes.col(c)))
    }

    /// The frame restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let geometry = indices.iter().map(|&i| self.geometry[i]).collect();
        Self::from_parts(Arc::new(geometry), self.attributes.select_rows(indices), self.frame_index, self.qp)
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.geometry, &other.geometry) || self.geometry == other.geometry
    }
}

pub fn geometry_to_matrix(geometry: &[Voxel]) -> Matrix {
    let mut data = Vec::with_capacity(geometry.len() * 3);
    for v in geometry {
        data.extend(v.iter().map(|&c| f64::from(c)));
    }
    Matrix::from_vec(geometry.len(), 3, data)
}

/// `2R+1` frames centred on the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWindow {
    frames: Vec<PointCloudFrame>,
    radius: usize,
}

impl TemporalWindow {
    pub fn new(frames: Vec<PointCloudFrame>, radius: usize) -> Result<Self> {
        if frames.len() != 2 * radius + 1 {
            return Err(Error::InvalidConfig(format!(
                "window of radius {radius} needs {} frames, got {}",
                2 * radius + 1,
                frames.len()
            )));
        }
        let channels = frames[radius].channels();
        if let Some(f) = frames.iter().find(|f| f.channels() != channels) {
            return Err(Error::WrongChannelCount {
                expected: channels,
                found: f.channels(),
            });
        }
        Ok(Self { frames, radius })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn target(&self) -> &PointCloudFrame {
        &self.frames[self.radius]
    }

    pub fn target_position(&self) -> usize {
        self.radius
    }

    pub fn frames(&self) -> &[PointCloudFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<PointCloudFrame> {
        self.frames
    }

    /// True when every frame carries the target geometry.
    pub fn is_aligned(&self) -> bool {
        let target = self.target();
        self.frames.iter().all(|f| f.same_geometry(target))
    }

    pub fn map_frames(&self, mut f: impl FnMut(&PointCloudFrame) -> Result<PointCloudFrame>) -> Result<Self> {
        let frames = self.frames.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.radius)
    }
}

/// Frames `t−R ..= t+R`, clamping out-of-range indices to the first or last frame.
pub fn make_window(sequence: &[PointCloudFrame], t: usize, radius: usize) -> Result<TemporalWindow> {
    if sequence.is_empty() {
        return Err(Error::EmptySequence);
    }
    if t >= sequence.len() {
        return Err(Error::TargetOutOfRange { t, len: sequence.len() });
    }
    let last = sequence.len() as isize - 1;
    let frames = (-(radius as isize)..=radius as isize)
        .map(|offset| {
            let i = (t as isize + offset).clamp(0, last) as usize;
            sequence[i].clone()
        })
        .collect();
    TemporalWindow::new(frames, radius)
}

/// Attribute component a per-component model operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Y,
    Cb,
    Cr,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Y, Component::Cb, Component::Cr];

    pub fn channel(self) -> usize {
        match self {
            Component::Y => 0,
            Component::Cb => 1,
            Component::Cr => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Y => "y",
            Component::Cb => "cb",
            Component::Cr => "cr",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(Component::Y),
            "cb" => Ok(Component::Cb),
            "cr" => Ok(Component::Cr),
            other => Err(Error::InvalidConfig(format!("unknown component `{other}`"))),
        }
    }
}

// BT.709 luma coefficients, full range.
const KR: f64 = 0.2126;
const KB: f64 = 0.0722;
const KG: f64 = 1.0 - KR - KB;
const CHROMA_OFFSET: f64 = 128.0;

pub fn rgb_to_ycbcr_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    let cb = (b - y) / (2.0 * (1.0 - KB)) + CHROMA_OFFSET;
    let cr = (r - y) / (2.0 * (1.0 - KR)) + CHROMA_OFFSET;
    [y, cb, cr]
}

pub fn ycbcr_to_rgb_pixel([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let cb = cb - CHROMA_OFFSET;
    let cr = cr - CHROMA_OFFSET;
    let r = y + 2.0 * (1.0 - KR) * cr;
    let b = y + 2.0 * (1.0 - KB) * cb;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

fn convert(frame: &PointCloudFrame, f: fn([f64; 3]) -> [f64; 3]) -> Result<PointCloudFrame> {
    if frame.channels() != 3 {
        return Err(Error::WrongChannelCount {
            expected: 3,
            found: frame.channels(),
        });
    }
    let src = frame.attributes();
    let mut out = Matrix::zeros(src.rows(), 3);
    for r in 0..src.rows() {
        let row = src.row(r);
        out.row_mut(r).copy_from_slice(&f([row[0], row[1], row[2]]));
    }
    frame.with_attributes(out)
}

pub fn rgb_to_ycbcr(frame: &PointCloudFrame) -> Result<PointCloudFrame> {
    convert(frame, rgb_to_ycbcr_pixel)
}

pub fn ycbcr_to_rgb(frame: &PointCloudFrame) -> Result<PointCloudFrame> {
    convert(frame, ycbcr_to_rgb_pixel)
}

/// Round half away from zero, then clamp to the 8-bit range.
pub fn quantize_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
