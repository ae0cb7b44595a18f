//! Anchor-based rotated-box parameterization.
//!
//! Every cell carries one IoU channel per anchor (size × orientation), a
//! relative width and length offset per size and a normalized angle offset
//! per orientation. Box centers are implied by the cell itself.
//!
//! Container channel order per cell: IoU channels by anchor index
//! `α = size_index · N_o + orient_index`, then `N_s` width offsets, `N_s`
//! length offsets, `N_o` orientation offsets and finally the static map.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonical_orientation, intersection_area, iou, GeometryError, ObjectBox};
use crate::grid::{GridError, GridGeometry, GridSequence, Pose, RawFrame};
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("box {index} has its center outside the grid")]
    BoxOutsideGrid { index: usize },
    #[error("box {index}: {source}")]
    InvalidBox { index: usize, source: GeometryError },
    #[error("invalid anchor set: {0}")]
    InvalidAnchors(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Default box sizes (width, length) in meters, pedestrian through truck.
pub const DEFAULT_SIZES: [(f64, f64); 10] = [
    (0.6, 0.6),
    (0.6, 1.2),
    (0.8, 1.8),
    (1.0, 2.5),
    (1.8, 4.5),
    (2.0, 5.0),
    (2.2, 6.0),
    (2.5, 8.0),
    (2.6, 10.0),
    (2.9, 12.0),
];

/// The default boxes and their channel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// (width, length) pairs, meters.
    pub sizes: Vec<(f64, f64)>,
    /// Orientations of the length axis, radians.
    pub orientations: Vec<f64>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            orientations: (0..12).map(|k| k as f64 * PI / 12.0).collect(),
        }
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.sizes.is_empty() || self.orientations.is_empty() {
            return Err(AnchorError::InvalidAnchors("need at least one size and one orientation".into()));
        }
        if self.sizes.iter().any(|&(w, l)| !(w > 0.0 && l > 0.0 && w.is_finite() && l.is_finite())) {
            return Err(AnchorError::InvalidAnchors("sizes must be positive and finite".into()));
        }
        if self.orientations.iter().any(|o| !o.is_finite()) {
            return Err(AnchorError::InvalidAnchors("orientations must be finite".into()));
        }
        Ok(())
    }

    pub fn size_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn orientation_count(&self) -> usize {
        self.orientations.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.sizes.len() * self.orientations.len()
    }

    /// `α = size_index · N_o + orient_index`.
    pub fn anchor_index(&self, size: usize, orient: usize) -> usize {
        size * self.orientations.len() + orient
    }

    /// Inverse of [`anchor_index`](Self::anchor_index).
    pub fn split_index(&self, alpha: usize) -> (usize, usize) {
        (alpha / self.orientations.len(), alpha % self.orientations.len())
    }

    /// Angle that one unit of orientation offset stands for.
    pub fn angle_step(&self) -> f64 {
        PI / self.orientations.len() as f64
    }

    /// Channels of the label container: IoU, Δw, Δl, Δφ and static map.
    pub fn container_channels(&self) -> usize {
        self.anchor_count() + 2 * self.size_count() + self.orientation_count() + 1
    }

    /// Anchor `alpha` centered at `center`.
    pub fn anchor_box(&self, alpha: usize, center: [f64; 2]) -> ObjectBox {
        let (s, k) = self.split_index(alpha);
        let (w, l) = self.sizes[s];
        ObjectBox {
            center_east: center[0],
            center_north: center[1],
            width: w,
            length: l,
            orientation: canonical_orientation(self.orientations[k]),
            score: None,
        }
    }
}

/// Per-cell detection targets (or network outputs of the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensors {
    pub iou: Tensor3<f64>,
    pub d_width: Tensor3<f64>,
    pub d_length: Tensor3<f64>,
    pub d_orient: Tensor3<f64>,
    /// Single channel.
    pub static_map: Tensor3<f64>,
}

impl LabelTensors {
    pub fn zeros(geometry: &GridGeometry, anchors: &AnchorSet) -> Self {
        Self {
            iou: Tensor3::for_grid(geometry, anchors.anchor_count()),
            d_width: Tensor3::for_grid(geometry, anchors.size_count()),
            d_length: Tensor3::for_grid(geometry, anchors.size_count()),
            d_orient: Tensor3::for_grid(geometry, anchors.orientation_count()),
            static_map: Tensor3::for_grid(geometry, 1),
        }
    }

    /// The five heads in container order.
    pub fn heads(&self) -> [&Tensor3<f64>; 5] {
        [&self.iou, &self.d_width, &self.d_length, &self.d_orient, &self.static_map]
    }

    pub fn heads_mut(&mut self) -> [&mut Tensor3<f64>; 5] {
        [
            &mut self.iou,
            &mut self.d_width,
            &mut self.d_length,
            &mut self.d_orient,
            &mut self.static_map,
        ]
    }

    /// Checks that every head matches `geometry` and `anchors`.
    pub fn check_shape(&self, geometry: &GridGeometry, anchors: &AnchorSet) -> Result<(), AnchorError> {
        let (w, h) = (geometry.width_cells, geometry.height_cells);
        let expected = [
            anchors.anchor_count(),
            anchors.size_count(),
            anchors.size_count(),
            anchors.orientation_count(),
            1,
        ];
        for (head, c) in self.heads().into_iter().zip(expected) {
            if head.shape() != (w, h, c) {
                return Err(AnchorError::ShapeMismatch(format!(
                    "head has shape {:?}, expected {:?}",
                    head.shape(),
                    (w, h, c)
                )));
            }
        }
        Ok(())
    }

    /// Sets the static-occupancy head from a W×H map.
    pub fn set_static_map(&mut self, map: &[f32]) -> Result<(), AnchorError> {
        if map.len() != self.static_map.cell_count() {
            return Err(AnchorError::ShapeMismatch(format!(
                "static map has {} cells, expected {}",
                map.len(),
                self.static_map.cell_count()
            )));
        }
        for (dst, &v) in self.static_map.as_mut_slice().iter_mut().zip(map) {
            *dst = f64::from(v);
        }
        Ok(())
    }

    /// Interleaves all heads into one container frame.
    pub fn to_raw_frame(&self, timestamp: f64, ego_pose: Pose) -> RawFrame {
        let heads = self.heads();
        let n_cells = self.iou.cell_count();
        let per_cell: usize = heads.iter().map(|t| t.channels()).sum();
        let mut data = Vec::with_capacity(n_cells * per_cell);
        for c in 0..n_cells {
            for head in heads {
                data.extend(head.cell(c).iter().map(|&v| v as f32));
            }
        }
        RawFrame {
            timestamp,
            ego_pose,
            data,
        }
    }

    /// Splits a container frame back into heads.
    pub fn from_raw_frame(
        frame: &RawFrame,
        geometry: &GridGeometry,
        anchors: &AnchorSet,
    ) -> Result<Self, AnchorError> {
        let per_cell = anchors.container_channels();
        if frame.data.len() != geometry.cell_count() * per_cell {
            return Err(AnchorError::ShapeMismatch(format!(
                "frame carries {} values, expected {}",
                frame.data.len(),
                geometry.cell_count() * per_cell
            )));
        }
        let mut out = Self::zeros(geometry, anchors);
        for (c, chunk) in frame.data.chunks_exact(per_cell).enumerate() {
            let mut rest = chunk;
            for head in out.heads_mut() {
                let (mine, tail) = rest.split_at(head.channels());
                for (dst, &v) in head.cell_mut(c).iter_mut().zip(mine) {
                    *dst = f64::from(v);
                }
                rest = tail;
            }
        }
        Ok(out)
    }
}

/// Writes label tensors of consecutive frames as one container.
pub fn tensors_to_sequence(
    tensors: &[(f64, Pose, LabelTensors)],
    geometry: &GridGeometry,
    anchors: &AnchorSet,
) -> Result<GridSequence, AnchorError> {
    let frames = tensors
        .iter()
        .map(|(t, pose, l)| {
            l.check_shape(geometry, anchors)?;
            Ok(l.to_raw_frame(*t, *pose))
        })
        .collect::<Result<Vec<_>, AnchorError>>()?;
    Ok(GridSequence::new(*geometry, anchors.container_channels(), frames)?)
}

/// Reads every frame of a label container.
pub fn sequence_to_tensors(
    seq: &GridSequence,
    anchors: &AnchorSet,
) -> Result<Vec<(f64, Pose, LabelTensors)>, AnchorError> {
    if seq.channels() != anchors.container_channels() {
        return Err(AnchorError::ShapeMismatch(format!(
            "container has {} channels, anchors need {}",
            seq.channels(),
            anchors.container_channels()
        )));
    }
    seq.frames()
        .iter()
        .map(|f| Ok((f.timestamp, f.ego_pose, LabelTensors::from_raw_frame(f, seq.geometry(), anchors)?)))
        .collect()
}

fn cell_square(geometry: &GridGeometry, center: [f64; 2]) -> ObjectBox {
    ObjectBox {
        center_east: center[0],
        center_north: center[1],
        width: geometry.cell_size,
        length: geometry.cell_size,
        orientation: 0.0,
        score: None,
    }
}

/// Encodes boxes into detection targets. The static map is left at zero.
///
/// A cell belongs to the box containing its center; where several do, to
/// the one covering most of the cell.
pub fn encode(
    boxes: &[ObjectBox],
    geometry: &GridGeometry,
    anchors: &AnchorSet,
) -> Result<LabelTensors, AnchorError> {
    anchors.validate()?;
    geometry.validate()?;
    let boxes: Vec<ObjectBox> = boxes
        .iter()
        .enumerate()
        .map(|(index, b)| {
            b.validate().map_err(|source| AnchorError::InvalidBox { index, source })?;
            if !geometry.contains(b.center_east, b.center_north) {
                return Err(AnchorError::BoxOutsideGrid { index });
            }
            let mut b = b.length_major();
            b.orientation = canonical_orientation(b.orientation);
            Ok(b)
        })
        .collect::<Result<_, _>>()?;

    let mut out = LabelTensors::zeros(geometry, anchors);
    let step = anchors.angle_step();
    for n in 0..geometry.height_cells {
        for e in 0..geometry.width_cells {
            let center = geometry.cell_center(e, n);
            let square = cell_square(geometry, center);
            let owner = boxes
                .iter()
                .filter(|b| b.contains(center))
                .map(|b| (intersection_area(b, &square), b))
                .fold(None::<(f64, &ObjectBox)>, |best, cand| match best {
                    Some(b) if b.0 >= cand.0 => Some(b),
                    _ => Some(cand),
                });
            let Some((_, obj)) = owner else { continue };
            let c = geometry.index(e, n);
            for alpha in 0..anchors.anchor_count() {
                out.iou.set(c, alpha, iou(&anchors.anchor_box(alpha, center), obj));
            }
            for (s, &(w, l)) in anchors.sizes.iter().enumerate() {
                out.d_width.set(c, s, (obj.width - w) / w);
                out.d_length.set(c, s, (obj.length - l) / l);
            }
            for (k, &phi) in anchors.orientations.iter().enumerate() {
                // Difference modulo π: a rectangle at φ and φ + π is the same.
                out.d_orient.set(c, k, canonical_orientation(obj.orientation - phi) / step);
            }
        }
    }
    Ok(out)
}

/// Per-cell foreground weight A(c): the best anchor IoU of the cell, zero
/// on background.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMap {
    pub a: Vec<f64>,
}

pub fn weight_map(label: &LabelTensors) -> SpatialWeightMap {
    let a = (0..label.iou.cell_count())
        .map(|c| label.iou.cell(c).iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0))
        .collect();
    SpatialWeightMap { a }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Minimum IoU score of a candidate.
    pub score_threshold: f64,
    /// Candidates overlapping a cluster's leader at least this much join it.
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.3,
        }
    }
}

/// Turns per-cell scores and offsets into scored boxes.
///
/// Candidates are visited by descending score; each joins the first cluster
/// whose leader it overlaps by at least `nms_iou`, or starts a new one.
/// Every cluster yields the score-weighted mean box with its best score.
pub fn decode(
    outputs: &LabelTensors,
    geometry: &GridGeometry,
    anchors: &AnchorSet,
    cfg: &DecodeConfig,
) -> Result<Vec<ObjectBox>, AnchorError> {
    anchors.validate()?;
    outputs.check_shape(geometry, anchors)?;
    let step = anchors.angle_step();
    let mut candidates = Vec::new();
    for c in 0..geometry.cell_count() {
        let (e, n) = geometry.coords(c);
        let center = geometry.cell_center(e, n);
        for (alpha, &score) in outputs.iou.cell(c).iter().enumerate() {
            if !(score >= cfg.score_threshold) {
                continue;
            }
            let (s, k) = anchors.split_index(alpha);
            let (w_s, l_s) = anchors.sizes[s];
            let w = w_s * (1.0 + outputs.d_width.get(c, s));
            let l = l_s * (1.0 + outputs.d_length.get(c, s));
            let phi = anchors.orientations[k] + outputs.d_orient.get(c, k) * step;
            if let Ok(b) = ObjectBox::new(center[0], center[1], w, l, phi) {
                candidates.push(b.with_score(score));
            }
        }
    }
    candidates.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));

    let mut clusters: Vec<Vec<ObjectBox>> = Vec::new();
    for cand in candidates {
        match clusters.iter_mut().find(|cl| iou(&cl[0], &cand) >= cfg.nms_iou) {
            Some(cl) => cl.push(cand),
            None => clusters.push(vec![cand]),
        }
    }
    Ok(clusters.iter().map(|cl| fuse(cl)).collect())
}

/// Score-weighted mean of a cluster. Orientations are averaged on the
/// doubled angle so that φ and φ + π agree.
fn fuse(cluster: &[ObjectBox]) -> ObjectBox {
    let best = cluster[0].score.unwrap_or(0.0);
    let total: f64 = cluster.iter().map(|b| b.score.unwrap_or(0.0)).sum();
    let wgt = |b: &ObjectBox| b.score.unwrap_or(0.0) / total;
    let mut out = ObjectBox {
        center_east: 0.0,
        center_north: 0.0,
        width: 0.0,
        length: 0.0,
        orientation: 0.0,
        score: Some(best),
    };
    let (mut sin2, mut cos2) = (0.0, 0.0);
    let reference = cluster[0].orientation;
    for b in cluster {
        let k = wgt(b);
        out.center_east += k * b.center_east;
        out.center_north += k * b.center_north;
        out.width += k * b.width;
        out.length += k * b.length;
        let (s, c) = (2.0 * (b.orientation - reference)).sin_cos();
        sin2 += k * s;
        cos2 += k * c;
    }
    out.orientation = canonical_orientation(reference + 0.5 * sin2.atan2(cos2));
    out
}
