//! Offline label generation from a whole DOGMa sequence.
//!
//! The pipeline mirrors how a human would label a recording after the fact:
//!
//! 1. [`ego_align`] resamples every frame into the coordinates of frame 0.
//! 2. [`classify_cells`] looks at each cell's occupancy history. Moving
//!    objects leave a rise of P_O followed by a fall; static structure rises
//!    once and stays. Filter velocities are never consulted.
//! 3. [`fit_rectangles`] fits minimum-area rectangles to connected dynamic
//!    regions in every frame.
//! 4. [`refine_tracks`] links rectangles over time, fixes one size per track
//!    and drops implausible trajectories.
//! 5. [`make_labels`] produces the static-map target and the box list.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonical_orientation, intersection_area, min_area_rect, ObjectBox, Point};
use crate::grid::{
    occupancy_probability, write_sequence, DogmaCell, DogmaFrame, GridError, GridGeometry,
    GridSequence, Pose, RawFrame,
};
use crate::sim::{local_to_world, world_to_local};

#[derive(Debug, Error)]
pub enum AutolabelError {
    #[error("need at least {min} frames, got {actual}")]
    TooFewFrames { min: usize, actual: usize },
    #[error("frame {0} has no usable ego pose")]
    MissingEgoPose(usize),
    #[error("frame {0} geometry differs from frame 0")]
    GeometryMismatch(usize),
    #[error("invalid autolabel configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutolabelConfig {
    /// P_O at or above which a cell counts as risen.
    pub p_high: f64,
    /// P_O below which a risen cell counts as fallen.
    pub p_low: f64,
    /// P_O swing that maps to full rise or fall strength.
    pub swing_scale: f64,
    /// Dynamic score at or above which a cell is labeled dynamic.
    pub score_threshold: f64,
    /// Frames before the sequence end within which a persisting rise is
    /// checked for motion coherence.
    pub coherence_window: usize,
    /// Neighbourhood radius, in cells, searched for falls next to a
    /// persisting region.
    pub coherence_radius: usize,
    /// A risen cell whose P_O returns to within this band around 0.5 and
    /// stays there counts as fallen: its occupancy moved away unseen.
    pub vanish_band: f64,
    /// Frames after last reading P_O ≥ p_high within which such a return
    /// must happen, and for which it must then hold. Slower decay is
    /// ordinary forgetting; a brief dip is filter noise.
    pub vanish_frames: usize,
    /// Dynamic neighbours, within `coherence_radius`, an interval needs for
    /// full score. Isolated flicker is scaled down proportionally.
    pub min_support: usize,
    /// Dynamic cells up to this many cells apart join one region before
    /// rectangle fitting, so fragments of one object yield one fit.
    pub merge_radius: usize,
    /// Minimum component size for a rectangle fit, in cells.
    pub min_cells: usize,
    /// Maximum centroid distance for associating rectangles across frames, m.
    pub gate_distance: f64,
    /// Percentile of per-frame extents used as a track's size.
    pub size_percentile: f64,
    /// Speed above which box orientation follows the motion direction, m/s.
    pub orientation_from_motion_speed: f64,
    /// A fitted rectangle axis within this angle of the motion direction,
    /// rad, is taken as the heading instead of the noisier motion estimate.
    pub orientation_snap: f64,
    /// Share of a track's area lying inside a longer track's boxes above
    /// which it is a fragment of that track and marked invalid.
    pub fragment_overlap: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub min_track_length: usize,
    /// Half-width, in frames, of the central differences used for velocity.
    pub velocity_window: usize,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        Self {
            p_high: 0.7,
            p_low: 0.4,
            swing_scale: 0.5,
            score_threshold: 0.5,
            coherence_window: 30,
            coherence_radius: 2,
            vanish_band: 0.05,
            vanish_frames: 5,
            min_support: 3,
            merge_radius: 5,
            min_cells: 4,
            gate_distance: 1.5,
            size_percentile: 0.9,
            orientation_from_motion_speed: 0.5,
            orientation_snap: 0.35,
            fragment_overlap: 0.5,
            max_speed: 15.0,
            max_accel: 10.0,
            min_track_length: 3,
            velocity_window: 5,
        }
    }
}

impl AutolabelConfig {
    pub fn validate(&self) -> Result<(), AutolabelError> {
        let bad = |m: &str| Err(AutolabelError::InvalidConfig(m.into()));
        if !(0.0 < self.p_low && self.p_low < self.p_high && self.p_high < 1.0) {
            return bad("need 0 < p_low < p_high < 1");
        }
        if !(0.0..0.5).contains(&self.vanish_band) {
            return bad("vanish_band must lie in [0, 0.5)");
        }
        if !(self.swing_scale > 0.0) {
            return bad("swing_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("score_threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fragment_overlap) {
            return bad("fragment_overlap must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.size_percentile) {
            return bad("size_percentile must lie in [0, 1]");
        }
        if self.min_cells == 0 || self.merge_radius == 0 || self.min_track_length == 0 || self.velocity_window == 0 {
            return bad("counts must be at least 1");
        }
        for v in [
            self.gate_distance,
            self.orientation_from_motion_speed,
            self.orientation_snap,
            self.max_speed,
            self.max_accel,
        ] {
            if !(v >= 0.0) {
                return bad("distances, speeds and accelerations must be non-negative");
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ego alignment

fn pose_is_finite(p: Pose) -> bool {
    p.east.is_finite() && p.north.is_finite() && p.heading.is_finite()
}

/// Resamples all frames into the ego frame of frame 0 by bilinear
/// interpolation. Velocities and their covariances are rotated into the
/// reference orientation. Samples falling outside the source grid read as
/// unknown cells. Each output frame keeps its original ego pose.
pub fn ego_align(frames: &[DogmaFrame]) -> Result<Vec<DogmaFrame>, AutolabelError> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let geometry = *first.geometry();
    let reference = first.ego_pose();
    for (i, f) in frames.iter().enumerate() {
        if *f.geometry() != geometry {
            return Err(AutolabelError::GeometryMismatch(i));
        }
        if !pose_is_finite(f.ego_pose()) {
            return Err(AutolabelError::MissingEgoPose(i));
        }
    }
    frames
        .iter()
        .map(|f| {
            if f.ego_pose() == reference {
                return Ok(f.clone());
            }
            Ok(resample_frame(f, reference)?)
        })
        .collect()
}

fn resample_frame(frame: &DogmaFrame, reference: Pose) -> Result<DogmaFrame, GridError> {
    let g = *frame.geometry();
    let pose = frame.ego_pose();
    let rot = pose.heading - reference.heading;
    let (s, c) = rot.sin_cos();
    let src = frame.cells();
    let fetch = |e: isize, n: isize| -> DogmaCell {
        if e < 0 || n < 0 || e as usize >= g.width_cells || n as usize >= g.height_cells {
            DogmaCell::default()
        } else {
            src[g.index(e as usize, n as usize)]
        }
    };
    let mut cells = Vec::with_capacity(g.cell_count());
    for n in 0..g.height_cells {
        for e in 0..g.width_cells {
            let world = local_to_world(reference, g.cell_center(e, n));
            let local = world_to_local(pose, world);
            // continuous cell coordinates with cell centers at integers
            let [fx, fy] = g.to_cell_coords(local[0], local[1]);
            let (x, y) = (fx - 0.5, fy - 0.5);
            let (x0, y0) = (x.floor(), y.floor());
            let (tx, ty) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut acc = [0.0f64; 7];
            for (de, dn, w) in [
                (0, 0, (1.0 - tx) * (1.0 - ty)),
                (1, 0, tx * (1.0 - ty)),
                (0, 1, (1.0 - tx) * ty),
                (1, 1, tx * ty),
            ] {
                if w == 0.0 {
                    continue;
                }
                let ch = fetch(x0 + de, y0 + dn).channels();
                for k in 0..7 {
                    acc[k] += w * ch[k] as f64;
                }
            }
            let [m_occ, m_free, ve, vn, vee, vnn, ven] = acc;
            let v = [c * ve - s * vn, s * ve + c * vn];
            // R Σ Rᵀ
            let r_vee = c * c * vee - 2.0 * c * s * ven + s * s * vnn;
            let r_vnn = s * s * vee + 2.0 * c * s * ven + c * c * vnn;
            let r_ven = c * s * (vee - vnn) + (c * c - s * s) * ven;
            cells.push(DogmaCell {
                m_occ: m_occ as f32,
                m_free: m_free as f32,
                v_east: v[0] as f32,
                v_north: v[1] as f32,
                var_v_east: r_vee as f32,
                var_v_north: r_vnn as f32,
                cov_v: r_ven as f32,
            });
        }
    }
    DogmaFrame::new(g, cells, frame.timestamp(), pose)
}

// ---------------------------------------------------------------------------
// Cell classification

/// A maximal run of frames during which a cell stays risen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyInterval {
    /// First frame with P_O ≥ p_high.
    pub start: usize,
    /// One past the last frame of the interval; for a fallen interval, one
    /// past the last frame with P_O ≥ p_high.
    pub end: usize,
    /// Whether the interval ended with a fall below p_low.
    pub fell: bool,
    pub rise_strength: f64,
    pub fall_strength: f64,
    /// Soft dynamic score in [0, 1].
    pub score: f64,
}

impl OccupancyInterval {
    pub fn covers(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

/// Per-cell occupancy intervals with their dynamic scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CellClassification {
    geometry: GridGeometry,
    frame_count: usize,
    threshold: f64,
    intervals: Vec<Vec<OccupancyInterval>>,
}

impl CellClassification {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn intervals(&self, cell: usize) -> &[OccupancyInterval] {
        &self.intervals[cell]
    }

    /// Dynamic score of `cell` at `frame`; `None` where the cell is not
    /// observed occupied.
    pub fn score(&self, cell: usize, frame: usize) -> Option<f64> {
        self.intervals[cell]
            .iter()
            .find(|iv| iv.covers(frame))
            .map(|iv| iv.score)
    }

    /// Binary label at `frame` (`true` = dynamic), `None` where not applicable.
    pub fn label(&self, cell: usize, frame: usize) -> Option<bool> {
        self.score(cell, frame).map(|s| s >= self.threshold)
    }

    pub fn is_dynamic(&self, cell: usize, frame: usize) -> bool {
        self.label(cell, frame) == Some(true)
    }

    /// Sequence-level label: dynamic if any interval is dynamic, `None` if
    /// the cell was never observed occupied.
    pub fn aggregate_label(&self, cell: usize) -> Option<bool> {
        let ivs = &self.intervals[cell];
        if ivs.is_empty() {
            None
        } else {
            Some(ivs.iter().any(|iv| iv.score >= self.threshold))
        }
    }

    /// Scores of all cells at one frame.
    pub fn score_image(&self, frame: usize) -> Vec<Option<f64>> {
        (0..self.intervals.len()).map(|c| self.score(c, frame)).collect()
    }
}

/// Number of leading frames that carry any information. Trailing frames in
/// which every cell reads exactly P_O = 0.5 are ignored.
fn informative_len(frames: &[DogmaFrame]) -> usize {
    frames
        .iter()
        .rposition(|f| f.cells().iter().any(|c| occupancy_probability(c) != 0.5))
        .map_or(0, |i| i + 1)
}

fn strength(swing: f64, scale: f64) -> f64 {
    (swing / scale).clamp(0.0, 1.0)
}

/// Hysteresis scan of one occupancy history.
fn scan_history(p: &[f64], cfg: &AutolabelConfig) -> Vec<OccupancyInterval> {
    let last_observed = p.iter().rposition(|&v| v != 0.5).map_or(0, |i| i + 1);
    let min_of = |r: std::ops::Range<usize>| p[r].iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = Vec::new();
    let mut prev_end = 0;
    let mut t = 0;
    while t < last_observed {
        if p[t] < cfg.p_high {
            t += 1;
            continue;
        }
        let start = t;
        // Measure the rise from where the cell last read free, so a slow
        // climb through the hysteresis band keeps its full swing.
        let before = match (prev_end..start).rev().find(|&i| p[i] < cfg.p_low) {
            Some(s) => min_of(s.saturating_sub(2).max(prev_end)..s + 1),
            None if start == 0 => 0.5,
            None => min_of(start.saturating_sub(3)..start),
        };
        let mut peak = p[t];
        let mut last_high = t;
        let mut vanished = false;
        while t < last_observed && p[t] >= cfg.p_low {
            if p[t] >= cfg.p_high {
                last_high = t;
            } else if t - last_high <= cfg.vanish_frames
                && p[t..(t + cfg.vanish_frames).min(last_observed)]
                    .iter()
                    .all(|v| (v - 0.5).abs() <= cfg.vanish_band)
            {
                vanished = true;
                break;
            }
            peak = peak.max(p[t]);
            t += 1;
        }
        let fell = t < last_observed;
        // The object has left by the time P_O slides below p_low; the
        // frames spent sliding through the band are not occupied.
        let end = if fell { last_high + 1 } else { t };
        let rise_strength = strength(peak - before, cfg.swing_scale);
        let fall_strength = if vanished {
            strength(peak - 0.5, cfg.swing_scale)
        } else if fell {
            strength(peak - min_of(t..(t + 3).min(last_observed)), cfg.swing_scale)
        } else {
            0.0
        };
        out.push(OccupancyInterval {
            start,
            end,
            fell,
            rise_strength,
            fall_strength,
            score: rise_strength.min(fall_strength),
        });
        prev_end = t;
        if vanished {
            // Skip the unobserved stretch that follows.
            while t < last_observed && (p[t] - 0.5).abs() <= cfg.vanish_band {
                t += 1;
            }
            prev_end = t;
        }
    }
    out
}

/// 8-connected components of the cells selected by `mask`, each listed in
/// ascending index order; components are ordered by their smallest index.
pub fn connected_components(geometry: &GridGeometry, mask: &[bool]) -> Vec<Vec<usize>> {
    components_within(geometry, mask, 1)
}

/// Like [`connected_components`], but cells up to `radius` cells apart in
/// either axis count as adjacent.
pub fn components_within(geometry: &GridGeometry, mask: &[bool], radius: usize) -> Vec<Vec<usize>> {
    let (w, h) = (geometry.width_cells, geometry.height_cells);
    let r = radius as isize;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (e, n) = (i % w, i / w);
            for dn in -r..=r {
                for de in -r..=r {
                    let (ne, nn) = (e as isize + de, n as isize + dn);
                    if ne < 0 || nn < 0 || ne as usize >= w || nn as usize >= h {
                        continue;
                    }
                    let j = nn as usize * w + ne as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Classifies every cell of an aligned sequence from its P_O history.
///
/// A rise above `p_high` followed by a fall below `p_low` scores
/// `min(rise_strength, fall_strength)`. Occupancy that never falls scores 0
/// unless it is part of a region that rose recently right next to cells
/// that just fell: the footprint of an object still moving when the
/// recording stops. Such cells borrow the neighbouring fall strength.
pub fn classify_cells(
    frames: &[DogmaFrame],
    cfg: &AutolabelConfig,
) -> Result<CellClassification, AutolabelError> {
    cfg.validate()?;
    if frames.len() < 3 {
        return Err(AutolabelError::TooFewFrames {
            min: 3,
            actual: frames.len(),
        });
    }
    let geometry = *frames[0].geometry();
    for (i, f) in frames.iter().enumerate() {
        if *f.geometry() != geometry {
            return Err(AutolabelError::GeometryMismatch(i));
        }
    }
    let n_cells = geometry.cell_count();
    let images: Vec<Vec<f64>> = frames.iter().map(DogmaFrame::occupancy_image).collect();
    let mut history = vec![0.0; frames.len()];
    let mut intervals: Vec<Vec<OccupancyInterval>> = (0..n_cells)
        .map(|c| {
            for (t, img) in images.iter().enumerate() {
                history[t] = img[c];
            }
            scan_history(&history, cfg)
        })
        .collect();

    let seq_end = informative_len(frames);
    let recent_from = seq_end.saturating_sub(cfg.coherence_window);
    let persisting: Vec<bool> = intervals
        .iter()
        .map(|ivs| ivs.last().is_some_and(|iv| !iv.fell))
        .collect();
    let (w, h) = (geometry.width_cells as isize, geometry.height_cells as isize);
    let r = cfg.coherence_radius as isize;
    for comp in connected_components(&geometry, &persisting) {
        let recent: Vec<usize> = comp
            .iter()
            .copied()
            .filter(|&c| intervals[c].last().is_some_and(|iv| iv.start >= recent_from))
            .collect();
        if recent.is_empty() {
            continue;
        }
        let (mut fall_sum, mut fall_n) = (0.0, 0usize);
        let mut visited = std::collections::HashSet::new();
        for &c in &comp {
            let (e, n) = ((c % w as usize) as isize, (c / w as usize) as isize);
            for dn in -r..=r {
                for de in -r..=r {
                    let (ne, nn) = (e + de, n + dn);
                    if ne < 0 || nn < 0 || ne >= w || nn >= h {
                        continue;
                    }
                    let j = (nn * w + ne) as usize;
                    if !visited.insert(j) {
                        continue;
                    }
                    for iv in &intervals[j] {
                        if iv.fell && iv.end >= recent_from {
                            fall_sum += iv.fall_strength;
                            fall_n += 1;
                        }
                    }
                }
            }
        }
        if fall_n == 0 {
            continue;
        }
        let borrowed = fall_sum / fall_n as f64;
        for c in recent {
            let iv = intervals[c].last_mut().expect("persisting cell has an interval");
            iv.fall_strength = borrowed;
            iv.score = iv.rise_strength.min(borrowed);
        }
    }

    suppress_isolated(&geometry, &mut intervals, cfg);

    Ok(CellClassification {
        geometry,
        frame_count: frames.len(),
        threshold: cfg.score_threshold,
        intervals,
    })
}

/// Scales down dynamic intervals that few neighbouring cells share. A moving
/// object sweeps a patch of cells at once; a lone flickering cell at the
/// ragged edge of a static structure does not.
fn suppress_isolated(
    geometry: &GridGeometry,
    intervals: &mut [Vec<OccupancyInterval>],
    cfg: &AutolabelConfig,
) {
    if cfg.min_support == 0 {
        return;
    }
    let dynamic: Vec<Vec<(usize, usize)>> = intervals
        .iter()
        .map(|ivs| {
            ivs.iter()
                .filter(|iv| iv.score >= cfg.score_threshold)
                .map(|iv| (iv.start, iv.end))
                .collect()
        })
        .collect();
    let (w, h) = (geometry.width_cells as isize, geometry.height_cells as isize);
    let r = cfg.coherence_radius as isize;
    for (c, ivs) in intervals.iter_mut().enumerate() {
        let (e, n) = ((c % w as usize) as isize, (c / w as usize) as isize);
        for iv in ivs.iter_mut().filter(|iv| iv.score >= cfg.score_threshold) {
            let mut support = 0;
            'search: for dn in -r..=r {
                for de in -r..=r {
                    let (ne, nn) = (e + de, n + dn);
                    if (de, dn) == (0, 0) || ne < 0 || nn < 0 || ne >= w || nn >= h {
                        continue;
                    }
                    let j = (nn * w + ne) as usize;
                    if dynamic[j].iter().any(|&(s, t)| s < iv.end && iv.start < t) {
                        support += 1;
                        if support >= cfg.min_support {
                            break 'search;
                        }
                    }
                }
            }
            if support < cfg.min_support {
                iv.score *= (support + 1) as f64 / (cfg.min_support + 1) as f64;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rectangle fitting

/// One connected dynamic region in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFit {
    pub frame: usize,
    /// Cell indices of the region.
    pub cells: Vec<usize>,
    /// Minimum-area rectangle around the cells' corners.
    pub object_box: ObjectBox,
    /// Mean of the cell centers.
    pub centroid: Point,
}

fn cell_corners(g: &GridGeometry, cells: &[usize]) -> Vec<Point> {
    let h = g.cell_size / 2.0;
    let mut pts = Vec::with_capacity(cells.len() * 4);
    for &c in cells {
        let (e, n) = g.coords(c);
        let [x, y] = g.cell_center(e, n);
        pts.extend([[x - h, y - h], [x + h, y - h], [x + h, y + h], [x - h, y + h]]);
    }
    pts
}

/// Rectangle fit of one set of cells, or `None` below `min_cells`.
pub fn fit_region(
    geometry: &GridGeometry,
    frame: usize,
    cells: Vec<usize>,
    min_cells: usize,
) -> Option<RegionFit> {
    if cells.len() < min_cells.max(1) {
        return None;
    }
    let object_box = min_area_rect(&cell_corners(geometry, &cells))?;
    let mut centroid = [0.0; 2];
    for &c in &cells {
        let (e, n) = geometry.coords(c);
        let p = geometry.cell_center(e, n);
        centroid[0] += p[0];
        centroid[1] += p[1];
    }
    let k = cells.len() as f64;
    Some(RegionFit {
        frame,
        cells,
        object_box,
        centroid: [centroid[0] / k, centroid[1] / k],
    })
}

/// Per-frame rectangles around 8-connected components of dynamic cells.
pub fn fit_rectangles(classification: &CellClassification, cfg: &AutolabelConfig) -> Vec<Vec<RegionFit>> {
    let g = classification.geometry;
    let n_cells = g.cell_count();
    (0..classification.frame_count)
        .map(|t| {
            let mask: Vec<bool> = (0..n_cells).map(|c| classification.is_dynamic(c, t)).collect();
            components_within(&g, &mask, cfg.merge_radius)
                .into_iter()
                .filter_map(|comp| fit_region(&g, t, comp, cfg.min_cells))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tracking and refinement

/// A region followed over contiguous frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub start_frame: usize,
    /// Refined per-frame boxes, one per frame from `start_frame`.
    pub boxes: Vec<ObjectBox>,
    /// Unrefined per-frame fits.
    pub raw_boxes: Vec<ObjectBox>,
    pub width: f64,
    pub length: f64,
    pub valid: bool,
}

impl Track {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<&ObjectBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }
}

/// Nearest-rank percentile (`q` in [0, 1]) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Greedy frame-to-frame association of region fits into contiguous chains,
/// returned as lists of (frame, index into that frame's fits).
fn associate(fits: &[Vec<RegionFit>], gate: f64) -> Vec<Vec<(usize, usize)>> {
    let mut finished: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut active: Vec<Vec<(usize, usize)>> = Vec::new();
    for (t, frame_fits) in fits.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (a, chain) in active.iter().enumerate() {
            let &(pt, pi) = chain.last().expect("chains are non-empty");
            let p = fits[pt][pi].centroid;
            for (j, f) in frame_fits.iter().enumerate() {
                let d = (f.centroid[0] - p[0]).hypot(f.centroid[1] - p[1]);
                if d <= gate {
                    pairs.push((d, a, j));
                }
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut chain_used = vec![false; active.len()];
        let mut fit_used = vec![false; frame_fits.len()];
        for (_, a, j) in pairs {
            if !chain_used[a] && !fit_used[j] {
                chain_used[a] = true;
                fit_used[j] = true;
                active[a].push((t, j));
            }
        }
        let mut next = Vec::new();
        for (a, chain) in active.into_iter().enumerate() {
            if chain_used[a] {
                next.push(chain);
            } else {
                finished.push(chain);
            }
        }
        for (j, used) in fit_used.iter().enumerate() {
            if !used {
                next.push(vec![(t, j)]);
            }
        }
        active = next;
    }
    finished.extend(active);
    finished.sort_by_key(|c| (c[0].0, c[0].1));
    finished
}

/// Central-difference velocities of a centroid sequence, clamped to the
/// available frames at either end.
fn velocities(centroids: &[Point], times: &[f64], half: usize) -> Vec<[f64; 2]> {
    let n = centroids.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half).min(n - 1));
            let dt = times[b] - times[a];
            if b == a || dt <= 0.0 {
                [0.0, 0.0]
            } else {
                [
                    (centroids[b][0] - centroids[a][0]) / dt,
                    (centroids[b][1] - centroids[a][1]) / dt,
                ]
            }
        })
        .collect()
}

fn plausible(centroids: &[Point], times: &[f64], cfg: &AutolabelConfig) -> bool {
    if centroids.len() < cfg.min_track_length {
        return false;
    }
    for i in 1..centroids.len() {
        let dt = times[i] - times[i - 1];
        let d = (centroids[i][0] - centroids[i - 1][0]).hypot(centroids[i][1] - centroids[i - 1][1]);
        if dt <= 0.0 || d / dt > cfg.max_speed {
            return false;
        }
    }
    let v = velocities(centroids, times, cfg.velocity_window);
    let k = cfg.velocity_window;
    for i in 0..v.len() {
        let (a, b) = (i.saturating_sub(k), (i + k).min(v.len() - 1));
        let dt = times[b] - times[a];
        if b > a && dt > 0.0 {
            let acc = (v[b][0] - v[a][0]).hypot(v[b][1] - v[a][1]) / dt;
            if acc > cfg.max_accel {
                return false;
            }
        }
    }
    true
}

/// Extent of a point set along `u` and across it: (min_u, max_u, min_v, max_v).
fn extents(points: &[Point], u: Point) -> (f64, f64, f64, f64) {
    let v = [-u[1], u[0]];
    let mut r = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let a = p[0] * u[0] + p[1] * u[1];
        let b = p[0] * v[0] + p[1] * v[1];
        r = (r.0.min(a), r.1.max(a), r.2.min(b), r.3.max(b));
    }
    r
}

/// Places an interval of length `size` over an observed span `[lo, hi]`.
/// When the size exceeds the span, the side facing the sensor stays fixed
/// and the interval grows away from it.
fn place(lo: f64, hi: f64, size: f64, sensor: f64) -> f64 {
    if size <= hi - lo {
        return (lo + hi) / 2.0;
    }
    if sensor <= (lo + hi) / 2.0 {
        lo + size / 2.0
    } else {
        hi - size / 2.0
    }
}

/// Links per-frame fits into tracks and refines them.
///
/// `times` holds the frame timestamps and `sensor` the sensor position per
/// frame, both in the aligned coordinates of `geometry`.
pub fn refine_tracks(
    fits: &[Vec<RegionFit>],
    geometry: &GridGeometry,
    times: &[f64],
    sensor: &[Point],
    cfg: &AutolabelConfig,
) -> Vec<Track> {
    assert_eq!(fits.len(), times.len(), "one timestamp per frame");
    assert_eq!(fits.len(), sensor.len(), "one sensor position per frame");
    let min_size = geometry.cell_size;
    let mut tracks = Vec::new();
    for (id, chain) in associate(fits, cfg.gate_distance).into_iter().enumerate() {
        let regions: Vec<&RegionFit> = chain.iter().map(|&(t, j)| &fits[t][j]).collect();
        let centroids: Vec<Point> = regions.iter().map(|r| r.centroid).collect();
        let chain_times: Vec<f64> = chain.iter().map(|&(t, _)| times[t]).collect();
        let vel = velocities(&centroids, &chain_times, cfg.velocity_window);
        let headings: Vec<f64> = regions
            .iter()
            .zip(&vel)
            .map(|(r, v)| {
                if v[0].hypot(v[1]) > cfg.orientation_from_motion_speed {
                    let motion = v[1].atan2(v[0]);
                    let quarter = std::f64::consts::FRAC_PI_2;
                    let d = (motion - r.object_box.orientation + quarter / 2.0).rem_euclid(quarter)
                        - quarter / 2.0;
                    if d.abs() <= cfg.orientation_snap {
                        motion - d
                    } else {
                        motion
                    }
                } else {
                    r.object_box.orientation
                }
            })
            .collect();
        let corners: Vec<Vec<Point>> = regions
            .iter()
            .map(|r| cell_corners(geometry, &r.cells))
            .collect();
        let spans: Vec<(f64, f64, f64, f64)> = corners
            .iter()
            .zip(&headings)
            .map(|(pts, &h)| extents(pts, [h.cos(), h.sin()]))
            .collect();
        let along: Vec<f64> = spans.iter().map(|s| s.1 - s.0).collect();
        let across: Vec<f64> = spans.iter().map(|s| s.3 - s.2).collect();
        let length = percentile(&along, cfg.size_percentile).max(min_size);
        let width = percentile(&across, cfg.size_percentile).max(min_size);
        let boxes: Vec<ObjectBox> = chain
            .iter()
            .zip(spans.iter().zip(&headings))
            .map(|(&(t, _), (s, &h))| {
                let u = [h.cos(), h.sin()];
                let v = [-u[1], u[0]];
                let su = sensor[t][0] * u[0] + sensor[t][1] * u[1];
                let sv = sensor[t][0] * v[0] + sensor[t][1] * v[1];
                let cu = place(s.0, s.1, length, su);
                let cv = place(s.2, s.3, width, sv);
                ObjectBox {
                    center_east: cu * u[0] + cv * v[0],
                    center_north: cu * u[1] + cv * v[1],
                    width,
                    length,
                    orientation: canonical_orientation(h),
                    score: None,
                }
                .length_major()
            })
            .collect();
        let (width, length) = (width.min(length), width.max(length));
        tracks.push(Track {
            id,
            start_frame: chain[0].0,
            raw_boxes: regions.iter().map(|r| r.object_box).collect(),
            boxes,
            width,
            length,
            valid: plausible(&centroids, &chain_times, cfg),
        });
    }
    mark_fragments(&mut tracks, cfg.fragment_overlap);
    tracks
}

/// Invalidates tracks that mostly lie inside a longer valid track.
fn mark_fragments(tracks: &mut [Track], overlap: f64) {
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(tracks[i].len()));
    for (rank, &a) in order.iter().enumerate() {
        if !tracks[a].valid {
            continue;
        }
        let covered = order[..rank].iter().any(|&b| {
            if !tracks[b].valid || tracks[b].len() <= tracks[a].len() {
                return false;
            }
            let inside: f64 = tracks[a]
                .raw_boxes
                .iter()
                .enumerate()
                .map(|(i, own)| {
                    tracks[b]
                        .box_at(tracks[a].start_frame + i)
                        .map_or(0.0, |big| intersection_area(own, big) / own.area())
                })
                .sum();
            inside / tracks[a].len() as f64 > overlap
        });
        if covered {
            tracks[a].valid = false;
        }
    }
}

// ---------------------------------------------------------------------------
// Labels

/// Training targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub timestamp: f64,
    pub ego_pose: Pose,
    /// y_s: P_O on static cells, 0 on dynamic cells.
    pub static_map: Vec<f32>,
    /// (track id, box) for every valid track present in the frame.
    pub boxes: Vec<(usize, ObjectBox)>,
}

/// Static-map targets and box lists for every frame.
pub fn make_labels(
    tracks: &[Track],
    classification: &CellClassification,
    frames: &[DogmaFrame],
) -> Vec<FrameLabels> {
    let g = classification.geometry;
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let boxes: Vec<(usize, ObjectBox)> = tracks
                .iter()
                .filter(|tr| tr.valid)
                .filter_map(|tr| tr.box_at(t).map(|b| (tr.id, *b)))
                .collect();
            let static_map = f
                .cells()
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if classification.is_dynamic(c, t) {
                        return 0.0;
                    }
                    let (e, n) = g.coords(c);
                    let p = g.cell_center(e, n);
                    if boxes.iter().any(|(_, b)| b.contains(p)) {
                        0.0
                    } else {
                        occupancy_probability(cell) as f32
                    }
                })
                .collect();
            FrameLabels {
                timestamp: f.timestamp(),
                ego_pose: f.ego_pose(),
                static_map,
                boxes,
            }
        })
        .collect()
}

/// Everything produced by [`autolabel`].
#[derive(Debug, Clone)]
pub struct AutolabelOutput {
    pub aligned: Vec<DogmaFrame>,
    pub classification: CellClassification,
    pub fits: Vec<Vec<RegionFit>>,
    pub tracks: Vec<Track>,
    pub labels: Vec<FrameLabels>,
}

/// Runs alignment, classification, fitting, refinement and labeling.
pub fn autolabel(
    frames: &[DogmaFrame],
    cfg: &AutolabelConfig,
) -> Result<AutolabelOutput, AutolabelError> {
    cfg.validate()?;
    if frames.len() < 3 {
        return Err(AutolabelError::TooFewFrames {
            min: 3,
            actual: frames.len(),
        });
    }
    let aligned = ego_align(frames)?;
    let classification = classify_cells(&aligned, cfg)?;
    let fits = fit_rectangles(&classification, cfg);
    let reference = aligned[0].ego_pose();
    let times: Vec<f64> = aligned.iter().map(DogmaFrame::timestamp).collect();
    let sensor: Vec<Point> = aligned
        .iter()
        .map(|f| {
            let p = f.ego_pose();
            world_to_local(reference, [p.east, p.north])
        })
        .collect();
    let tracks = refine_tracks(&fits, classification.geometry(), &times, &sensor, cfg);
    let labels = make_labels(&tracks, &classification, &aligned);
    Ok(AutolabelOutput {
        aligned,
        classification,
        fits,
        tracks,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Label files

/// One row of the box list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub frame: usize,
    pub track_id: usize,
    pub east: f64,
    pub north: f64,
    pub width: f64,
    pub length: f64,
    pub orientation: f64,
}

impl BoxRecord {
    pub fn to_box(&self) -> Result<ObjectBox, crate::geometry::GeometryError> {
        ObjectBox::new(self.east, self.north, self.width, self.length, self.orientation)
    }
}

/// Writes the static maps as a one-channel grid sequence.
pub fn write_static_maps(
    labels: &[FrameLabels],
    geometry: GridGeometry,
    path: impl AsRef<Path>,
) -> Result<(), AutolabelError> {
    let frames = labels
        .iter()
        .map(|l| RawFrame {
            timestamp: l.timestamp,
            ego_pose: l.ego_pose,
            data: l.static_map.clone(),
        })
        .collect();
    write_sequence(&GridSequence::new(geometry, 1, frames)?, path)?;
    Ok(())
}

/// Writes the box lists of all frames as CSV.
pub fn write_boxes_csv<W: Write>(labels: &[FrameLabels], out: W) -> Result<(), AutolabelError> {
    let mut w = csv::Writer::from_writer(out);
    for (frame, l) in labels.iter().enumerate() {
        for &(track_id, b) in &l.boxes {
            w.serialize(BoxRecord {
                frame,
                track_id,
                east: b.center_east,
                north: b.center_north,
                width: b.width,
                length: b.length,
                orientation: b.orientation,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a box list written by [`write_boxes_csv`].
pub fn read_boxes_csv<R: std::io::Read>(input: R) -> Result<Vec<BoxRecord>, AutolabelError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|rec| Ok(rec?)).collect()
}

/// Groups box records by frame.
pub fn boxes_by_frame(records: &[BoxRecord], frame_count: usize) -> Vec<Vec<ObjectBox>> {
    let mut out = vec![Vec::new(); frame_count];
    for r in records {
        if let (Some(slot), Ok(b)) = (out.get_mut(r.frame), r.to_box()) {
            slot.push(b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(w: usize, h: usize) -> GridGeometry {
        GridGeometry::new(w, h, 0.15, 0.0, 0.0).unwrap()
    }

    fn cell_with_p(p: f64) -> DogmaCell {
        // P_O = 0.5·occ + 0.5·(1 − free)
        if p >= 0.5 {
            DogmaCell {
                m_occ: (2.0 * p - 1.0) as f32,
                ..Default::default()
            }
        } else {
            DogmaCell {
                m_free: (1.0 - 2.0 * p) as f32,
                ..Default::default()
            }
        }
    }

    /// Frames of a `side`×`side` patch whose cells all follow one history.
    fn patch_frames(p: &[f64], side: usize) -> Vec<DogmaFrame> {
        p.iter()
            .enumerate()
            .map(|(t, &v)| {
                let cells = vec![cell_with_p(v); side * side];
                DogmaFrame::new(geometry(side, side), cells, t as f64 * 0.1, Pose::default()).unwrap()
            })
            .collect()
    }

    /// A 3×3 patch sharing one P_O history, the way a small moving object
    /// sweeps several cells at once.
    fn history_frames(p: &[f64]) -> Vec<DogmaFrame> {
        patch_frames(p, 3)
    }

    #[test]
    fn constant_occupancy_is_static() {
        let frames = history_frames(&[0.9; 20]);
        let cls = classify_cells(&frames, &AutolabelConfig::default()).unwrap();
        assert_eq!(cls.intervals(0).len(), 1);
        assert_eq!(cls.score(0, 10), Some(0.0));
        assert_eq!(cls.label(0, 10), Some(false));
    }

    #[test]
    fn rise_then_fall_is_dynamic_during_interval() {
        let mut p = vec![0.5; 5];
        p.extend([0.9; 11]);
        p.extend([0.1; 10]);
        let cls = classify_cells(&history_frames(&p), &AutolabelConfig::default()).unwrap();
        let iv = cls.intervals(0)[0];
        assert_eq!((iv.start, iv.end, iv.fell), (5, 16, true));
        assert!(iv.score > 0.79, "{iv:?}");
        for t in 5..16 {
            assert_eq!(cls.label(0, t), Some(true));
        }
        assert_eq!(cls.score(0, 4), None);
        assert_eq!(cls.score(0, 16), None);
        assert_eq!(cls.aggregate_label(0), Some(true));
    }

    #[test]
    fn lone_flickering_cell_is_scaled_down() {
        let mut p = vec![0.5; 5];
        p.extend([0.9; 11]);
        p.extend([0.1; 10]);
        let g = geometry(5, 5);
        let frames: Vec<DogmaFrame> = p
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                let mut cells = vec![cell_with_p(0.05); 25];
                cells[12] = cell_with_p(v);
                DogmaFrame::new(g, cells, t as f64 * 0.1, Pose::default()).unwrap()
            })
            .collect();
        let cls = classify_cells(&frames, &AutolabelConfig::default()).unwrap();
        let iv = cls.intervals(12)[0];
        assert!((iv.score - 0.25 * iv.rise_strength.min(iv.fall_strength)).abs() < 1e-12);
        assert_eq!(cls.label(12, 8), Some(false));
    }

    #[test]
    fn occupancy_vanishing_unseen_counts_as_fall() {
        let mut p = vec![0.5; 5];
        p.extend([0.9; 10]);
        p.extend([0.7, 0.52]);
        p.extend([0.5; 10]);
        p.push(0.51);
        let cls = classify_cells(&history_frames(&p), &AutolabelConfig::default()).unwrap();
        let iv = cls.intervals(0)[0];
        assert_eq!((iv.start, iv.end, iv.fell), (5, 16, true));
        assert!((iv.fall_strength - 0.8).abs() < 1e-6, "{iv:?}");
        assert_eq!(cls.label(0, 10), Some(true));
    }

    #[test]
    fn slow_decay_is_not_a_vanish() {
        let mut p = vec![0.5; 5];
        p.extend([0.9; 10]);
        p.extend((1..=20).map(|k| 0.9 - 0.02 * k as f64));
        p.push(0.51);
        let cls = classify_cells(&history_frames(&p), &AutolabelConfig::default()).unwrap();
        let iv = cls.intervals(0)[0];
        assert!(!iv.fell, "{iv:?}");
        assert_eq!(iv.score, 0.0);
    }

    #[test]
    fn slow_rise_keeps_its_full_swing() {
        let mut p = vec![0.05; 5];
        p.extend([0.6, 0.62, 0.65, 0.66, 0.68, 0.75, 0.8, 0.8]);
        p.extend([0.05; 5]);
        let cls = classify_cells(&history_frames(&p), &AutolabelConfig::default()).unwrap();
        let iv = cls.intervals(0)[0];
        assert_eq!(iv.start, 10);
        assert!((iv.rise_strength - 1.0).abs() < 1e-9, "{iv:?}");
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let err = classify_cells(&history_frames(&[0.9, 0.9]), &AutolabelConfig::default());
        assert!(matches!(err, Err(AutolabelError::TooFewFrames { .. })));
    }

    #[test]
    fn appended_unknown_frames_do_not_change_classification() {
        let mut p = vec![0.2; 3];
        p.extend([0.9; 4]);
        p.extend([0.2; 3]);
        p.extend([0.8; 5]);
        let cfg = AutolabelConfig::default();
        let a = classify_cells(&history_frames(&p), &cfg).unwrap();
        p.extend([0.5; 7]);
        let b = classify_cells(&history_frames(&p), &cfg).unwrap();
        assert_eq!(a.intervals(0), b.intervals(0));
    }

    #[test]
    fn persisting_region_next_to_recent_fall_is_dynamic() {
        // Two columns side by side: the left one is vacated at frame 8 while
        // the right one fills at frame 8 and stays filled to the end.
        let g = geometry(2, 4);
        let frames: Vec<DogmaFrame> = (0..12)
            .map(|t| {
                let left = if t < 8 { 0.9 } else { 0.1 };
                let right = if t < 8 { 0.1 } else { 0.9 };
                let cells = (0..8).map(|i| cell_with_p(if i % 2 == 0 { left } else { right })).collect();
                DogmaFrame::new(g, cells, t as f64 * 0.1, Pose::default()).unwrap()
            })
            .collect();
        let cls = classify_cells(&frames, &AutolabelConfig::default()).unwrap();
        assert_eq!(cls.label(1, 11), Some(true));
        assert_eq!(cls.label(0, 3), Some(true));
    }

    #[test]
    fn components_are_eight_connected() {
        let g = geometry(4, 3);
        #[rustfmt::skip]
        let mask = [
            true, false, false, true,
            false, true, false, false,
            false, false, false, true,
        ];
        let comps = connected_components(&g, &mask);
        assert_eq!(comps, vec![vec![0, 5], vec![3], vec![11]]);
    }

    #[test]
    fn region_fit_of_axis_aligned_blob() {
        let g = geometry(20, 20);
        let cells: Vec<usize> = (2..12)
            .flat_map(|e| (3..7).map(move |n| (e, n)))
            .map(|(e, n)| g.index(e, n))
            .collect();
        let fit = fit_region(&g, 0, cells, 4).unwrap();
        let b = fit.object_box;
        assert!((b.width - 0.6).abs() < 1e-9 && (b.length - 1.5).abs() < 1e-9, "{b:?}");
        assert!(b.orientation.abs() < 1e-9);
        assert!(fit_region(&g, 0, vec![0, 1], 4).is_none());
    }

    #[test]
    fn nearest_rank_percentile() {
        assert_eq!(percentile(&[4.0, 4.1, 2.0, 4.0], 0.9), 4.1);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
    }

    #[test]
    fn place_grows_away_from_sensor() {
        assert_eq!(place(1.0, 2.0, 3.0, 0.0), 2.5);
        assert_eq!(place(1.0, 2.0, 3.0, 5.0), 0.5);
        assert_eq!(place(1.0, 2.0, 0.5, 0.0), 1.5);
    }

    #[test]
    fn alignment_with_identical_poses_is_identity() {
        let frames = history_frames(&[0.2, 0.9, 0.3]);
        assert_eq!(ego_align(&frames).unwrap(), frames);
    }

    #[test]
    fn alignment_rejects_non_finite_pose() {
        let mut frames = history_frames(&[0.2, 0.9, 0.3]);
        let g = *frames[1].geometry();
        frames[1] = DogmaFrame::unknown(g, 0.1, Pose::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(ego_align(&frames), Err(AutolabelError::MissingEgoPose(1))));
    }

    #[test]
    fn alignment_rotates_velocities() {
        use std::f64::consts::FRAC_PI_2;
        let g = GridGeometry::new(3, 3, 1.0, -1.5, -1.5).unwrap();
        let mut cells = vec![DogmaCell::default(); 9];
        cells[4] = DogmaCell {
            m_occ: 0.9,
            v_east: 1.0,
            var_v_east: 4.0,
            var_v_north: 1.0,
            ..Default::default()
        };
        let f0 = DogmaFrame::new(g, vec![DogmaCell::default(); 9], 0.0, Pose::default()).unwrap();
        let f1 = DogmaFrame::new(g, cells, 0.1, Pose::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        let out = ego_align(&[f0, f1]).unwrap();
        let c = out[1].cells()[4];
        assert!((c.m_occ - 0.9).abs() < 1e-6);
        assert!(c.v_east.abs() < 1e-6 && (c.v_north - 1.0).abs() < 1e-6, "{c:?}");
        assert!((c.var_v_east - 1.0).abs() < 1e-5 && (c.var_v_north - 4.0).abs() < 1e-5);
    }

    #[test]
    fn tracks_get_one_refined_size() {
        let g = geometry(100, 40);
        let cfg = AutolabelConfig::default();
        // A 4×10 cell blob moving 2 cells east per frame; frame 2 is cut short.
        let fits: Vec<Vec<RegionFit>> = (0..6)
            .map(|t| {
                let len = if t == 2 { 5 } else { 10 };
                let cells: Vec<usize> = (0..len)
                    .flat_map(|e| (10..14).map(move |n| (e + 2 * t, n)))
                    .map(|(e, n)| g.index(e, n))
                    .collect();
                vec![fit_region(&g, t, cells, 4).unwrap()]
            })
            .collect();
        let times: Vec<f64> = (0..6).map(|t| t as f64 * 0.1).collect();
        let sensor = vec![[0.0, 0.0]; 6];
        let tracks = refine_tracks(&fits, &g, &times, &sensor, &cfg);
        assert_eq!(tracks.len(), 1);
        let tr = &tracks[0];
        assert!(tr.valid);
        assert!((tr.length - 1.5).abs() < 1e-9 && (tr.width - 0.6).abs() < 1e-9, "{tr:?}");
        for b in &tr.boxes {
            assert_eq!((b.width, b.length), (tr.width, tr.length));
        }
    }

    #[test]
    fn implausible_tracks_are_invalid() {
        let g = geometry(400, 10);
        let cfg = AutolabelConfig {
            gate_distance: 100.0,
            ..Default::default()
        };
        let blob = |e0: usize, t: usize| {
            let cells: Vec<usize> = (e0..e0 + 4)
                .flat_map(|e| (2..4).map(move |n| (e, n)))
                .map(|(e, n)| g.index(e, n))
                .collect();
            vec![fit_region(&g, t, cells, 4).unwrap()]
        };
        // 8 m per 0.1 s = 80 m/s
        let fits = vec![blob(0, 0), blob(53, 1), blob(106, 2)];
        let times = [0.0, 0.1, 0.2];
        let tracks = refine_tracks(&fits, &g, &times, &[[0.0, 0.0]; 3], &cfg);
        assert_eq!(tracks.len(), 1);
        assert!(!tracks[0].valid);
        // single-frame flicker
        let tracks = refine_tracks(&fits[..1], &g, &times[..1], &[[0.0, 0.0]], &cfg);
        assert!(!tracks[0].valid);
    }

    #[test]
    fn labels_zero_dynamic_cells_and_keep_static_occupancy() {
        let mut p = vec![0.5; 3];
        p.extend([0.9; 3]);
        p.extend([0.1; 3]);
        let frames = history_frames(&p);
        let cls = classify_cells(&frames, &AutolabelConfig::default()).unwrap();
        let labels = make_labels(&[], &cls, &frames);
        assert_eq!(labels[4].static_map[0], 0.0);
        assert!((labels[7].static_map[0] - 0.1).abs() < 1e-6);
        let still = history_frames(&[0.9; 5]);
        let cls = classify_cells(&still, &AutolabelConfig::default()).unwrap();
        let labels = make_labels(&[], &cls, &still);
        assert!((labels[2].static_map[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn box_csv_round_trip() {
        let b = ObjectBox::new(1.0, -2.0, 0.6, 0.8, 0.3).unwrap();
        let labels = vec![FrameLabels {
            timestamp: 0.0,
            ego_pose: Pose::default(),
            static_map: vec![],
            boxes: vec![(7, b)],
        }];
        let mut buf = Vec::new();
        write_boxes_csv(&labels, &mut buf).unwrap();
        let recs = read_boxes_csv(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].track_id, 7);
        assert_eq!(recs[0].to_box().unwrap(), b);
    }
}
