//! Grid geometry, the seven-channel DOGMa cell model and Dempster-Shafer
//! mass algebra over the frame {Occupied, Free}.
//!
//! Cells are stored row-major with east as the fast axis: the cell at
//! column `east` and row `north` lives at `north * width + east`.

mod io;

pub use io::{
    create_sequence, open_sequence, read_sequence, write_sequence, GridSequence, RawFrame,
    SequenceReader, SequenceWriter, FORMAT_VERSION, MAGIC,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of channels carried by every DOGMa cell.
pub const DOGMA_CHANNELS: usize = 7;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("cell data length {actual} does not match geometry ({expected} cells)")]
    CellCount { expected: usize, actual: usize },
    #[error("total conflict between mass assignments")]
    TotalConflict,
    #[error("invalid masses: occ={occ}, free={free}")]
    InvalidMasses { occ: f64, free: f64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("timestamps must strictly increase (frame {index})")]
    NonMonotonicTime { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A planar pose: position in meters and heading in radians
/// (counter-clockwise from east).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub east: f64,
    pub north: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(east: f64, north: f64, heading: f64) -> Self {
        Self {
            east,
            north,
            heading,
        }
    }
}

/// Regular square tessellation of a rectangular region.
///
/// `origin` is the world position of the outer corner of cell (0, 0); the
/// cell (e, n) covers `[origin + e*size, origin + (e+1)*size)` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_size: f64,
    pub origin_east: f64,
    pub origin_north: f64,
}

impl GridGeometry {
    pub fn new(
        width_cells: usize,
        height_cells: usize,
        cell_size: f64,
        origin_east: f64,
        origin_north: f64,
    ) -> Result<Self, GridError> {
        let geometry = Self {
            width_cells,
            height_cells,
            cell_size,
            origin_east,
            origin_north,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Square grid of `cells × cells` centered on the world origin.
    pub fn centered(cells: usize, cell_size: f64) -> Result<Self, GridError> {
        let half = cells as f64 * cell_size / 2.0;
        Self::new(cells, cells, cell_size, -half, -half)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.width_cells == 0 || self.height_cells == 0 {
            return Err(GridError::InvalidGeometry(format!(
                "dimensions must be positive, got {}x{}",
                self.width_cells, self.height_cells
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(GridError::InvalidGeometry(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.origin_east.is_finite() || !self.origin_north.is_finite() {
            return Err(GridError::InvalidGeometry("origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.width_cells * self.height_cells
    }

    #[inline]
    pub fn index(&self, east: usize, north: usize) -> usize {
        debug_assert!(east < self.width_cells && north < self.height_cells);
        north * self.width_cells + east
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width_cells, index / self.width_cells)
    }

    /// World coordinates of the center of cell (east, north).
    #[inline]
    pub fn cell_center(&self, east: usize, north: usize) -> [f64; 2] {
        [
            self.origin_east + (east as f64 + 0.5) * self.cell_size,
            self.origin_north + (north as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Continuous cell coordinates of a world point (cell (0,0) spans [0,1)²).
    #[inline]
    pub fn to_cell_coords(&self, east: f64, north: f64) -> [f64; 2] {
        [
            (east - self.origin_east) / self.cell_size,
            (north - self.origin_north) / self.cell_size,
        ]
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, east: f64, north: f64) -> Option<(usize, usize)> {
        let [x, y] = self.to_cell_coords(east, north);
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (ix, iy) = (x.floor() as usize, y.floor() as usize);
        (ix < self.width_cells && iy < self.height_cells).then_some((ix, iy))
    }

    pub fn contains(&self, east: f64, north: f64) -> bool {
        self.cell_of(east, north).is_some()
    }

    pub fn extent_east(&self) -> f64 {
        self.width_cells as f64 * self.cell_size
    }

    pub fn extent_north(&self) -> f64 {
        self.height_cells as f64 * self.cell_size
    }
}

/// A pair of Dempster-Shafer masses over {Occupied, Free}; the remainder
/// `1 - occ - free` is the mass on the whole frame (unknown).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Masses {
    pub occ: f64,
    pub free: f64,
}

impl Masses {
    pub const VACUOUS: Masses = Masses {
        occ: 0.0,
        free: 0.0,
    };

    pub const fn new(occ: f64, free: f64) -> Self {
        Self { occ, free }
    }

    pub fn is_valid(&self) -> bool {
        self.occ >= 0.0 && self.free >= 0.0 && self.occ + self.free <= 1.0 + 1e-12
    }

    #[inline]
    pub fn unknown(&self) -> f64 {
        (1.0 - self.occ - self.free).max(0.0)
    }

    /// Dempster's rule of combination.
    pub fn combine(self, other: Masses) -> Result<Masses, GridError> {
        ds_combine(self, other)
    }
}

/// Dempster's rule of combination for two mass assignments on {O, F}.
///
/// Fails with [`GridError::TotalConflict`] when the conflict
/// `k = a.occ*b.free + a.free*b.occ` reaches 1.
pub fn ds_combine(a: Masses, b: Masses) -> Result<Masses, GridError> {
    for m in [a, b] {
        if !m.is_valid() {
            return Err(GridError::InvalidMasses {
                occ: m.occ,
                free: m.free,
            });
        }
    }
    let conflict = a.occ * b.free + a.free * b.occ;
    let norm = 1.0 - conflict;
    if norm <= 0.0 {
        return Err(GridError::TotalConflict);
    }
    let (ua, ub) = (a.unknown(), b.unknown());
    let occ = (a.occ * b.occ + a.occ * ub + ua * b.occ) / norm;
    let free = (a.free * b.free + a.free * ub + ua * b.free) / norm;
    // Renormalization can overshoot by an ulp.
    let sum = occ + free;
    if sum > 1.0 {
        Ok(Masses::new(occ / sum, free / sum))
    } else {
        Ok(Masses::new(occ, free))
    }
}

/// One DOGMa cell: occupancy masses plus velocity mean and covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DogmaCell {
    pub m_occ: f32,
    pub m_free: f32,
    pub v_east: f32,
    pub v_north: f32,
    pub var_v_east: f32,
    pub var_v_north: f32,
    pub cov_v: f32,
}

impl DogmaCell {
    pub fn from_channels(ch: &[f32]) -> Self {
        Self {
            m_occ: ch[0],
            m_free: ch[1],
            v_east: ch[2],
            v_north: ch[3],
            var_v_east: ch[4],
            var_v_north: ch[5],
            cov_v: ch[6],
        }
    }

    /// Channels in storage order
    /// (m_occ, m_free, v_east, v_north, var_v_east, var_v_north, cov_v).
    pub fn channels(&self) -> [f32; DOGMA_CHANNELS] {
        [
            self.m_occ,
            self.m_free,
            self.v_east,
            self.v_north,
            self.var_v_east,
            self.var_v_north,
            self.cov_v,
        ]
    }

    pub fn masses(&self) -> Masses {
        Masses::new(self.m_occ as f64, self.m_free as f64)
    }

    pub fn speed(&self) -> f64 {
        (self.v_east as f64).hypot(self.v_north as f64)
    }

    pub fn is_valid(&self) -> bool {
        let (o, f) = (self.m_occ as f64, self.m_free as f64);
        let (ve, vn, c) = (
            self.var_v_east as f64,
            self.var_v_north as f64,
            self.cov_v as f64,
        );
        o >= 0.0
            && f >= 0.0
            && o + f <= 1.0 + 1e-6
            && ve >= 0.0
            && vn >= 0.0
            && c * c <= ve * vn * (1.0 + 1e-5) + 1e-12
            && self.channels().iter().all(|v| v.is_finite())
    }
}

/// Occupancy probability `0.5·m_occ + 0.5·(1 − m_free)`.
#[inline]
pub fn occupancy_probability(cell: &DogmaCell) -> f64 {
    0.5 * cell.m_occ as f64 + 0.5 * (1.0 - cell.m_free as f64)
}

/// Same as [`occupancy_probability`] for a bare mass pair.
#[inline]
pub fn occupancy_from_masses(m: Masses) -> f64 {
    0.5 * m.occ + 0.5 * (1.0 - m.free)
}

/// A full W×H DOGMa at one instant. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct DogmaFrame {
    geometry: GridGeometry,
    cells: Vec<DogmaCell>,
    timestamp: f64,
    ego_pose: Pose,
}

impl DogmaFrame {
    pub fn new(
        geometry: GridGeometry,
        cells: Vec<DogmaCell>,
        timestamp: f64,
        ego_pose: Pose,
    ) -> Result<Self, GridError> {
        geometry.validate()?;
        if cells.len() != geometry.cell_count() {
            return Err(GridError::CellCount {
                expected: geometry.cell_count(),
                actual: cells.len(),
            });
        }
        Ok(Self {
            geometry,
            cells,
            timestamp,
            ego_pose,
        })
    }

    /// Frame with every cell fully unknown and no velocity information.
    pub fn unknown(geometry: GridGeometry, timestamp: f64, ego_pose: Pose) -> Self {
        Self {
            geometry,
            cells: vec![DogmaCell::default(); geometry.cell_count()],
            timestamp,
            ego_pose,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn cells(&self) -> &[DogmaCell] {
        &self.cells
    }

    pub fn cell(&self, east: usize, north: usize) -> &DogmaCell {
        &self.cells[self.geometry.index(east, north)]
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn ego_pose(&self) -> Pose {
        self.ego_pose
    }

    /// P_O for every cell, in storage order.
    pub fn occupancy_image(&self) -> Vec<f64> {
        self.cells.iter().map(occupancy_probability).collect()
    }

    pub fn into_cells(self) -> Vec<DogmaCell> {
        self.cells
    }

    pub fn to_raw(&self) -> RawFrame {
        RawFrame {
            timestamp: self.timestamp,
            ego_pose: self.ego_pose,
            data: self.cells.iter().flat_map(|c| c.channels()).collect(),
        }
    }
}

/// Packs DOGMa frames into a seven-channel container sequence.
pub fn frames_to_sequence(frames: &[DogmaFrame]) -> Result<GridSequence, GridError> {
    let first = frames.first().ok_or(GridError::EmptySequence)?;
    let geometry = *first.geometry();
    let mut raw = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        if *f.geometry() != geometry {
            return Err(GridError::GeometryMismatch(format!(
                "frame {i} geometry differs from frame 0"
            )));
        }
        if i > 0 && f.timestamp() <= frames[i - 1].timestamp() {
            return Err(GridError::NonMonotonicTime { index: i });
        }
        raw.push(f.to_raw());
    }
    GridSequence::new(geometry, DOGMA_CHANNELS, raw)
}

/// Unpacks a seven-channel container sequence into DOGMa frames.
pub fn sequence_to_frames(seq: &GridSequence) -> Result<Vec<DogmaFrame>, GridError> {
    if seq.channels() != DOGMA_CHANNELS {
        return Err(GridError::MalformedHeader(format!(
            "expected {DOGMA_CHANNELS} channels, found {}",
            seq.channels()
        )));
    }
    seq.frames()
        .iter()
        .map(|raw| {
            let cells = raw
                .data
                .chunks_exact(DOGMA_CHANNELS)
                .map(DogmaCell::from_channels)
                .collect();
            DogmaFrame::new(*seq.geometry(), cells, raw.timestamp, raw.ego_pose)
        })
        .collect()
}

/// Writes DOGMa frames to a grid-sequence file.
pub fn write_dogma_sequence(
    frames: &[DogmaFrame],
    path: impl AsRef<std::path::Path>,
) -> Result<(), GridError> {
    write_sequence(&frames_to_sequence(frames)?, path)
}

/// Reads DOGMa frames from a grid-sequence file.
pub fn read_dogma_sequence(path: impl AsRef<std::path::Path>) -> Result<Vec<DogmaFrame>, GridError> {
    sequence_to_frames(&read_sequence(path)?)
}
