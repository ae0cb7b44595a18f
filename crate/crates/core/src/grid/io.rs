//! Grid-sequence container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "DGM1"
//! u32 version, u32 W, u32 H, u32 channel_count, u32 frame_count
//! f64 cell_size, f64 origin_east, f64 origin_north
//! per frame:
//!     f64 timestamp, f64 ego_east, f64 ego_north, f64 ego_heading
//!     W·H·channel_count f32 values, cell-major (all channels of a cell
//!     are contiguous), cells row-major with east as the fast axis
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{GridError, GridGeometry, Pose};

pub const MAGIC: &[u8; 4] = b"DGM1";
pub const FORMAT_VERSION: u32 = 1;

/// Size in bytes of the file header (magic included).
pub const HEADER_BYTES: usize = 4 + 5 * 4 + 3 * 8;
/// Size in bytes of the per-frame header (timestamp and ego pose).
pub const FRAME_HEADER_BYTES: usize = 4 * 8;

/// One frame of a multi-channel grid sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub timestamp: f64,
    pub ego_pose: Pose,
    pub data: Vec<f32>,
}

/// A sequence of equally shaped multi-channel grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSequence {
    geometry: GridGeometry,
    channels: usize,
    frames: Vec<RawFrame>,
}

impl GridSequence {
    pub fn new(
        geometry: GridGeometry,
        channels: usize,
        frames: Vec<RawFrame>,
    ) -> Result<Self, GridError> {
        geometry.validate()?;
        if channels == 0 {
            return Err(GridError::MalformedHeader("channel count is zero".into()));
        }
        if frames.is_empty() {
            return Err(GridError::EmptySequence);
        }
        let expected = geometry.cell_count() * channels;
        for (i, f) in frames.iter().enumerate() {
            if f.data.len() != expected {
                return Err(GridError::GeometryMismatch(format!(
                    "frame {i} carries {} values, expected {expected}",
                    f.data.len()
                )));
            }
        }
        Ok(Self {
            geometry,
            channels,
            frames,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> &[RawFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RawFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Exact encoded size of this sequence in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self.frames.len()
                * (FRAME_HEADER_BYTES + self.geometry.cell_count() * self.channels * 4)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), GridError> {
        let mut out = SequenceWriter::new(w, self.geometry, self.channels, self.frames.len())?;
        for f in &self.frames {
            out.push(f)?;
        }
        out.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, GridError> {
        let reader = SequenceReader::new(r)?;
        let (geometry, channels) = (reader.geometry(), reader.channels());
        let frames = reader.collect::<Result<Vec<_>, _>>()?;
        Self::new(geometry, channels, frames)
    }
}

/// Writes a sequence one frame at a time. The frame count is fixed up front
/// and checked by [`SequenceWriter::finish`].
pub struct SequenceWriter<W: Write> {
    out: W,
    values: usize,
    expected: usize,
    written: usize,
    buf: Vec<u8>,
}

impl<W: Write> SequenceWriter<W> {
    pub fn new(mut out: W, geometry: GridGeometry, channels: usize, frame_count: usize) -> Result<Self, GridError> {
        geometry.validate()?;
        if channels == 0 {
            return Err(GridError::MalformedHeader("channel count is zero".into()));
        }
        if frame_count == 0 {
            return Err(GridError::EmptySequence);
        }
        let g = &geometry;
        out.write_all(MAGIC)?;
        for v in [
            FORMAT_VERSION,
            to_u32(g.width_cells)?,
            to_u32(g.height_cells)?,
            to_u32(channels)?,
            to_u32(frame_count)?,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [g.cell_size, g.origin_east, g.origin_north] {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(Self {
            out,
            values: g.cell_count() * channels,
            expected: frame_count,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, f: &RawFrame) -> Result<(), GridError> {
        if self.written == self.expected {
            return Err(GridError::MalformedHeader(format!(
                "more than the declared {} frames",
                self.expected
            )));
        }
        if f.data.len() != self.values {
            return Err(GridError::CellCount {
                expected: self.values,
                actual: f.data.len(),
            });
        }
        for v in [f.timestamp, f.ego_pose.east, f.ego_pose.north, f.ego_pose.heading] {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.buf.clear();
        self.buf.reserve(f.data.len() * 4);
        for v in &f.data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and returns the sink; fails if fewer frames than declared
    /// were pushed.
    pub fn finish(mut self) -> Result<W, GridError> {
        if self.written != self.expected {
            return Err(GridError::Truncated(format!(
                "{} of {} declared frames written",
                self.written, self.expected
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads a sequence one frame at a time.
pub struct SequenceReader<R: Read> {
    input: R,
    geometry: GridGeometry,
    channels: usize,
    frame_count: usize,
    next: usize,
    buf: Vec<u8>,
}

impl<R: Read> SequenceReader<R> {
    pub fn new(mut r: R) -> Result<Self, GridError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(GridError::MalformedHeader(format!(
                "bad magic bytes {magic:?}"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(GridError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let width = read_u32(&mut r, "width")? as usize;
        let height = read_u32(&mut r, "height")? as usize;
        let channels = read_u32(&mut r, "channel count")? as usize;
        let frame_count = read_u32(&mut r, "frame count")? as usize;
        let cell_size = read_f64(&mut r, "cell size")?;
        let origin_east = read_f64(&mut r, "origin")?;
        let origin_north = read_f64(&mut r, "origin")?;
        let geometry = GridGeometry::new(width, height, cell_size, origin_east, origin_north)
            .map_err(|e| GridError::MalformedHeader(e.to_string()))?;
        if channels == 0 {
            return Err(GridError::MalformedHeader("channel count is zero".into()));
        }
        if frame_count == 0 {
            return Err(GridError::MalformedHeader("frame count is zero".into()));
        }
        let values = geometry
            .cell_count()
            .checked_mul(channels)
            .ok_or_else(|| GridError::MalformedHeader("grid too large".into()))?;
        Ok(Self {
            input: r,
            geometry,
            channels,
            frame_count,
            next: 0,
            buf: vec![0u8; values * 4],
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn read_frame(&mut self) -> Result<RawFrame, GridError> {
        let i = self.next;
        let r = &mut self.input;
        let what = format!("frame {i} header");
        let timestamp = read_f64(r, &what)?;
        let east = read_f64(r, &what)?;
        let north = read_f64(r, &what)?;
        let heading = read_f64(r, &what)?;
        read_exact(r, &mut self.buf, &format!("frame {i} payload"))?;
        let data = self
            .buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(RawFrame {
            timestamp,
            ego_pose: Pose::new(east, north, heading),
            data,
        })
    }
}

impl<R: Read> Iterator for SequenceReader<R> {
    type Item = Result<RawFrame, GridError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.frame_count {
            return None;
        }
        let frame = self.read_frame();
        self.next = if frame.is_ok() { self.next + 1 } else { self.frame_count };
        Some(frame)
    }
}

/// Opens a sequence file for frame-by-frame reading.
pub fn open_sequence(path: impl AsRef<Path>) -> Result<SequenceReader<BufReader<File>>, GridError> {
    SequenceReader::new(BufReader::new(File::open(path)?))
}

/// Creates a sequence file for frame-by-frame writing.
pub fn create_sequence(
    path: impl AsRef<Path>,
    geometry: GridGeometry,
    channels: usize,
    frame_count: usize,
) -> Result<SequenceWriter<BufWriter<File>>, GridError> {
    SequenceWriter::new(BufWriter::new(File::create(path)?), geometry, channels, frame_count)
}

fn to_u32(v: usize) -> Result<u32, GridError> {
    u32::try_from(v).map_err(|_| GridError::MalformedHeader(format!("{v} exceeds u32")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), GridError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            if what == "magic" || !what.starts_with("frame") {
                GridError::MalformedHeader(format!("file ends inside {what}"))
            } else {
                GridError::Truncated(format!("file ends inside {what}"))
            }
        }
        _ => GridError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, GridError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64, GridError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_sequence(seq: &GridSequence, path: impl AsRef<Path>) -> Result<(), GridError> {
    let mut w = BufWriter::new(File::create(path)?);
    seq.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<GridSequence, GridError> {
    let mut r = BufReader::new(File::open(path)?);
    GridSequence::read_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DogmaCell, DogmaFrame, frames_to_sequence, sequence_to_frames};

    fn tiny_frame() -> DogmaFrame {
        let g = GridGeometry::new(2, 2, 0.15, -0.15, -0.15).unwrap();
        let cells = (0..4)
            .map(|i| DogmaCell {
                m_occ: 0.1 * i as f32,
                m_free: 0.05,
                v_east: -1.5,
                v_north: 0.25 * i as f32,
                var_v_east: 1.0,
                var_v_north: 2.0,
                cov_v: 0.5,
            })
            .collect();
        DogmaFrame::new(g, cells, 0.1, Pose::new(0.0, 0.0, 0.3)).unwrap()
    }

    #[test]
    fn single_frame_round_trip_is_bit_exact() {
        let frame = tiny_frame();
        let seq = frames_to_sequence(std::slice::from_ref(&frame)).unwrap();
        let mut bytes = Vec::new();
        seq.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), seq.encoded_len());
        let back = GridSequence::read_from(&mut bytes.as_slice()).unwrap();
        let frames = sequence_to_frames(&back).unwrap();
        assert_eq!(frames, vec![frame]);
    }

    #[test]
    fn wrong_magic_is_malformed_header() {
        let seq = frames_to_sequence(&[tiny_frame()]).unwrap();
        let mut bytes = Vec::new();
        seq.write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        let err = GridSequence::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, GridError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let seq = frames_to_sequence(&[tiny_frame()]).unwrap();
        let mut bytes = Vec::new();
        seq.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = GridSequence::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, GridError::Truncated(_)), "{err}");
    }

    #[test]
    fn short_header_is_malformed() {
        let err = GridSequence::read_from(&mut &b"DGM1\x01\x00"[..]).unwrap_err();
        assert!(matches!(err, GridError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn mismatched_frame_geometry_is_rejected() {
        let a = tiny_frame();
        let g = GridGeometry::new(1, 4, 0.15, 0.0, 0.0).unwrap();
        let b = DogmaFrame::new(g, a.cells().to_vec(), 0.2, Pose::default()).unwrap();
        assert!(matches!(
            frames_to_sequence(&[a, b]),
            Err(GridError::GeometryMismatch(_))
        ));
    }

    #[test]
    fn data_length_must_match_channels() {
        let g = GridGeometry::new(2, 2, 1.0, 0.0, 0.0).unwrap();
        let raw = RawFrame {
            timestamp: 0.0,
            ego_pose: Pose::default(),
            data: vec![0.0; 7],
        };
        assert!(GridSequence::new(g, 2, vec![raw]).is_err());
    }
}
