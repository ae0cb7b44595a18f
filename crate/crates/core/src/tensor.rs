//! Dense W×H×C tensors laid out like the grid container: cell-major,
//! cells row-major with east as the fast axis.

use crate::grid::GridGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor3<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![T::default(); width * height * channels],
        }
    }

    pub fn for_grid(geometry: &GridGeometry, channels: usize) -> Self {
        Self::zeros(geometry.width_cells, geometry.height_cells, channels)
    }
}

impl<T: Copy> Tensor3<T> {
    /// Wraps existing data; `None` if the length does not match the shape.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn offset(&self, cell: usize, channel: usize) -> usize {
        debug_assert!(channel < self.channels);
        cell * self.channels + channel
    }

    #[inline]
    pub fn get(&self, cell: usize, channel: usize) -> T {
        self.data[self.offset(cell, channel)]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, channel: usize, value: T) {
        let i = self.offset(cell, channel);
        self.data[i] = value;
    }

    /// All channels of one cell.
    pub fn cell(&self, cell: usize) -> &[T] {
        &self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [T] {
        &mut self.data[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U: Copy>(&self, other: &Tensor3<U>) -> bool {
        self.shape() == other.shape()
    }
}

impl Tensor3<f32> {
    pub fn to_f64(&self) -> Tensor3<f64> {
        self.map(f64::from)
    }
}

impl Tensor3<f64> {
    pub fn to_f32(&self) -> Tensor3<f32> {
        self.map(|v| v as f32)
    }
}

/// Sum with a fixed pairwise reduction tree; the result depends only on
/// the input order, never on how the caller chunks the work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
