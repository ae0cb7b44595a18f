//! Dynamic occupancy grid map (DOGMa) toolkit.
//!
//! The crate covers the non-neural parts of a grid-based environment model:
//!
//! * [`grid`]: geometry, the seven-channel cell model, Dempster-Shafer mass
//!   algebra and the grid-sequence file container.
//! * [`sim`]: deterministic scenes of rectangles observed by a 2D lidar,
//!   an inverse sensor model and oracle ground truth.
//! * [`filter`]: particle-filter fusion of measurement grids into DOGMa frames.
//! * [`autolabel`]: offline static/dynamic labeling and box extraction
//!   from whole grid sequences.
//! * [`anchor`]: anchor-based rotated-box label tensors and their decoding.
//! * [`loss`]: the spatially balanced training loss and its gradient.
//! * [`eval`]: ROC/AUC, precision-recall over an IoU sweep and box RMSE.
//! * [`benchmark`]: scoring of the labeler against simulator truth.

pub mod anchor;
pub mod autolabel;
pub mod benchmark;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod sim;
pub mod tensor;

pub use geometry::{rotated_iou, ObjectBox};
pub use grid::{
    ds_combine, occupancy_probability, DogmaCell, DogmaFrame, GridGeometry, Masses, Pose,
};
