//! Heterogeneous change detection through two-way image regression.
//!
//! Two co-registered images of the same scene, taken by different sensors,
//! cannot be compared pixel by pixel. Instead, a regression is learned in
//! both directions on pixel pairs drawn from unchanged areas: one model maps
//! image X into the domain of sensor Y, the other maps Y into the domain of
//! sensor X. The per-pixel prediction errors form two distance images which
//! are clipped, normalised, averaged and filtered into a single change score
//! map; thresholding the score map yields the binary change map.
//!
//! Four interchangeable regression back-ends are provided: Gaussian process
//! regression ([`gp`]), multi-output support vector regression ([`svr`]),
//! random forest regression ([`rf`]) and the homogeneous pixel
//! transformation, a K-nearest-neighbour kernel regression ([`hpt`]).
//! [`pipeline`] wires them into the end-to-end framework, [`eval`] holds the
//! ROC/AUC and benchmark harness, and [`synth`] generates deterministic
//! synthetic sensor pairs with known change masks for desk-scale validation.

pub mod cli;
pub mod error;
pub mod eval;
pub mod gp;
pub mod hpt;
pub mod pipeline;
pub mod raster;
pub mod regress;
pub mod rf;
pub mod svr;
pub mod synth;
pub(crate) mod util;

pub use error::{Error, Result};
pub use raster::{Mask, Raster, TrainingSet};
pub use regress::{MethodSpec, Model, RegressorSpec};
