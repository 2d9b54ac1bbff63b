pub mod attention;
pub mod config;
pub mod container;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod proposer;
pub mod pyramid;
pub mod scalar;

pub use error::{Error, Result};
pub use geometry::{clip_box, iou, size_bin, Annotation, BBox, SizeBin, StateVocabulary};
pub use nn::{Activation, DenseNet, TrainConfig};
pub use pyramid::{FeaturePyramid, WindowRef};
pub use scalar::Real;

pub type Box64 = BBox<f64>;
pub type Annotation64 = Annotation<f64>;
pub type DenseNet64 = DenseNet<f64>;
pub type Pyramid64 = FeaturePyramid<f64>;
