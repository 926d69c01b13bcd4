//! Two-stage vehicle class and orientation detection.
//!
//! Frames are first searched by two group detectors (cars and trucks,
//! motorcycles and cycles). Every detected box becomes a row in a meta-table
//! together with its crop, the crops are classified into one of 12
//! type/orientation classes by an ensemble, and the classified rows are
//! emitted as final detections. [`eval`] scores detections with a
//! class-weighted mAP over two dataset splits.
//!
//! All models sit behind [`backends`]; deterministic mocks make the whole
//! pipeline runnable without any trained weights.

pub mod annotation;
pub mod backends;
pub mod classmodel;
pub mod eval;
pub mod fixture;
pub mod geometry;
mod imaging;
pub mod metatable;
pub mod pipeline;

pub use annotation::{ClassMap, DatasetManifest, Frame, LabelRow};
pub use backends::{BackendDescriptor, BackendError, BackendKind, Transport};
pub use classmodel::{
    ClassProbs, ObjectClass, Orientation, VehicleGroup, VehicleType, NUM_CLASSES,
};
pub use eval::{EvalConfig, EvalReport, GroundTruth};
pub use geometry::{BoundingBox, Detection, PixelRect};
pub use metatable::{MetaEntry, MetaTable, SourceTag};
pub use pipeline::{PipelineConfig, RunReport};
