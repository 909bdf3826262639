//! Tooth instance segmentation building blocks: mesh handling, a two-stream
//! geometric encoder, occlusal 2D-3D fusion, center-guided mask decoding,
//! order-aware Hungarian matching, losses, metrics and a synthetic arch
//! generator.

pub mod cmr;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fhm;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod mesh;
pub mod model;
mod par;
pub mod prg;
pub mod projection;
pub mod synthgen;

pub use error::{Error, Result};
pub use linalg::{Linear, Matrix};
pub use mesh::{FaceGeometry, Jaw, LabeledMesh, SceneFrame, Vec3};
