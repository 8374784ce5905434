//! Two-stream vision/grid transformer for document layout analysis.
//!
//! The image stream encodes page pixels; the grid stream encodes a 2-D map
//! of sub-word token embeddings laid out at the tokens' pixel positions.
//! Both streams feed a shared feature pyramid used for detection, and the
//! grid stream can be pre-trained alone with masked-token and
//! segment-alignment objectives.

pub mod backbone;
pub mod checkpoint;
pub mod detect;
pub mod doc;
pub mod error;
pub mod float;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod optim;
pub mod par;
pub mod params;
pub mod pretrain;
pub mod roi;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use geom::{BBox, PixelBox};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
