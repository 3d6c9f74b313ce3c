pub mod data;
pub mod detection;
pub mod dfa;
pub mod dyhead;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
