pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod ls_graph;
pub mod da_graph;
pub mod decoders;
pub mod network;
pub mod scenario;
pub mod training;
pub mod evaluation;
pub mod cli;

pub use error::{DspError, Result};
