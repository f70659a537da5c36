pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod postprocess;
pub mod targets;
pub mod trainer;
pub mod types;

pub use types::{tiou, ActionInstance, Detection, RegressionRange};
