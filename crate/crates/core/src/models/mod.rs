//! Concrete target models.

pub mod bridge;
pub mod gaussian;
pub mod logistic;
pub mod quartic;

pub use bridge::{BridgeModel, FaberSchauderBasis};
pub use gaussian::GaussianModel;
pub use logistic::LogisticModel;
pub use quartic::Quartic1d;
