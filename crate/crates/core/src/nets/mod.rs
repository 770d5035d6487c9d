//! Parameter containers and the two networks.

mod appearance;
mod model;
mod params;
mod shape;

pub use appearance::{AppearanceConfig, AppearanceNetwork, RadianceVars, APPEARANCE_META};
pub use model::{Model, MODEL_META};
pub use params::{load_srft, read_srft, save_srft, write_srft, Gradients, LatentCode, ParamSet, ParamTensor, ParamVars};
pub use shape::{ShapeConfig, ShapeNetwork, SHAPE_META};
