pub mod array;
pub mod autodiff;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod interpret;
pub mod model;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod signal;
pub mod synth;
pub mod training;

pub use array::Array;
pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
