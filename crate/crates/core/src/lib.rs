pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod scalar;
pub mod semg;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod ultrasound;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use trace::ThicknessTrace;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
