//! Dense f64 tensors with a reverse-mode gradient tape.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Activation, GruCell, Linear, Session, TwoLayer};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Axis, Gradients, ParamGrad, Tape, Var};
pub use tensor::Tensor;
