//! Dense `f64` arrays with tape-based reverse-mode differentiation, an Adam
//! optimizer and the shared checkpoint format.

pub mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Sparsemax of a plain vector.
pub fn sparsemax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(logits.to_vec())?);
    let y = tape.sparsemax(x)?;
    Ok(tape.value(y).to_vec())
}

/// Temperature softmax of a plain vector.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(logits.to_vec())?);
    let y = tape.softmax(x, temperature)?;
    Ok(tape.value(y).to_vec())
}
