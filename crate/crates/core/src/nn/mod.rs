//! Small deterministic `f64` differentiable-computation layer sized for the
//! detector and autoencoder in this crate.

mod array;
mod gradcheck;
mod layers;
mod loss;
mod params;
mod rng;
mod tape;

pub use array::{linear_forward, NdArray};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, FD_STEP};
pub use layers::{gru_cell_forward, BiGruLayer, BiGruStack, GruCell, Linear, StackOutput};
pub use loss::{cross_entropy_loss, mse_loss, softmax, softmax_rows};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use rng::{RngSnapshot, RngState};
pub use tape::{Graph, Var};
