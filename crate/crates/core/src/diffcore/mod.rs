//! Dense-array substrate, parameter storage, seeded randomness and the
//! adjoint checker that every differentiable operator is validated against.

mod check;
mod grid;
mod mlp;
mod params;
mod rng;

pub use check::{nudge_off_integers, vjp_check, DiffOp, FnOp, VjpReport};
pub use grid::DenseGrid;
pub use mlp::{Mlp, MlpCache};
pub use params::ParamStore;
pub use rng::SeededRng;
