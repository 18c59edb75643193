//! Dense reverse-mode differentiation, the provenance head MLP, Adam and
//! positional encoding.

pub mod adam;
pub mod checkpoint;
pub mod encoding;
pub mod mlp;
pub mod tape;

pub use adam::AdamState;
pub use encoding::{encode_batch, encoded_dim, positional_encode};
pub use mlp::{Activation, MlpParams, MlpVars, HEAD_DIM, PARAM_NAMES};
pub use tape::{decode_row, CompositeLayout, Gradients, SparseRows, Tape, Var};
