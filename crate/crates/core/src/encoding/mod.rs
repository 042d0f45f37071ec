//! Differentiable input encodings: a multi-resolution hash grid for
//! positions and real spherical harmonics for view directions.

mod hash;
mod sh;

pub use hash::{HashGrid, HashGridConfig, LevelCorner};
pub use sh::{sh_encode, sh_encode_into, sh_len, MAX_SH_DEGREE};
