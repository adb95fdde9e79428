//! Out-of-core dense linear algebra on square-tiled block matrices.
//!
//! A matrix lives in a directory holding a plain-text `manifest.txt` and
//! its block payloads, each a row-major run of little-endian `f64`. The
//! routines here keep a bounded number of blocks resident per worker
//! thread, which [`peak_block_elements`] reports.

mod block;
mod invert;
mod ops;
mod store;

pub use block::{gemm_acc, live_block_elements, peak_block_elements, reset_peak_block_elements, spd_inverse, Block};
pub use invert::invert_recursive;
pub use ops::{block_add, block_gemm, block_matvec, block_sub, identity_residual};
pub use store::{available_bytes, BlockMatrixStore, Layout};
