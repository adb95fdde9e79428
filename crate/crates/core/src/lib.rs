//! Rank-order retina codec.
//!
//! Grayscale images are analysed by a dyadic bank of difference-of-Gaussians
//! cells, the responses are sorted by decreasing magnitude into a rank order
//! code, and the code is decoded either by the plain weighted sum of the
//! analysis filters or exactly, through the canonical dual frame
//! `(Φ*Φ)⁻¹Φ*`. The inverse frame operator is dense (`N⁴` entries for an
//! `N×N` image), so it is built and inverted out of core, one block file at a
//! time.
//!
//! Module map:
//!
//! - [`pyramid`]: kernels and sampling geometry of the dyadic grid
//! - [`analysis`]: the sparse analysis operator `Φ`, forward and adjoint
//! - [`roc`]: rank order code generation, truncation, stream format, and
//!   straightforward decoding
//! - [`frame_bounds`]: analytic frame bounds and their empirical check
//! - [`ooc`]: disk-backed block matrices and recursive Schur inversion
//! - [`dual`]: inverse frame operator cache and exact decoding
//! - [`image_io`]: PGM intake and PSNR

pub mod analysis;
pub mod dual;
mod error;
pub mod frame_bounds;
pub mod image_io;
pub mod ooc;
pub mod pyramid;
pub mod roc;

pub use analysis::{AnalysisOperator, Boundary, Image, OperatorOptions};
pub use dual::{DualOperatorCache, DualBuildOptions};
pub use error::{Error, Result};
pub use frame_bounds::FrameReport;
pub use ooc::BlockMatrixStore;
pub use pyramid::{CoarseLayer, DoGParams, FilterKernel, GridSpec};
pub use roc::{CodeHeader, RankOrderCode};
