//! Narrow-band parallel transport convolution (NPTC) on raw point clouds.
//!
//! The pipeline turns an unstructured cloud into convolution operators:
//!
//! 1. [`geometry_io`]: load and normalize the cloud into the unit cube, exact k-NN queries.
//! 2. [`narrowband`]: voxelize a thin shell of width `epsilon` around the cloud.
//! 3. [`eikonal`]: fast marching of `|grad rho| = 1` from a seed voxel inside the shell,
//!    then trilinear interpolation of `rho` back onto the points.
//! 4. [`frames`]: local PCA normals, least-squares `grad rho`, and the per-point
//!    frame `(u1, u2, n)` with `u1` the tangent projection of `grad rho`.
//! 5. [`operator`]: a `K x K` grid of taps laid out along `(u1, u2)` on each tangent
//!    plane, gathered by nearest-neighbour lookup into a precomputed index table.
//! 6. [`hierarchy`] and [`network`]: farthest point sampling levels and a small
//!    trainable encoder/decoder built from those operators.
//!
//! [`pipeline`] wires stages 1 to 5 together per cloud and [`synthetic`] produces
//! labelled toy datasets.

pub mod eikonal;
pub mod error;
pub mod frames;
pub mod geometry_io;
pub mod hierarchy;
pub mod narrowband;
pub mod network;
pub mod operator;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;

pub use error::{NptcError, Result};
pub use geometry_io::{PointCloud, Vec3};
pub use tensor::{Real, Tensor2};
