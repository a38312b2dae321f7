//! Update compression for small neural networks.
//!
//! A deployed model is refined on the server over a reduced learnable
//! parameter set, the new values travel in a compact update package, and the
//! edge device rebuilds the updated model from the package plus knowledge
//! frozen in the weights it already has. The crate provides the matrix
//! substrate, a minimal training engine, the re-parameterisations, two
//! federated-learning baselines under the same protocol, and the bit-exact
//! package format linking server and edge.

pub mod baselines;
pub mod data;
pub mod linalg;
pub mod netcore;
pub mod protocol;
pub mod reparam;
pub mod rng;
pub mod verify;

pub use linalg::{svd, truncate, Matrix, SvdFactors};
pub use netcore::{Batch, Layer, ModelSpec, ParamClass, ParamEntry, ParamStore};
pub use protocol::{compact_refine, reconstitute, RefineConfig, UpdatePackage};
pub use reparam::{ReparamMethod, ReparamState};
