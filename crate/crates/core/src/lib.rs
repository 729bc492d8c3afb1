//! Reduced-order abstractions of disturbed control systems, certified by
//! robust simulation functions with disturbance refinement, plus symbolic
//! controller synthesis on the abstraction and assume-guarantee composition
//! of per-area results. Ships the New England 39-bus matrices as bundled
//! data.

pub mod contracts;
pub mod error;
pub mod export;
pub mod models;
pub mod nets_data;
pub mod numerics;
pub mod reduction;
pub mod rsf;
pub mod specs;
pub mod symbolic;

pub use error::{Error, Result};
pub use numerics::{Mat, Vector};
