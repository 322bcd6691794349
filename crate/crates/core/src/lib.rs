//! Biquadratic C¹ splines over hierarchical T-meshes.
//!
//! The crate maps the spline space over a hierarchical T-mesh onto piecewise
//! constants over its crossing-vertex-relationship (CVR) graph, builds one basis
//! function per CVR cell, and uses that basis for adaptive surface fitting.

pub mod basis;
pub mod bnet;
pub mod cvr;
pub mod error;
pub mod fitting;
pub mod mesh;
pub mod oracle;
pub mod tstructure;
pub mod univariate;

pub use error::{Error, Result};
