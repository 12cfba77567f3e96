//! Numerical laboratory for simple Finsler metrics on the planar disc.
//!
//! The crate computes geodesics, boundary distance functions and
//! Holmes-Thompson volume of (possibly non-reversible) Finsler metrics on the
//! unit disc, builds enveloping functions from distances to an enlarged
//! boundary circle, and runs the volume-monotonicity and ray-transform
//! experiments on top of them.
//!
//! Module map:
//! - [`metric`]: metric families, norms, dual norms, Legendre transforms.
//! - [`geodesic`]: Hamiltonian geodesic flow, chords, shooting, Jacobi fields.
//! - [`envelope`]: boundary distance tables and enveloping functions.
//! - [`volume`]: Holmes-Thompson volume by four independent routes.
//! - [`xray`]: geodesic ray transform and the conformal perturbation experiments.
//! - [`monotone`]: the boundary-matching map between unit bundles, `F''`, and
//!   randomized monotonicity trials.
//! - [`io`]: CSV and JSON file formats shared with the `finsler` binary.

pub mod envelope;
pub mod error;
pub mod field;
pub mod geodesic;
pub mod geom;
pub mod grid;
pub mod io;
pub mod metric;
pub mod monotone;
pub mod par;
pub mod volume;
pub mod xray;

pub use error::{FinslerError, Result};
pub use field::ScalarField;
pub use geom::{Covector, Point, Vector};
pub use metric::{Metric, MetricFamily};
