//! Fast evaluation of 2D Helmholtz layer potentials by quadrature by expansion
//! (QBX) embedded in an adaptive fast multipole method.
//!
//! The pipeline is: discretize a closed curve into Gauss-Legendre panels
//! ([`geometry`]), refine until the geometric admissibility conditions hold
//! ([`refinement`]), classify targets ([`association`]), then run the
//! QBX-aware FMM ([`qbxfmm`]) to obtain potentials at far targets and local
//! expansion coefficients at expansion centers. [`layerpot`] wraps this into
//! single-, double- and combined-layer evaluation, and [`solver`] uses it to
//! solve exterior Dirichlet scattering problems with GMRES.

pub mod association;
pub mod cli;
pub mod expansions;
pub mod geometry;
pub mod layerpot;
pub mod qbxfmm;
pub mod quadtree;
pub mod refinement;
pub mod solver;
pub mod specfun;

pub use num_complex::Complex64 as C64;

/// A point in the plane.
pub type Point = [f64; 2];

/// Errors reported by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("resolution not reached: {0}")]
    Resolution(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("refinement did not terminate after {iterations} rounds ({remaining} panels still flagged)")]
    Refinement { iterations: usize, remaining: usize },
    #[error("target association failed for {} targets", .0.len())]
    Association(Vec<usize>),
    #[error("unsupported parameter: {0}")]
    Unsupported(String),
    #[error("GMRES did not converge in {iterations} iterations (relative residual {:.3e})", .residuals.last().copied().unwrap_or(f64::NAN))]
    NoConvergence { iterations: usize, residuals: Vec<f64> },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub(crate) fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}
