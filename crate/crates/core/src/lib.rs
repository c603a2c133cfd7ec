//! Darboux charts for weak symplectic forms, computed on finite-dimensional
//! truncations and discretized loop spaces.
//!
//! * [`symplin`]: linear algebra of 2-forms (flat map, ω-norms, linear Darboux bases).
//! * [`form`]: form fields on regions, polynomial forms and built-in examples.
//! * [`formats`]: JSON descriptions of form fields.
//! * [`moser`]: the Moser path method and Darboux chart verification.
//! * [`dirlim`]: tail-zero vectors, coherent towers and the shrinking-chart example.
//! * [`odelimit`]: bound conditions and solutions for ODEs on direct limits.
//! * [`loopspace`]: Sobolev norms, dual norms and the loop symplectic form.

pub mod dirlim;
pub mod error;
pub mod form;
pub mod formats;
pub mod loopspace;
pub mod moser;
pub mod odelimit;
pub mod quadrature;
pub mod rk4;
pub mod symplin;

pub use error::{Error, Result};
pub use form::{FormField, Region};
pub use symplin::{AntisymMatrix, Covector, NormSpec};
