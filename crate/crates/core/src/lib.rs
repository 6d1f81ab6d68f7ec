//! Identification of polynomial nonlinear state-space (PNLSS) models of a
//! Bouc-Wen hysteretic oscillator, and reduction of their parameter count by
//! decoupling the multivariate polynomial into parallel univariate branches.

pub mod boucwen;
pub mod decouple;
pub mod error;
pub mod io;
pub mod linear;
pub mod linid;
pub mod lm;
pub mod pnlss;
pub mod sim;
pub mod signals;

pub use error::{Error, Result};
pub use rustfft::num_complex::Complex64;
