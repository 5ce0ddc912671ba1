//! Joint denoising and sparse model discovery for ODE systems.
//!
//! The crate recovers sparse governing equations and a per-sample noise
//! estimate from noisy, uniformly sampled time series. Three identifiers are
//! provided:
//!
//! * [`sparse::wsindy_identify`] — weak-form SINDy (convolution against
//!   compactly supported test functions, then thresholded least squares),
//! * [`joint::run_msindy`] — joint optimization of a derivative residual and
//!   a multi-step simulation error over coefficients and noise,
//! * [`joint::run_wmsindy`] — the same joint scheme with the derivative
//!   residual replaced by the weak-form residual.
//!
//! Supporting modules: [`dynamics`] (benchmark systems and integrators),
//! [`library`] (monomial candidate libraries), [`testfn`] (data-driven test
//! functions), [`weak`] (weak-system assembly), [`noise`] (seeded noise
//! synthesis), [`metrics`] (error suite and success rates).

pub mod dynamics;
pub mod error;
pub mod joint;
pub mod library;
pub mod metrics;
pub mod noise;
pub mod sparse;
pub mod testfn;
pub mod weak;

pub use error::{Error, Result};
