//! Array-detector balanced homodyne tomography of correlated two-mode fields.
//!
//! * [`fock`]: truncated two-mode Fock space, the reference for every identity.
//! * [`mode_grid`]: pixel geometry and complex mode functions.
//! * [`array_bhd`]: pixel count operators, difference counts and quadrature
//!   reconstruction for the two-detector arrangement.
//! * [`single_detector`]: nine-pixel reconstruction from one output port.
//! * [`mc_lab`]: analytic joint quadrature densities, seeded rejection
//!   sampling, histograms and goodness-of-fit statistics.

pub mod array_bhd;
pub mod fock;
pub mod mc_lab;
pub mod mode_grid;
pub mod single_detector;

pub use num_complex::Complex64 as C64;
