//! Two-site driven-dissipative Bose-Hubbard dimer: quantum trajectories,
//! mean-field analysis and statistics of the resulting records.

pub use num_complex::Complex64 as C64;

pub mod hilbert;
pub mod semiclassical;
pub mod observables;
pub mod stats;
pub mod trajectory;
