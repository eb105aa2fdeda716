//! Safe-flight-envelope estimation and protection toolkit.
//!
//! The pipeline, in dependency order:
//!
//! 1. [`dynamics`] — rigid-body aircraft surrogate with affine control
//!    effectiveness, plus a 2-state pendulum used for oracle validation.
//! 2. [`trim`] — steady straight-and-level trim solver and the trim-set
//!    tables that seed envelope estimation.
//! 3. [`mc`] — Monte Carlo reachability sampling with extreme control
//!    effectiveness inputs, forward and backward in time.
//! 4. [`density`] — product-kernel density estimation with Silverman
//!    bandwidths, fused into a fuzzy envelope membership field.
//! 5. [`envelope`] — gridded envelope database: log-metric field, hard
//!    constraint field, interpolation, gradients, binary serialization.
//! 6. [`fep`] — flight-envelope-protection laws (state-constraint-based
//!    clamping and probabilistic gradient-descent command modification).
//! 7. [`controller`] — two-loop NDI/INDI attitude controller with PID
//!    virtual controls, pseudo-control hedging and an auto-throttle.
//! 8. [`sim`] — closed-loop harness, maneuver generators, CSV logging.
//! 9. [`oracle`] — brute-force bang-bang reachability oracle used to
//!    validate the Monte Carlo sampler on low-dimensional systems.

pub mod atmosphere;
pub mod controller;
pub mod density;
pub mod dynamics;
pub mod envelope;
pub mod fep;
pub mod mc;
pub mod oracle;
pub mod polynomial;
pub mod sim;
pub mod spline;
pub mod trim;

pub use dynamics::{AircraftModel, ControlVector, EnvelopeCoords, StateVector};
pub use envelope::{EnvelopeDatabase, GridSpec};
