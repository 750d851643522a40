//! Laboratory for bounded-size-rule (BSR) random graph processes.
//!
//! A bounded-size rule observes, for each arriving candidate edge pair, only the
//! component-size classes of the four endpoint vertices (sizes `1..=K` kept exactly,
//! everything larger lumped into a single class `w`), and accepts either the first
//! or the second candidate edge based on that information alone.  The Bohman-Frieze
//! process is the classic example: take the first edge exactly when both of its
//! endpoints are isolated.
//!
//! The crate provides, end to end:
//!
//! * [`rules`] — rule tables over the class alphabet and the exact per-event drift
//!   coefficients of the class-fraction dynamics;
//! * [`hydro`] — the hydrodynamic-limit ODE solver, the derived merge/attachment
//!   rate functions `a_i`, `c_i`, `b`, their `delta`-inflated variants, and exact
//!   rational Taylor data for their vanishing orders at time zero;
//! * [`spectral`] — cluster moment fields, the time-domain reduction of the
//!   associated inhomogeneous random graph kernel, operator norms by Nystrom
//!   quadrature, the critical time `t_c`, and perturbation scans in `delta`;
//! * [`graphsim`] — exact finite-`n` simulation of the multigraph process with
//!   incremental component censuses, hydrodynamic deviation, and event-rate audits;
//! * [`rgiva`] — the two-step random-graph approximation: a Poisson cloud of
//!   growing clusters linked pairwise, plus the conditioned root component;
//! * [`branching`] — the dominating multitype branching process with explicit
//!   offspring intensity, total progeny, and tail-rate fits;
//! * [`harness`] — reproducible experiment drivers backing the `bsrlab` CLI.

#![forbid(unsafe_code)]

pub mod branching;
pub mod error;
pub mod graphsim;
pub mod gridfn;
pub mod harness;
pub mod hydro;
pub mod rgiva;
pub mod rules;
pub mod spectral;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
