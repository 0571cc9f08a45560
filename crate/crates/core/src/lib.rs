//! Rotational dynamics of charged rigid particles in linear Paul traps, and
//! NV-centre spectroscopy of a rotating diamond.
//!
//! The dynamics live in [`model`], [`rotor1d`], [`floquet`], [`rotor3d`] and
//! [`signal`]; the spin side in [`nvspin`] and [`reconstruct`].

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod floquet;
pub mod linalg;
pub mod model;
pub mod nvspin;
pub mod ode;
pub mod reconstruct;
pub mod rotor1d;
pub mod rotor3d;
pub mod signal;
pub mod units;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
mod ch_model {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pendulum.md")]
mod ch_pendulum {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/floquet.md")]
mod ch_floquet {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/rigid-body.md")]
mod ch_rigid_body {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/spectra.md")]
mod ch_spectra {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/odmr.md")]
mod ch_odmr {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reconstruction.md")]
mod ch_reconstruction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod ch_cli {}
