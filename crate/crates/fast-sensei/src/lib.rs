//! Sensor-independent multispectral encoding and compact cloud segmentation.
//!
//! The crate has three layers:
//!
//! * a minimal tensor/autograd core ([`tensor`]) sized for the models here,
//! * the models: per-band spectral descriptors ([`descriptor`]), the
//!   band-fusion encoder ([`encoder`]), and a small convolutional
//!   segmentation network ([`segnet`]),
//! * the surrounding tooling: training ([`train`]), evaluation
//!   ([`metrics`]), file formats and radiometry ([`io`]), synthetic data
//!   ([`synthetic`]), and a latency harness ([`bench`]).
//!
//! Everything is deterministic given a seed and runs single-threaded.

pub mod bench;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod segnet;
pub mod synthetic;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
