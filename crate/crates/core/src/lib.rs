//! Quality control for in-situ soil-moisture sensor time series.
//!
//! Two flaggers share one data model:
//!
//! * [`rules`]: geophysical threshold checks plus spectral spike, break and
//!   constant-value detection on Savitzky–Golay smoothed derivatives.
//! * [`model`]: a bidirectional LSTM that labels every reading of a one-day
//!   window with an anomaly probability, trained with [`train`] on top of the
//!   small reverse-mode engine in [`nn`].
//!
//! [`synth`] produces labelled corpora with injected spikes, breaks, constant
//! runs and out-of-range values, and [`eval`] scores either flagger against
//! reference labels.

pub mod eval;
pub mod flags;
pub mod model;
pub mod nn;
pub mod rules;
pub mod series;
pub mod synth;
pub mod train;

mod rng;

pub use flags::{FlagSet, QcFlag};
pub use series::{Reading, SensorSeries, SeriesError};
