//! Robust two-step point-anomaly detection for large panels of daily series.
//!
//! Each series is first fitted with a trimmed trend-plus-cycle regression; the
//! residual panel is then scored either by robust Mahalanobis distances or by
//! robust autoregressive forecasts, and flagged cells are classified and
//! clustered.

pub mod bench;
pub mod cluster;
pub mod detect;
pub mod dgp;
pub mod error;
pub mod forecast;
pub mod linalg;
pub mod panel;
pub mod pipeline;
pub mod scatter;
pub mod seed;
pub mod stats;
pub mod trend;
pub mod typology;

pub use error::{Error, Result};
pub use panel::{Day, Layout, Panel};
