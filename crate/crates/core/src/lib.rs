//! Field pipeline: yield-monitor cleaning, image georeferencing and
//! association, detection calibration, evaluation, saliency maps, and a
//! seeded synthetic vineyard used as an end-to-end oracle.

pub mod association;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geo;
pub mod image_ingest;
pub mod pipeline;
pub mod saliency;
pub mod synth;
pub mod yield_ingest;

pub use error::{CoreError, Result};

pub type OriginFit32 = detection::OriginFit<f32>;
pub type OriginFit64 = detection::OriginFit<f64>;
pub type MetricsReport32 = evaluation::MetricsReport<f32>;
pub type MetricsReport64 = evaluation::MetricsReport<f64>;
