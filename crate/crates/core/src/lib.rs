//! Caption-conditioned HDR-to-infrared translation: image I/O, tone
//! mapping, the generator and its losses, training, metrics and the
//! ablation harness.

pub mod ablation;
pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image_io;
pub mod inputs;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tonemap;
pub mod trainer;

pub use caption::{CaptionBackendConfig, CaptionExtractor, CaptionPyramid, CaptionSource};
pub use config::{RunConfig, Variant, VARIANTS};
pub use datasets::{DatasetSpec, PairedSample, Split};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use image_io::{HdrImage, IrImage, SdrImage};
pub use losses::{Discriminator, GanVariant, LossWeights, PerceptualExtractorConfig, PerceptualLoss};
pub use metrics::{MetricMeans, MetricReport, MetricRow};
pub use model::Model;
pub use tonemap::{tonemap, TonemapParams};
pub use trainer::{StepLog, TrainConfig, Trainer};
