//! Synthetic segmentation task used to exercise the upsamplers end to end.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod train;

pub use data::{gen_dataset, gen_sample, DataSpec, LabelMap, SynthSample, Transform};
pub use loss::seg_loss_forward;
pub use metrics::{dice_score, hausdorff, mean_dsc, mean_hd};
pub use model::{build_toynet, ToyNet, ToyNetConfig, ToyOutput};
pub use optim::Adam;
pub use schedule::lr_at;
pub use train::{evaluate, metrics_csv, resume, train, DataConfig, MetricRow, Setup, TrainConfig, TrainRun, METRICS_HEADER};
