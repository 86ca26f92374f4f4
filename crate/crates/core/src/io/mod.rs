//! Persistence: tensor containers, datasets, checkpoints, configuration,
//! measured frames and image export.

mod config;
mod container;
mod frames;
mod image;
mod store;

pub use config::{parse_betas_log, RunConfig, RESOLVED_CONFIG};
pub use container::{
    read_archive, read_container, write_archive, write_container, Archive, Array, Payload,
    DTYPE_F32, DTYPE_F64, MAGIC, VERSION,
};
pub use frames::{
    ingest_measured_frames, read_measured_frames, write_measured_frames, BaselineRow,
    MeasuredFrames,
};
pub use image::{export_image, quantize, read_exported, sidecar_path, ExportInfo};
pub use store::{
    dataset_from_archive, dataset_to_archive, forward_net_from_archive, forward_net_to_archive,
    frames_from_array, frames_to_array, images_from_array, images_to_array, load_archive,
    load_dataset, recon_net_from_archive, recon_net_to_archive, save_archive, save_dataset,
    ReconCheckpoint,
};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("bad magic {0:?}, expected \"EITD\"")]
    Magic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("container truncated")]
    Truncated,
    #[error("dimensions overflow the address space")]
    DimOverflow,
    #[error("shape: {0}")]
    Shape(String),
    #[error("missing archive entry `{0}`")]
    MissingEntry(String),
    #[error("format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("row {row}: expected {expected} columns, got {got}")]
    ColumnCount {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row}, column {column}: non-finite value")]
    NonFinite { row: usize, column: usize },
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
