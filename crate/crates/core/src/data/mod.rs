//! Dataset ingestion and artifact persistence.

mod dataset;
pub mod idx;
pub mod pgm;
pub mod report;
pub mod synthetic;
pub mod tabular;

pub use dataset::{LabeledDataset, Normalization};
pub use idx::{decode_idx, load_idx};
pub use report::{
    load_document, load_report, save_document, save_report, sha256_hex, ExplanationReport, GraphRef, NodeEffect};
pub use tabular::{fit_csv, load_csv, CsvSchema, TabularEncoder};
