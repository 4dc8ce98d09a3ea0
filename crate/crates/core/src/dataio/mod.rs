//! On-disk dataset format and RoI preparation.
//!
//! Layout: `index.jsonl` (one record per instance), `scenes/<id>.ppm`, and
//! `masks/<id>_<instance>_{v,a,o}.pgm`.

mod dataset;
pub mod pnm;
mod roi;

pub use dataset::{read_dataset, write_dataset, Dataset, IndexRecord, INDEX_FILE};
pub use roi::{crop_roi, enlarge_bbox, extract_roi, paste_back, roi_samples, RoIInput, RoISample, RoITargets};
