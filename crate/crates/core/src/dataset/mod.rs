//! Patient records: parsing, writing, stratified splitting, windowing, and
//! synthetic cohort generation.

pub mod parse;
pub mod split;
pub mod synth;
pub mod types;
pub mod window;
pub mod write;

pub use parse::{load_dataset, load_labels, parse_header, parse_labels, parse_patient, HeaderMeta};
pub use split::stratified_split;
pub use synth::{synth_dataset, synth_to_dir, SynthConfig};
pub use types::*;
pub use window::{states_per_sample, window, Window, WINDOW_SECS};
pub use write::write_patient;
