//! Data layer and command-line entry points.
//!
//! Dataset layout on disk:
//!
//! ```text
//! manifest.json
//! frames/<tid>/<frame>.bin   f32le (x, y, z, intensity) per point, sensor z-up
//! labels/<tid>.json          {"frames": [{"frame", "x", "y", "z", "theta", "w", "h", "l"}]}
//! ```
//!
//! Point files use the sensor convention (x forward, y left, z up) and are
//! remapped to the internal ground-plane frame on load. Labels are stored
//! directly in the internal frame.

pub mod cli;
mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::geom::{Box3d, PointCloud};

pub use io::{
    content_hash, decode_frame, encode_frame, load_sequence, read_frame, write_dataset, LabelFile, LabelFrame,
    Manifest, ManifestEntry, SENSOR_TO_INTERNAL,
};
pub use synth::{generate_synthetic, synthesize, ClassSizes, SceneConfig, SizeRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Cyclist,
    Pedestrian,
}

/// One object's frames with a ground-truth box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: String,
    pub class: ObjectClass,
    pub frames: Vec<PointCloud>,
    pub boxes: Vec<Box3d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub manifest: Manifest,
    pub tracklets: Vec<Tracklet>,
}
