use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ObjectClass, SceneConfig, SequenceDataset, Tracklet};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::geom::{Box3d, BoxSpec, Point, PointCloud, PoseBev};

/// Maps sensor (x forward, y left, z up) coordinates to the internal frame.
pub const SENSOR_TO_INTERNAL: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];

const RECORD: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class: ObjectClass,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub frame_convention: String,
    pub frame_rate: f64,
    pub tracklets: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelFrame {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub frames: Vec<LabelFrame>,
}

fn frame_path(dir: &Path, id: &str, frame: usize) -> PathBuf {
    dir.join("frames").join(id).join(format!("{frame:06}.bin"))
}

fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("labels").join(format!("{id}.json"))
}

pub fn encode_frame(pc: &PointCloud) -> Vec<u8> {
    let m = SENSOR_TO_INTERNAL;
    let mut out = Vec::with_capacity(pc.len() * RECORD);
    for p in &pc.points {
        // The inverse of an axis permutation with signs is its transpose.
        for c in 0..3 {
            let v = m[0][c] * p[0] + m[1][c] * p[1] + m[2][c] * p[2];
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&0f32.to_le_bytes());
    }
    out
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let whole = bytes.len() / RECORD * RECORD;
    if whole != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            msg: format!("truncated point record ({} trailing bytes)", bytes.len() - whole),
        });
    }
    let m = SENSOR_TO_INTERNAL;
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let s: [f32; 3] = std::array::from_fn(|c| f32::from_le_bytes(rec[4 * c..4 * c + 4].try_into().expect("4 bytes")));
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * RECORD) as u64,
                msg: "non-finite coordinate".into(),
            });
        }
        let p: Point = std::array::from_fn(|r| m[r][0] * s[0] + m[r][1] * s[1] + m[r][2] * s[2]);
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn read_frame(path: &Path) -> Result<PointCloud> {
    match std::fs::read(path) {
        Ok(bytes) => decode_frame(&bytes, path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn read_existing(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// SHA-256 over every label and frame file, in manifest order.
pub fn content_hash(dir: &Path, entries: &[ManifestEntry]) -> Result<String> {
    let mut h = Sha256::new();
    for e in entries {
        for (name, path) in std::iter::once((format!("labels/{}.json", e.id), label_path(dir, &e.id))).chain(
            (0..e.frames).map(|f| (format!("frames/{}/{f:06}.bin", e.id), frame_path(dir, &e.id, f))),
        ) {
            let bytes = read_existing(&path)?;
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn labels_of(t: &Tracklet) -> LabelFile {
    LabelFile {
        frames: t
            .boxes
            .iter()
            .enumerate()
            .map(|(frame, b)| LabelFrame {
                frame,
                x: b.pose.x,
                y: b.y_center,
                z: b.pose.z,
                theta: b.pose.theta,
                w: b.spec.w,
                h: b.spec.h,
                l: b.spec.l,
            })
            .collect(),
    }
}

/// Writes tracklets in the on-disk layout and returns the manifest.
pub fn write_dataset(dir: &Path, tracklets: &[Tracklet], scene: Option<&SceneConfig>, frame_rate: f64) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(tracklets.len());
    for t in tracklets {
        if t.frames.len() != t.boxes.len() {
            return Err(Error::InvalidInput(format!("tracklet {} has {} frames but {} boxes", t.id, t.frames.len(), t.boxes.len())));
        }
        atomic_write(&label_path(dir, &t.id), serde_json::to_string_pretty(&labels_of(t))?.as_bytes())?;
        for (f, pc) in t.frames.iter().enumerate() {
            atomic_write(&frame_path(dir, &t.id, f), &encode_frame(pc))?;
        }
        entries.push(ManifestEntry {
            id: t.id.clone(),
            class: t.class,
            frames: t.frames.len(),
        });
    }
    let manifest = Manifest {
        format_version: 1,
        frame_convention: "sensor_z_up".into(),
        frame_rate,
        content_hash: content_hash(dir, &entries)?,
        tracklets: entries,
        scene: scene.cloned(),
    };
    atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn tracklet_boxes(id: &str, labels: &LabelFile, frames: usize) -> Result<Vec<Box3d>> {
    if labels.frames.len() != frames {
        return Err(Error::InvalidInput(format!(
            "tracklet {id}: {} labels for {frames} frames",
            labels.frames.len()
        )));
    }
    let first = labels.frames.first().ok_or_else(|| Error::InvalidInput(format!("tracklet {id} has no labels")))?;
    let spec = BoxSpec::new(first.w, first.l, first.h)?;
    labels
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.frame != i {
                return Err(Error::InvalidInput(format!("tracklet {id}: label {i} is for frame {}", f.frame)));
            }
            if (f.w, f.l, f.h) != (spec.w, spec.l, spec.h) {
                return Err(Error::InvalidInput(format!("tracklet {id}: box size changes at frame {i}")));
            }
            Ok(Box3d::new(PoseBev::new(f.x, f.z, f.theta), spec, f.y))
        })
        .collect()
}

/// Loads a dataset directory. The contents must hash to the manifest's value
/// unless `force` is set.
pub fn load_sequence(dir: &Path, force: bool) -> Result<SequenceDataset> {
    let manifest: Manifest = serde_json::from_slice(&read_existing(&dir.join("manifest.json"))?)?;
    let actual = content_hash(dir, &manifest.tracklets)?;
    if actual != manifest.content_hash {
        if !force {
            return Err(Error::HashMismatch {
                expected: manifest.content_hash.clone(),
                actual,
            });
        }
        log::warn!("dataset hash mismatch ignored");
    }
    let mut tracklets = Vec::with_capacity(manifest.tracklets.len());
    for e in &manifest.tracklets {
        let labels: LabelFile = serde_json::from_slice(&read_existing(&label_path(dir, &e.id))?)?;
        let boxes = tracklet_boxes(&e.id, &labels, e.frames)?;
        let frames = (0..e.frames)
            .map(|f| read_frame(&frame_path(dir, &e.id, f)))
            .collect::<Result<Vec<_>>>()?;
        tracklets.push(Tracklet {
            id: e.id.clone(),
            class: e.class,
            frames,
            boxes,
        });
    }
    Ok(SequenceDataset { manifest, tracklets })
}
