//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<seq_id>/frames/0000.png   8-bit RGB
//! <root>/<split>/<seq_id>/depth.npy         little-endian float32, shape (T, H, W)
//! <root>/<split>/<seq_id>/labels.json       [{frame, class_id, box: [x1,y1,x2,y2], track_id}]
//! ```
//!
//! Every label-file read goes through [`read_labels`], which records the path,
//! so tests can prove that label-blind procedures never opened one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_sequence_with_id, BoxLabel, GenConfig, VideoSequence};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.json";
pub const DEPTH_FILE: &str = "depth.npy";
pub const FRAMES_DIR: &str = "frames";

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub name: String,
    pub seed: u64,
    pub n_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// split name → sequence ids
    pub splits: BTreeMap<String, Vec<String>>,
    /// Generator settings, when the data was synthesized here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    /// For derived datasets: where they came from and how.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<DerivedFrom>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedFrom {
    pub source: PathBuf,
    pub degradation: String,
    pub seed: u64,
}

/// Whether a loader may read `labels.json`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelAccess {
    Allowed,
    Blind,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{name}'")))
    }

    /// Sequence ids of a split, rejecting an empty one.
    pub fn nonempty_split(&self, name: &str) -> Result<&[String]> {
        let ids = self.split(name)?;
        if ids.is_empty() {
            return Err(Error::Empty(format!(
                "split '{name}' of {}",
                self.root.display()
            )));
        }
        Ok(ids)
    }

    pub fn sequence_dir(&self, split: &str, id: &str) -> PathBuf {
        self.root.join(split).join(id)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Missing { path });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.root = root.to_path_buf();
        let mut seen = std::collections::HashSet::new();
        for (split, ids) in &m.splits {
            for id in ids {
                if !seen.insert(id) {
                    return Err(Error::InvalidArgument(format!(
                        "sequence id '{id}' listed twice (split {split})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        write_json(&path, self)
    }

    /// Loads every sequence of a split.
    pub fn load_split(&self, split: &str, access: LabelAccess) -> Result<Vec<VideoSequence>> {
        let ids = self.split(split)?;
        ids.iter()
            .map(|id| read_sequence(&self.sequence_dir(split, id), access))
            .collect()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing {
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

static LABEL_READS: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());

/// Number of label files read so far whose path lies under `root`.
pub fn label_reads_under(root: &Path) -> usize {
    LABEL_READS
        .lock()
        .unwrap()
        .iter()
        .filter(|p| p.starts_with(root))
        .count()
}

pub fn read_labels(path: &Path) -> Result<Vec<BoxLabel>> {
    LABEL_READS.lock().unwrap().push(path.to_path_buf());
    read_json(path)
}

// --- depth maps as .npy -----------------------------------------------------

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

pub fn write_npy_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_str = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic(6) + version(2) + len(2) + header, padded to a multiple of 64 with '\n' last
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut buf = Vec::with_capacity(10 + header.len() + data.len() * 4);
    buf.extend_from_slice(NPY_MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_npy_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Corrupt(format!("{}: {why}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC || bytes[6] != 1 {
        return Err(bad("not a v1 .npy file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(
        bytes
            .get(10..10 + hlen)
            .ok_or_else(|| bad("short header"))?,
    )
    .map_err(|_| bad("header not utf-8"))?;
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(bad("expected little-endian float32 C order"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + 10;
    let close = header[open..].find(')').ok_or_else(|| bad("no shape"))? + open;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[10 + hlen..];
    if body.len() != n * 4 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

// --- sequences ---------------------------------------------------------------

pub fn frame_path(seq_dir: &Path, t: usize) -> PathBuf {
    seq_dir.join(FRAMES_DIR).join(format!("{t:04}.png"))
}

/// Writes frames and depth; labels only when `labels` is true.
pub fn write_sequence_data(seq_dir: &Path, seq: &VideoSequence, labels: bool) -> Result<()> {
    let frames_dir = seq_dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for t in 0..seq.frames {
        let raw: Vec<u8> = seq
            .frame(t)
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(seq.width as u32, seq.height as u32, raw)
            .expect("frame buffer sized by sequence");
        let path = frame_path(seq_dir, t);
        img.save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    if let Some(depth) = &seq.depth {
        write_npy_f32(
            &seq_dir.join(DEPTH_FILE),
            &[seq.frames, seq.height, seq.width],
            depth,
        )?;
    }
    if labels {
        write_json(&seq_dir.join(LABELS_FILE), &seq.labels)?;
    }
    Ok(())
}

pub fn read_sequence(seq_dir: &Path, access: LabelAccess) -> Result<VideoSequence> {
    let id = seq_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut pixels = Vec::new();
    let (mut width, mut height) = (0usize, 0usize);
    let mut frames = 0;
    loop {
        let path = frame_path(seq_dir, frames);
        if !path.exists() {
            break;
        }
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        if frames == 0 {
            width = img.width() as usize;
            height = img.height() as usize;
        } else if (img.width() as usize, img.height() as usize) != (width, height) {
            return Err(Error::Shape(format!(
                "{}: frame size changes",
                path.display()
            )));
        }
        pixels.extend(img.as_raw().iter().map(|&b| b as f32 / 255.0));
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Missing {
            path: seq_dir.join(FRAMES_DIR),
        });
    }
    let depth_path = seq_dir.join(DEPTH_FILE);
    let depth = if depth_path.exists() {
        let (shape, d) = read_npy_f32(&depth_path)?;
        if shape != [frames, height, width] {
            return Err(Error::Shape(format!(
                "{}: depth shape {shape:?} vs frames {frames}x{height}x{width}",
                depth_path.display()
            )));
        }
        Some(d)
    } else {
        None
    };
    let labels = match access {
        LabelAccess::Allowed => {
            let p = seq_dir.join(LABELS_FILE);
            if p.exists() {
                read_labels(&p)?
            } else {
                Vec::new()
            }
        }
        LabelAccess::Blind => Vec::new(),
    };
    Ok(VideoSequence {
        id,
        frames,
        height,
        width,
        pixels,
        depth,
        labels,
    })
}

/// Split sizes for `n` items: train and val rounded, test takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let train = ((n as f64) * ratios[0]).round() as usize;
    let val = (((n as f64) * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

/// Synthesizes `n_sequences` sequences under `root` and writes the manifest.
///
/// Sequence `i` (in generation order, train then val then test) is rendered
/// from `derive_seed(seed, i)`.
pub fn build_dataset(
    root: &Path,
    cfg: &GenConfig,
    n_sequences: usize,
    split_ratios: [f64; 3],
    seed: u64,
    force: bool,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let sizes = split_sizes(n_sequences, split_ratios)?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        if !force {
            return Err(Error::AlreadyExists {
                path: manifest_path,
            });
        }
        for split in SPLITS {
            let d = root.join(split);
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    let mut jobs = Vec::new();
    let mut splits = BTreeMap::new();
    let mut index = 0usize;
    for (split, &size) in SPLITS.iter().zip(&sizes) {
        let mut ids = Vec::with_capacity(size);
        for _ in 0..size {
            let id = format!("seq_{index:04}");
            jobs.push((
                split.to_string(),
                id.clone(),
                derive_seed(seed, index as u64),
            ));
            ids.push(id);
            index += 1;
        }
        splits.insert(split.to_string(), ids);
    }
    jobs.par_iter()
        .map(|(split, id, s)| {
            let seq = generate_sequence_with_id(cfg, *s, id)?;
            write_sequence_data(&root.join(split).join(id), &seq, true)
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        name: root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        seed,
        n_classes: cfg.n_classes,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        splits,
        generator: Some(cfg.clone()),
        derived_from: None,
    };
    manifest.save()?;
    Ok(manifest)
}
