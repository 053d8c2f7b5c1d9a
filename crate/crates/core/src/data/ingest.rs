//! Directory layouts:
//!
//! * `sintel_like`: `clean/<scene>/<frame>.png` (`final/` if there is no
//!   `clean/`), `flow/<scene>/<frame>.flo`.
//!   Consecutive frames of a scene form pairs; the flow of a pair is named
//!   after its first frame.
//! * `kitti_like`: `image_2/<id>_10.png`, `image_2/<id>_11.png`,
//!   `flow_occ/<id>_10.png`, else `flow_noc/<id>_10.png`.
//! * `flo_pairs`: `<name>_img1.png`, `<name>_img2.png`, `<name>_flow.flo`.
//!
//! Flow files are optional everywhere; samples without one are
//! inference-only.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{FlowSample, SampleFormat};
use crate::error::{Error, Result};
use crate::io::{read_flo, read_kitti_png, read_png_rgb};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    SintelLike,
    KittiLike,
    FloPairs,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::SintelLike => "sintel_like",
            Layout::KittiLike => "kitti_like",
            Layout::FloPairs => "flo_pairs",
        }
    }

    fn owns(self, entry: &str, is_dir: bool) -> bool {
        match self {
            Layout::SintelLike => is_dir && matches!(entry, "clean" | "final" | "flow"),
            Layout::KittiLike => is_dir && matches!(entry, "image_2" | "image_3" | "flow_occ" | "flow_noc"),
            Layout::FloPairs => {
                !is_dir && (entry.ends_with("_img1.png") || entry.ends_with("_img2.png") || entry.ends_with("_flow.flo"))
            }
        }
    }
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sintel_like" | "sintel" => Ok(Self::SintelLike),
            "kitti_like" | "kitti" => Ok(Self::KittiLike),
            "flo_pairs" => Ok(Self::FloPairs),
            o => Err(Error::Argument(format!(
                "unknown layout '{o}' (expected sintel_like, kitti_like or flo_pairs)"
            ))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Paths making up one sample; nothing is read until [`SampleIndex::load`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleDescriptor {
    pub image1: PathBuf,
    pub image2: PathBuf,
    pub flow: Option<PathBuf>,
    pub format: SampleFormat,
}

impl SampleDescriptor {
    pub fn load(&self) -> Result<FlowSample> {
        let flow_gt = match &self.flow {
            None => None,
            Some(p) => Some(match self.format {
                SampleFormat::KittiPng => read_kitti_png(p)?,
                _ => read_flo(p)?,
            }),
        };
        Ok(FlowSample {
            image1: read_png_rgb(&self.image1)?,
            image2: read_png_rgb(&self.image2)?,
            flow_gt,
            source_path: Some(self.image1.clone()),
            format: self.format,
        })
    }
}

/// Immutable, sorted list of sample descriptors.
#[derive(Clone, Debug)]
pub struct SampleIndex {
    pub root: PathBuf,
    pub layout: Layout,
    samples: Vec<SampleDescriptor>,
}

impl SampleIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn descriptors(&self) -> &[SampleDescriptor] {
        &self.samples
    }

    pub fn load(&self, i: usize) -> Result<FlowSample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::Argument(format!("sample {i} out of range (index has {})", self.samples.len())))?
            .load()
    }

    /// Lazily loads samples in index order.
    pub fn iter(&self) -> impl Iterator<Item = Result<FlowSample>> + '_ {
        self.samples.iter().map(SampleDescriptor::load)
    }
}

/// Sorted `(name, path, is_dir)` entries of a directory.
fn list(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_dir = path.is_dir();
        out.push((entry.file_name().to_string_lossy().into_owned(), path, is_dir));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.is_file().then_some(path)
}

fn is_png(name: &str) -> bool {
    name.to_ascii_lowercase().ends_with(".png")
}

/// Enumerate a dataset directory.
pub fn ingest_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<SampleIndex> {
    let root = root.as_ref();
    let entries = list(root)?;
    let others = [Layout::SintelLike, Layout::KittiLike, Layout::FloPairs]
        .into_iter()
        .filter(|&l| l != layout);
    for other in others {
        if let Some((_, path, _)) = entries.iter().find(|(n, _, d)| other.owns(n, *d)) {
            return Err(Error::Layout {
                layout: layout.name(),
                path: path.clone(),
            });
        }
    }
    let samples = match layout {
        Layout::SintelLike => sintel(root)?,
        Layout::KittiLike => kitti(root)?,
        Layout::FloPairs => flo_pairs(&entries)?,
    };
    Ok(SampleIndex {
        root: root.to_path_buf(),
        layout,
        samples,
    })
}

fn sintel(root: &Path) -> Result<Vec<SampleDescriptor>> {
    let Some(clean) = ["clean", "final"].iter().map(|d| root.join(d)).find(|d| d.is_dir()) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (scene, scene_dir, is_dir) in list(&clean)? {
        if !is_dir {
            continue;
        }
        let frames: Vec<_> = list(&scene_dir)?
            .into_iter()
            .filter(|(n, _, d)| !d && is_png(n))
            .collect();
        for pair in frames.windows(2) {
            let stem = Path::new(&pair[0].0).file_stem().unwrap_or_default().to_owned();
            let flow = root.join("flow").join(&scene).join(stem).with_extension("flo");
            out.push(SampleDescriptor {
                image1: pair[0].1.clone(),
                image2: pair[1].1.clone(),
                flow: existing(flow),
                format: SampleFormat::Flo,
            });
        }
    }
    Ok(out)
}

fn kitti(root: &Path) -> Result<Vec<SampleDescriptor>> {
    let images = root.join("image_2");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (name, path, is_dir) in list(&images)? {
        let Some(id) = name.strip_suffix("_10.png").filter(|_| !is_dir) else {
            continue;
        };
        let second = images.join(format!("{id}_11.png"));
        if !second.is_file() {
            return Err(Error::Format(format!("{} has no matching second frame", path.display())));
        }
        out.push(SampleDescriptor {
            image1: path,
            image2: second,
            flow: existing(root.join("flow_occ").join(&name)).or_else(|| existing(root.join("flow_noc").join(&name))),
            format: SampleFormat::KittiPng,
        });
    }
    Ok(out)
}

fn flo_pairs(entries: &[(String, PathBuf, bool)]) -> Result<Vec<SampleDescriptor>> {
    let mut out = Vec::new();
    for (name, path, is_dir) in entries {
        let Some(stem) = name.strip_suffix("_img1.png").filter(|_| !is_dir) else {
            continue;
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        let second = dir.join(format!("{stem}_img2.png"));
        if !second.is_file() {
            return Err(Error::Format(format!("{} has no matching second frame", path.display())));
        }
        out.push(SampleDescriptor {
            image1: path.clone(),
            image2: second,
            flow: existing(dir.join(format!("{stem}_flow.flo"))),
            format: SampleFormat::Flo,
        });
    }
    Ok(out)
}
