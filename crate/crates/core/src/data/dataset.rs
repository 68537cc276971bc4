use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::image_io::{load_mask, load_rgb, save_mask, save_rgb};
use super::resize::{resize_bilinear, resize_mask};
use crate::error::{Error, Result};
use crate::nn::RegionMask;
use crate::tensor::Tensor;

const COMPOSITE_DIR: &str = "composite_images";
const REAL_DIR: &str = "real_images";
const MASK_DIR: &str = "masks";

/// Mean absolute background difference above which a warning is recorded.
pub const BACKGROUND_TOLERANCE: f64 = 0.02;

/// A composite, its ground-truth real image, and the foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub id: String,
    pub composite: Tensor<f32>,
    pub real: Tensor<f32>,
    pub mask: RegionMask,
}

impl ImageTriplet {
    /// Mean absolute composite/real difference over background pixels.
    pub fn background_difference(&self) -> f64 {
        let plane = self.mask.height() * self.mask.width();
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..3 {
            for i in 0..plane {
                if !self.mask.bits()[i] {
                    total += (self.composite.data()[c * plane + i] - self.real.data()[c * plane + i]).abs() as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadWarning {
    pub id: String,
    pub background_difference: f64,
}

fn file_for(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

pub fn write_split_file(root: &Path, split: Split, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(root.join(format!("{split}.txt")), text)?;
    Ok(())
}

pub fn save_triplet(root: &Path, triplet: &ImageTriplet) -> Result<()> {
    for dir in [COMPOSITE_DIR, REAL_DIR, MASK_DIR] {
        fs::create_dir_all(root.join(dir))?;
    }
    save_rgb(&file_for(root, COMPOSITE_DIR, &triplet.id), &triplet.composite)?;
    save_rgb(&file_for(root, REAL_DIR, &triplet.id), &triplet.real)?;
    save_mask(&file_for(root, MASK_DIR, &triplet.id), &triplet.mask)
}

/// Lazily decodes triplets of one split in sorted id order.
pub struct DatasetStream {
    root: PathBuf,
    ids: Vec<String>,
    next: usize,
    resolution: Option<usize>,
    warnings: Vec<LoadWarning>,
}

impl DatasetStream {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Background-consistency warnings gathered from items decoded so far.
    pub fn warnings(&self) -> &[LoadWarning] {
        &self.warnings
    }

    fn load(&mut self, id: &str) -> Result<ImageTriplet> {
        let data_err = |reason: String| Error::Data { id: id.to_string(), reason };
        let read = |dir: &str| -> Result<PathBuf> {
            let path = file_for(&self.root, dir, id);
            if path.is_file() {
                Ok(path)
            } else {
                Err(data_err(format!("missing {}", path.display())))
            }
        };
        let comp_path = read(COMPOSITE_DIR)?;
        let real_path = read(REAL_DIR)?;
        let mask_path = read(MASK_DIR)?;
        let decode = |e: Error, path: &Path| data_err(format!("cannot decode {}: {e}", path.display()));
        let mut composite = load_rgb(&comp_path).map_err(|e| decode(e, &comp_path))?;
        let mut real = load_rgb(&real_path).map_err(|e| decode(e, &real_path))?;
        let mut mask = load_mask(&mask_path).map_err(|e| decode(e, &mask_path))?;
        if composite.shape() != real.shape() || composite.shape()[1..] != [mask.height(), mask.width()] {
            return Err(data_err(format!(
                "size mismatch: composite {:?}, real {:?}, mask {}x{}",
                composite.shape(),
                real.shape(),
                mask.height(),
                mask.width()
            )));
        }
        if let Some(r) = self.resolution {
            composite = resize_bilinear(&composite, r, r)?;
            real = resize_bilinear(&real, r, r)?;
            mask = resize_mask(&mask, r, r)?;
        }
        if mask.is_empty() {
            return Err(data_err("foreground mask is empty".into()));
        }
        let triplet = ImageTriplet { id: id.to_string(), composite, real, mask };
        let diff = triplet.background_difference();
        if diff > BACKGROUND_TOLERANCE {
            self.warnings.push(LoadWarning { id: id.to_string(), background_difference: diff });
        }
        Ok(triplet)
    }
}

impl Iterator for DatasetStream {
    type Item = Result<ImageTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.get(self.next)?.clone();
        self.next += 1;
        Some(self.load(&id))
    }
}

/// Opens a split. `resolution` resizes every item to a square of that side.
pub fn load_dataset(root: &Path, split: Split, resolution: Option<usize>) -> Result<DatasetStream> {
    let list = root.join(format!("{split}.txt"));
    let text = fs::read_to_string(&list)
        .map_err(|e| Error::Config(format!("cannot read split file {}: {e}", list.display())))?;
    let mut ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    ids.sort();
    ids.dedup();
    if resolution == Some(0) {
        return Err(Error::Config("resolution must be positive".into()));
    }
    Ok(DatasetStream { root: root.to_path_buf(), ids, next: 0, resolution, warnings: Vec::new() })
}

/// Decodes a whole split eagerly.
pub fn load_all(root: &Path, split: Split, resolution: Option<usize>) -> Result<(Vec<ImageTriplet>, Vec<LoadWarning>)> {
    let mut stream = load_dataset(root, split, resolution)?;
    let mut items = Vec::with_capacity(stream.len());
    for item in stream.by_ref() {
        items.push(item?);
    }
    Ok((items, stream.warnings.clone()))
}
