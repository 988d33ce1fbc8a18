//! CIFAR-10 binary batches: records of 1 label byte followed by
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each row-major).

use std::fs;
use std::path::{Path, PathBuf};

use super::image::Image;
use crate::error::{Error, Result};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
const PIXEL_BYTES: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const RECORD_BYTES: usize = 1 + PIXEL_BYTES;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Labeled image collection with a shared `C×H×W` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    /// `N×C×H×W` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        class_count: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if labels.is_empty() {
            return Err(Error::Parameter("dataset must hold at least one image".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::dim(format!(
                "{} labels need {} pixel bytes, got {}",
                labels.len(),
                per * labels.len(),
                pixels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Parameter(format!("label {bad} ≥ class count {class_count}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            class_count,
            pixels,
            labels,
        })
    }

    pub fn from_images(images: &[Image], labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Parameter("dataset must hold at least one image".into()))?;
        let mut pixels = Vec::with_capacity(first.data.len() * images.len());
        for im in images {
            if (im.channels, im.height, im.width) != (first.channels, first.height, first.width) {
                return Err(Error::dim("images in a dataset must share a shape"));
            }
            pixels.extend_from_slice(&im.data);
        }
        Self::new(first.channels, first.height, first.width, class_count, pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.image_bytes(i).to_vec(),
        }
    }

    /// Image indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.channels, self.height, self.width, self.class_count, pixels, labels)
    }

    /// The first `per_class` images of every class, in dataset order.
    pub fn balanced_prefix(&self, per_class: usize) -> Result<Self> {
        let mut keep = Vec::new();
        for idx in self.class_indices() {
            if idx.len() < per_class {
                return Err(Error::Parameter(format!(
                    "class has {} images, {per_class} requested",
                    idx.len()
                )));
            }
            keep.extend_from_slice(&idx[..per_class]);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    /// Unit-scaled float copy of all pixels (`N×C×H×W`).
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR-10 batch"));
    }
    if bytes.len() % RECORD_BYTES != 0 {
        let complete = bytes.len() / RECORD_BYTES;
        return Err(Error::format(
            complete * RECORD_BYTES,
            format!("truncated record: {} trailing bytes", bytes.len() % RECORD_BYTES),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * PIXEL_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(r * RECORD_BYTES, format!("label byte {label} ≥ 10")));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    LabeledDataset::new(3, CIFAR_SIDE, CIFAR_SIDE, CIFAR_CLASSES, pixels, labels)
}

/// Serializes back to the CIFAR-10 record layout.
pub fn to_cifar10_bytes(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if (ds.channels, ds.height, ds.width) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::dim("CIFAR-10 records are 3×32×32"));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image_bytes(i));
    }
    Ok(out)
}

/// Loads one batch file.
pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Locates the directory holding the batch files: `root` itself or its
/// `cifar-10-batches-bin` subdirectory.
pub fn find_cifar_dir(root: &Path) -> Option<PathBuf> {
    [root.to_path_buf(), root.join("cifar-10-batches-bin")]
        .into_iter()
        .find(|d| d.join(TEST_FILE).is_file())
}

pub fn load_cifar10_split(root: &Path, split: Split) -> Result<LabeledDataset> {
    let dir = find_cifar_dir(root).ok_or_else(|| {
        Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 binary batches found"),
        )
    })?;
    let files: Vec<&str> = match split {
        Split::Train => TRAIN_FILES.to_vec(),
        Split::Test => vec![TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let part = load_cifar10(&dir.join(f))?;
        pixels.extend(part.pixels);
        labels.extend(part.labels);
    }
    LabeledDataset::new(3, CIFAR_SIDE, CIFAR_SIDE, CIFAR_CLASSES, pixels, labels)
}
