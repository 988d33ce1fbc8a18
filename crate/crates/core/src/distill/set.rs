use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{read_apal, write_apal};
use crate::error::{Error, Result};
use crate::io::{Image, LabeledDataset};
use crate::nn::{Real, Tensor};
use crate::palette::{condense_images, PaletteNetParams};
use crate::quantize::{median_cut, octree_quantize, QuantMode, QuantizedImage, MAX_COLORS};

/// The learnable synthetic images, class-major, with the palette network
/// that condenses them.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    /// `(classes·ipc) × C × H × W`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub classes: usize,
    /// `None` when the palette branch is bypassed (K = 256).
    pub palette: Option<PaletteNetParams<f32>>,
    /// Dataset indices each synthetic image was initialized from.
    pub init_indices: Vec<Vec<usize>>,
}

impl SyntheticSet {
    /// Copies the selected real images, `indices[class]` holding `ipc` entries each.
    pub fn from_indices(dataset: &LabeledDataset, indices: &[Vec<usize>]) -> Result<Self> {
        let classes = indices.len();
        let ipc = indices.first().map_or(0, Vec::len);
        if classes == 0 || ipc == 0 || indices.iter().any(|v| v.len() != ipc) {
            return Err(Error::Contract("synthetic init needs the same positive count per class".into()));
        }
        let mut data = Vec::with_capacity(classes * ipc * dataset.image_len());
        let mut labels = Vec::with_capacity(classes * ipc);
        for (class, members) in indices.iter().enumerate() {
            for &i in members {
                if i >= dataset.len() {
                    return Err(Error::Parameter(format!("init index {i} outside dataset of {}", dataset.len())));
                }
                if dataset.labels[i] != class {
                    return Err(Error::Contract(format!("init index {i} is not of class {class}")));
                }
                data.extend(dataset.image_bytes(i).iter().map(|&b| b as f32 / 255.0));
                labels.push(class);
            }
        }
        let shape = [classes * ipc, dataset.channels, dataset.height, dataset.width];
        Ok(Self {
            images: Tensor::new(shape.to_vec(), data)?,
            labels,
            ipc,
            classes,
            palette: None,
            init_indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The stored artifact: palette-condensed, or raw 8-bit when bypassed.
    pub fn condense(&self) -> Result<Vec<QuantizedImage>> {
        match &self.palette {
            Some(p) => condense_images(p, &self.images),
            None => self.to_images()?.iter().map(raw_quantized).collect(),
        }
    }

    /// Current images rounded to 8 bits.
    pub fn to_images(&self) -> Result<Vec<Image>> {
        let s = self.images.shape();
        let len = s[1] * s[2] * s[3];
        self.images
            .data()
            .chunks_exact(len)
            .map(|v| Image::from_unit(s[1], s[2], s[3], &v.iter().map(|x| x.f64()).collect::<Vec<_>>()))
            .collect()
    }

    /// `c{class:02}_i{index:03}.apal`
    pub fn file_name(class: usize, index: usize) -> String {
        format!("c{class:02}_i{index:03}.apal")
    }

    /// Writes the condensed artifact, one file per image.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let condensed = self.condense()?;
        let mut paths = Vec::with_capacity(condensed.len());
        for (i, q) in condensed.iter().enumerate() {
            let path = dir.join(Self::file_name(self.labels[i], i % self.ipc));
            write_apal(q, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Lossless per-channel K = 256 wrapper around an 8-bit image.
pub fn raw_quantized(image: &Image) -> Result<QuantizedImage> {
    let c = image.channels;
    let palette = (0..c).flat_map(|_| 0..=255u8).collect();
    QuantizedImage::new(
        QuantMode::PerChannel,
        c,
        image.height,
        image.width,
        MAX_COLORS,
        palette,
        image.data.clone(),
    )
}

/// Reads every `cNN_iNNN.apal` file of `dir`, sorted by name, with labels
/// taken from the class field.
pub fn read_synthetic_dir(dir: &Path) -> Result<(Vec<QuantizedImage>, Vec<usize>)> {
    let mut entries: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(n, _)| n.ends_with(".apal"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Parameter(format!("no .apal files in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (name, path) in entries {
        let class = name
            .strip_prefix('c')
            .and_then(|r| r.split('_').next())
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| Error::Parameter(format!("cannot read a class from file name {name}")))?;
        images.push(read_apal(&path)?);
        labels.push(class);
    }
    Ok((images, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosthocMethod {
    /// Per-channel, matching the palette network's index layout.
    MedianCut,
    /// Joint colors.
    Octree,
}

/// Quantizes the current synthetic images with a classical method.
pub fn posthoc_quantize(set: &SyntheticSet, k: usize, method: PosthocMethod) -> Result<Vec<QuantizedImage>> {
    set.to_images()?
        .iter()
        .map(|im| match method {
            PosthocMethod::MedianCut => median_cut(im, k, QuantMode::PerChannel),
            PosthocMethod::Octree => octree_quantize(im, k),
        })
        .collect()
}
