//! Labelled image datasets and their raw-binary layout.
//!
//! Layout (little-endian): magic `DFD1`, then `u32` N, C, channels, H, W,
//! then `N·channels·H·W` `u8` pixels in row-major `(N, channels, H, W)`
//! order, then `N` `u8` labels. Pixels are scaled by `1/255` on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DFD1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    RawBinary,
    PngDir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl ImageDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.ndim() != 4 || images.batch() == 0 {
            return Err(Error::shape(&[1, 0, 0, 0], images.shape(), "dataset images"));
        }
        if images.batch() != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("dataset pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Consecutive batches covering the dataset in order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |start| {
            let end = (start + batch_size).min(n);
            (self.images.slice_batch(start, end), self.labels[start..end].to_vec())
        })
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

/// Parses the raw-binary layout from memory.
pub fn decode_raw(bytes: &[u8], split: Split, provenance: &str) -> Result<ImageDataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..bytes.len().min(4)],
                DATASET_MAGIC
            ),
        });
    }
    let fields: Vec<usize> = (0..5)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (n, classes, channels, h, w) = (fields[0], fields[1], fields[2], fields[3], fields[4]);
    if n == 0 || classes == 0 || channels == 0 || h == 0 || w == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("zero-sized dimension in header (N={n}, C={classes}, {channels}x{h}x{w})"),
        });
    }
    let pixel_len = n * channels * h * w;
    let pixels = bytes.get(HEADER_LEN..HEADER_LEN + pixel_len).ok_or_else(|| Error::Format {
        offset: HEADER_LEN as u64,
        message: format!(
            "pixel section truncated: expected {pixel_len} bytes, found {}",
            bytes.len().saturating_sub(HEADER_LEN)
        ),
    })?;
    let label_start = HEADER_LEN + pixel_len;
    let raw_labels = bytes.get(label_start..label_start + n).ok_or_else(|| Error::Format {
        offset: label_start as u64,
        message: format!(
            "label section truncated: expected {n} bytes, found {}",
            bytes.len().saturating_sub(label_start)
        ),
    })?;
    if bytes.len() != label_start + n {
        return Err(Error::Format {
            offset: (label_start + n) as u64,
            message: format!("{} trailing bytes after labels", bytes.len() - label_start - n),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &y) in raw_labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::Format {
                offset: (label_start + i) as u64,
                message: format!("label {y} of sample {i} is not below class count {classes}"),
            });
        }
        labels.push(y as usize);
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, channels, h, w], data)?;
    ImageDataset::new(images, labels, classes, split, provenance)
}

/// Serialises to the raw-binary layout, quantising pixels to `u8`.
pub fn encode_raw(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.num_classes > 256 {
        return Err(Error::input("raw-binary labels are one byte; at most 256 classes"));
    }
    let (c, h, w) = ds.image_shape();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.images.numel() + ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len(), ds.num_classes, c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out.extend(ds.labels.iter().map(|&y| y as u8));
    Ok(out)
}

pub fn save_raw(ds: &ImageDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(ds)?).map_err(|e| Error::io(path, e))
}

/// Loads a dataset in either supported format.
pub fn load_dataset(path: &Path, format: DatasetFormat, split: Split) -> Result<ImageDataset> {
    match format {
        DatasetFormat::RawBinary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_raw(&bytes, split, &path.display().to_string())
        }
        DatasetFormat::PngDir => load_png_dir(path, split),
    }
}

/// Directory of PNG files plus `labels.txt` with `<file> <label>` lines.
/// The class count is one more than the largest label.
fn load_png_dir(dir: &Path, split: Split) -> Result<ImageDataset> {
    let list = dir.join("labels.txt");
    let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::input(format!("{}:{}: expected '<file> <label>'", list.display(), lineno + 1)));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::input(format!("{}:{}: bad label '{label}'", list.display(), lineno + 1)))?;
        let path = dir.join(file);
        let img = image::open(&path)
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let d = img.dimensions();
        if *dims.get_or_insert(d) != d {
            return Err(Error::input(format!("{} has size {d:?}, expected {:?}", path.display(), dims.unwrap())));
        }
        let (w, h) = (d.0 as usize, d.1 as usize);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
                }
            }
        }
        labels.push(label);
    }
    let (w, h) = dims.ok_or_else(|| Error::input(format!("{} lists no images", list.display())))?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let images = Tensor::new(vec![labels.len(), 3, h as usize, w as usize], data)?;
    ImageDataset::new(images, labels, classes, split, dir.display().to_string())
}
