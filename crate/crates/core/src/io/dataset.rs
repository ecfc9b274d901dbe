use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Bytes per CIFAR-10 record: one label byte, then 1024 bytes each of the
/// red, green and blue planes (row-major).
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: u8 = 10;

/// Per-channel normalisation applied when pixels are turned into tensors.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            "large" => Ok(SizeClass::Large),
            other => Err(Error::Config(format!("unknown size class '{other}'"))),
        }
    }
}

/// Per-sample metadata of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub label: u8,
    pub shape: String,
    pub size_class: SizeClass,
    /// Fraction of image pixels covered by the object.
    pub area: f64,
}

/// Images `[count, C, S, S]` as raw bytes plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub image_size: usize,
    pub split: String,
    pub meta: Option<Vec<SampleMeta>>,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, channels: usize, image_size: usize, split: &str) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || images.len() != labels.len() * per {
            return dim_err(format!(
                "{} pixel bytes do not form {} images of [{channels}, {image_size}, {image_size}]",
                images.len(),
                labels.len()
            ));
        }
        Ok(Dataset { images, labels, channels, image_size, split: split.to_string(), meta: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Normalised tensor `[B, C, S, S]` of the selected images, each
    /// optionally mirrored left-right.
    pub fn batch<F: Scalar>(&self, idx: &[usize], flips: Option<&[bool]>) -> Result<Tensor<F>> {
        let s = self.image_size;
        let mut out = Vec::with_capacity(idx.len() * self.pixels_per_image());
        for (k, &i) in idx.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Index(format!("image {i} out of range for {} images", self.len())));
            }
            let img = self.image(i);
            let flip = flips.is_some_and(|f| f[k]);
            for row in img.chunks_exact(s) {
                if flip {
                    out.extend(row.iter().rev().map(|&p| normalize::<F>(p)));
                } else {
                    out.extend(row.iter().map(|&p| normalize::<F>(p)));
                }
            }
        }
        Tensor::new(out, &[idx.len(), self.channels, s, s])
    }

    /// The samples with indices in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.pixels_per_image());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            image_size: self.image_size,
            split: self.split.clone(),
            meta: self.meta.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

fn normalize<F: Scalar>(p: u8) -> F {
    F::from_f64((p as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
}

/// Parses CIFAR-10 binary records.
pub fn parse_cifar(bytes: &[u8], split: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format {
            offset: (whole * CIFAR_RECORD) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole * CIFAR_RECORD
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label byte {} exceeds 9", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new(images, labels, 3, 32, split)
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let split = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    parse_cifar(&bytes, split)
}

pub fn encode_cifar(data: &Dataset) -> Result<Vec<u8>> {
    if data.channels != 3 || data.image_size != 32 {
        return Err(Error::Config(format!(
            "CIFAR binary holds 3x32x32 images, dataset is {}x{}x{}",
            data.channels, data.image_size, data.image_size
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= CIFAR_CLASSES) {
        return Err(Error::Config(format!("label {bad} does not fit the CIFAR label range")));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels[i]);
        out.extend_from_slice(data.image(i));
    }
    Ok(out)
}

pub fn write_cifar_binary(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, encode_cifar(data)?)?;
    Ok(())
}

pub fn write_meta_csv(path: &Path, meta: &[SampleMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in meta {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_meta_csv(path: &Path) -> Result<Vec<SampleMeta>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Loads a CIFAR-format file and, when present next to it, the `.csv`
/// metadata sidecar written by the synthetic generator.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = load_cifar_binary(path)?;
    let sidecar = path.with_extension("csv");
    if sidecar.exists() {
        let meta = read_meta_csv(&sidecar)?;
        if meta.len() != data.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("metadata lists {} samples, binary has {}", meta.len(), data.len()),
            });
        }
        data.meta = Some(meta);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_empty_dataset() {
        assert_eq!(parse_cifar(&[], "x").unwrap().len(), 0);
    }

    #[test]
    fn truncated_reports_offset() {
        let bytes = vec![0u8; CIFAR_RECORD + 10];
        match parse_cifar(&bytes, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar(&bytes, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flip_mirrors_rows() {
        let d = Dataset::new((0..16).collect(), vec![0], 1, 4, "t").unwrap();
        let a = d.batch::<f64>(&[0], None).unwrap().to_vec();
        let b = d.batch::<f64>(&[0], Some(&[true])).unwrap().to_vec();
        assert_eq!(a[0], b[3]);
        assert_eq!(a[4], b[7]);
        assert!((a[0] - (-2.0)).abs() < 1e-12);
    }
}
