//! Dataset ingestion: IDX (MNIST-style) files and synthetic class-blob data.

use crate::error::{Error, Result};
use crate::rng::{rng, seed_chain};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labelled dataset. `inputs[i]` is one example tensor with values in [0,1].
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Batch {
        let n = n.min(self.len());
        Batch {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Examples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        Batch {
            inputs: self.inputs[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Parses an IDX image/label file pair into a [`Batch`] of flat `[H*W]`
/// tensors normalized to [0,1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Batch> {
    let img_bytes = read_all(images)?;
    let lbl_bytes = read_all(labels)?;

    let mut cur = std::io::Cursor::new(&img_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("image header".into()))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let n = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("image count".into()))? as usize;
    let h = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("image rows".into()))? as usize;
    let w = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("image cols".into()))? as usize;
    let need = n * h * w;
    let payload = &img_bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "image payload holds {} bytes, need {need}",
            payload.len()
        )));
    }

    let mut cur = std::io::Cursor::new(&lbl_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("label header".into()))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABEL_MAGIC, found: magic });
    }
    let n_lbl = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("label count".into()))? as usize;
    if lbl_bytes.len() < 8 + n_lbl {
        return Err(Error::Truncated(format!(
            "label payload holds {} bytes, need {n_lbl}",
            lbl_bytes.len().saturating_sub(8)
        )));
    }
    if n != n_lbl {
        return Err(Error::CountMismatch { images: n, labels: n_lbl });
    }

    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let px = &payload[i * h * w..(i + 1) * h * w];
        let data: Vec<f64> = px.iter().map(|&b| b as f64 / 255.0).collect();
        inputs.push(Tensor::new(vec![h * w], data)?);
    }
    let raw_labels = &lbl_bytes[8..8 + n];
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Batch { inputs, labels, classes: classes.max(10) })
}

/// Synthetic class-conditional blob images: each class gets a fixed random
/// template in [0,1] and examples are the template plus pixel noise, clamped
/// back to the box. Balanced labels, reproducible per seed.
pub fn gen_synthetic(seed: u64, classes: usize, hw: (usize, usize), n: usize, noise: f64) -> Batch {
    assert!(classes >= 1 && n >= classes, "need n >= classes");
    let (h, w) = hw;
    let dims = h * w;
    let mut template_rng = rng(seed_chain(seed, &[0x7433]));
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| template_rng.gen_range(0.0..1.0)).collect())
        .collect();

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut ex_rng = rng(seed_chain(seed, &[0x6578, i as u64]));
        let mut data = templates[class].clone();
        for v in &mut data {
            let z: f64 = StandardNormal.sample(&mut ex_rng);
            *v = (*v + noise * z).clamp(0.0, 1.0);
        }
        inputs.push(Tensor::new(vec![dims], data).expect("volume matches"));
        labels.push(class);
    }
    Batch { inputs, labels, classes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    fn image_file(n: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend_from_slice(&h.to_be_bytes());
        v.extend_from_slice(&w.to_be_bytes());
        v.extend_from_slice(payload);
        v
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_handcrafted_idx() {
        let img = write_tmp(&image_file(1, 2, 2, &[0, 128, 255, 64]));
        let lbl = write_tmp(&label_file(&[7]));
        let batch = load_idx(img.path(), lbl.path()).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(
            batch.inputs[0].data(),
            &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]
        );
        assert_eq!(batch.labels, vec![7]);
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let mut bytes = image_file(1, 1, 1, &[0]);
        bytes[3] = 0x02; // magic 0x00000802
        let img = write_tmp(&bytes);
        let lbl = write_tmp(&label_file(&[0]));
        match load_idx(img.path(), lbl.path()) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, 0x0000_0802),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_distinct_error() {
        let img = write_tmp(&image_file(5, 1, 1, &[0; 5]));
        let lbl = write_tmp(&label_file(&[0, 1, 2, 3]));
        match load_idx(img.path(), lbl.path()) {
            Err(Error::CountMismatch { images, labels }) => {
                assert_eq!((images, labels), (5, 4));
            }
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_distinct_error() {
        let img = write_tmp(&image_file(2, 2, 2, &[0; 5])); // needs 8
        let lbl = write_tmp(&label_file(&[0, 1]));
        assert!(matches!(load_idx(img.path(), lbl.path()), Err(Error::Truncated(_))));
    }

    #[test]
    fn synthetic_reproducible_and_balanced() {
        let a = gen_synthetic(3, 4, (5, 5), 22, 0.1);
        let b = gen_synthetic(3, 4, (5, 5), 22, 0.1);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inputs[0], b.inputs[0]);
        let mut counts = vec![0usize; 4];
        for &l in &a.labels {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1);
        assert!(a.inputs.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}
