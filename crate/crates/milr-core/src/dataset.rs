//! Evaluation dataset loaders: MNIST IDX files and CIFAR-10 binary batches.
//!
//! Images are normalized to [0, 1] in the requested dtype; labels are class
//! indices. Truncated or mis-tagged files fail without yielding a partial
//! dataset.

use crate::error::{MilrError, Result};
use crate::tensor::{Dtype, Tensor};
use std::io::Read;
use std::path::Path;

#[derive(Debug)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MilrError::Format(format!("truncated {what}")))
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_be_bytes(b))
}

/// Loads an MNIST IDX image file (magic 0x00000803) and its label file
/// (magic 0x00000801). Images come out as `[h, w, 1]` tensors.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<Dataset> {
    let mut img = std::fs::File::open(images_path)?;
    if read_u32_be(&mut img, "IDX image header")? != 0x0000_0803 {
        return Err(MilrError::Format("bad magic in IDX image file".into()));
    }
    let count = read_u32_be(&mut img, "IDX image header")? as usize;
    let h = read_u32_be(&mut img, "IDX image header")? as usize;
    let w = read_u32_be(&mut img, "IDX image header")? as usize;

    let mut lbl = std::fs::File::open(labels_path)?;
    if read_u32_be(&mut lbl, "IDX label header")? != 0x0000_0801 {
        return Err(MilrError::Format("bad magic in IDX label file".into()));
    }
    let label_count = read_u32_be(&mut lbl, "IDX label header")? as usize;
    if label_count != count {
        return Err(MilrError::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let mut inputs = Vec::with_capacity(count);
    let mut pixels = vec![0u8; h * w];
    for _ in 0..count {
        read_exact(&mut img, &mut pixels, "IDX image data")?;
        let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        inputs.push(Tensor::from_f64_values(vec![h, w, 1], &values, dtype));
    }
    let mut raw_labels = vec![0u8; count];
    read_exact(&mut lbl, &mut raw_labels, "IDX label data")?;
    Ok(Dataset {
        inputs,
        labels: raw_labels.iter().map(|&l| l as usize).collect(),
    })
}

/// Loads a CIFAR-10 binary batch: 10,000 records of 1 label byte plus
/// 3,072 pixel bytes in channel-planar (R, G, B) order. Images come out as
/// `[32, 32, 3]` tensors in channel-last order.
pub fn load_cifar_bin(path: impl AsRef<Path>, dtype: Dtype) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(MilrError::Format(format!(
            "CIFAR batch size {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD;
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(MilrError::Format(format!("CIFAR label {label} out of range")));
        }
        labels.push(label);
        let planes = &rec[1..];
        let mut values = vec![0.0f64; 32 * 32 * 3];
        for c in 0..3 {
            for px in 0..32 * 32 {
                values[px * 3 + c] = planes[c * 32 * 32 + px] as f64 / 255.0;
            }
        }
        inputs.push(Tensor::from_f64_values(vec![32, 32, 3], &values, dtype));
    }
    Ok(Dataset { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, count: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        let mut img = std::fs::File::create(&img_path).unwrap();
        img.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        img.write_all(&(count as u32).to_be_bytes()).unwrap();
        img.write_all(&2u32.to_be_bytes()).unwrap();
        img.write_all(&2u32.to_be_bytes()).unwrap();
        for i in 0..count {
            img.write_all(&[i as u8, 255, 0, 128]).unwrap();
        }
        let mut lbl = std::fs::File::create(&lbl_path).unwrap();
        lbl.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        lbl.write_all(&(count as u32).to_be_bytes()).unwrap();
        lbl.write_all(&(0..count).map(|i| (i % 10) as u8).collect::<Vec<_>>())
            .unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_roundtrip_and_normalization() {
        let dir = std::env::temp_dir().join("milr_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (img, lbl) = write_idx_pair(&dir, 3);
        let ds = load_mnist_idx(&img, &lbl, Dtype::F32).unwrap();
        assert_eq!(ds.inputs.len(), 3);
        assert_eq!(ds.inputs[0].shape(), &[2, 2, 1]);
        assert_eq!(ds.inputs[1].get(1), 1.0);
        assert_eq!(ds.inputs[1].get(2), 0.0);
        assert_eq!(ds.labels, vec![0, 1, 2]);
    }

    #[test]
    fn idx_truncation_is_an_error() {
        let dir = std::env::temp_dir().join("milr_idx_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let (img, lbl) = write_idx_pair(&dir, 3);
        let full = std::fs::read(&img).unwrap();
        std::fs::write(&img, &full[..full.len() - 2]).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lbl, Dtype::F32).unwrap_err(),
            MilrError::Format(_)
        ));
    }

    #[test]
    fn cifar_layout_and_errors() {
        let dir = std::env::temp_dir().join("milr_cifar_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        let mut rec = vec![0u8; 3073];
        rec[0] = 7; // label
        rec[1] = 255; // R of pixel 0
        rec[1 + 2 * 1024] = 51; // B of pixel 0
        std::fs::write(&path, &rec).unwrap();
        let ds = load_cifar_bin(&path, Dtype::F64).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.inputs[0].get(0), 1.0); // R channel-last
        assert_eq!(ds.inputs[0].get(2), 0.2); // B channel-last
        std::fs::write(&path, &rec[..3000]).unwrap();
        assert!(load_cifar_bin(&path, Dtype::F64).is_err());
    }
}
