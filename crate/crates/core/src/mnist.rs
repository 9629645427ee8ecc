//! MNIST IDX ingestion. Big-endian headers, pixels normalized to [0,1].

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set; every sample is a flat row of `rows * cols` reals.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// First `n` samples as a new dataset.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

fn read_be_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_be_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Corrupt("IDX file truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_be_u32(&mut ir)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {:#010x}, expected {:#010x}", magic, IMAGES_MAGIC)));
    }
    let count = read_be_u32(&mut ir)? as usize;
    let rows = read_be_u32(&mut ir)? as usize;
    let cols = read_be_u32(&mut ir)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    ir.read_exact(&mut pixels).map_err(truncated)?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_be_u32(&mut lr)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("label magic {:#010x}, expected {:#010x}", magic, LABELS_MAGIC)));
    }
    let label_count = read_be_u32(&mut lr)? as usize;
    if label_count != count {
        return Err(Error::Corrupt(format!("{} labels for {} images", label_count, count)));
    }
    let mut labels = vec![0u8; label_count];
    lr.read_exact(&mut labels).map_err(truncated)?;

    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset { images, labels, rows, cols })
}

/// Read one image from a bare IDX image file (for the CLI infer command).
pub fn load_single_image(path: &Path, index: usize) -> Result<Vec<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_be_u32(&mut r)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {:#010x}, expected {:#010x}", magic, IMAGES_MAGIC)));
    }
    let count = read_be_u32(&mut r)? as usize;
    let rows = read_be_u32(&mut r)? as usize;
    let cols = read_be_u32(&mut r)? as usize;
    if index >= count {
        return Err(Error::Parameter(format!("image index {} out of {}", index, count)));
    }
    let len = rows * cols;
    let mut skip = vec![0u8; 16]; // reuse as scratch
    let mut remaining = index * len;
    while remaining > 0 {
        let chunk = remaining.min(skip.len());
        r.read_exact(&mut skip[..chunk]).map_err(truncated)?;
        remaining -= chunk;
    }
    let mut pixels = vec![0u8; len];
    r.read_exact(&mut pixels).map_err(truncated)?;
    Ok(pixels.iter().map(|&p| p as f32 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, images: &[u8], labels: &[u8], count: u32, rows: u32, cols: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        let mut f = File::create(&ip).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(images).unwrap();
        let mut f = File::create(&lp).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn pixel_255_becomes_one() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0, 128, 255, 0], &[7], 1, 2, 2);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.image(0)[2], 1.0);
        assert_eq!(ds.image(0)[0], 0.0);
        assert_eq!(ds.labels[0], 7);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0; 4], &[0], 1, 2, 2);
        // labels file used as images: wrong magic
        assert!(matches!(load_mnist_idx(&lp, &ip), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[0; 3], &[0], 1, 2, 2);
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Corrupt(_))));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        let mut f = File::create(&ip).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&1u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[0; 4]).unwrap();
        let mut f = File::create(&lp).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[0, 1]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Corrupt(_))));
    }
}
