//! On-disk layout: `images/NNNN.pgm`, `masks/NNNN.pgm` (labels as pixel values)
//! and `manifest.txt` with one `id split` pair per line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::netpbm::{read_pgm, write_pgm};
use super::{generate_phantom_raw, preprocess, GrayImage, LabelMap, PhantomSpec, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid("split", format!("unknown split {other:?} (expected train|val)"))),
        }
    }
}

/// Split of sample `index` out of `count`: the first 80% (rounded down) train.
pub fn split_of(index: usize, count: usize) -> Split {
    if index < count * 4 / 5 {
        Split::Train
    } else {
        Split::Val
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Phantoms `0..count` generated in memory, split as on disk.
    pub fn synthetic(spec: &PhantomSpec, count: usize) -> Result<Self> {
        let mut ds = Dataset::default();
        for i in 0..count {
            let raw = generate_phantom_raw(spec, i)?;
            let sample = Sample {
                id: raw.id,
                image: preprocess(&raw.image, spec.size)?,
                mask: raw.mask,
            };
            match split_of(i, count) {
                Split::Train => ds.train.push(sample),
                Split::Val => ds.val.push(sample),
            }
        }
        Ok(ds)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates `count` phantoms into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, count: usize) -> Result<()> {
    let dir = dir.as_ref();
    if count == 0 {
        return Err(Error::invalid("gen-data", "count must be >= 1"));
    }
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut manifest = String::new();
    for i in 0..count {
        let raw = generate_phantom_raw(spec, i)?;
        write_pgm(dir.join("images").join(format!("{}.pgm", raw.id)), &raw.image)?;
        let mask_img = GrayImage::new(raw.mask.width, raw.mask.height, raw.mask.labels.clone())?;
        write_pgm(dir.join("masks").join(format!("{}.pgm", raw.id)), &mask_img)?;
        manifest.push_str(&format!("{} {}\n", raw.id, split_of(i, count)));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// `(id, split)` pairs in file order.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<(String, Split)>> {
    let path = dir.as_ref().join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::invalid("manifest", format!("line {}: expected `id split`", n + 1)));
        };
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::invalid("manifest", format!("line {}: bad id {id:?}", n + 1)));
        }
        out.push((id.to_string(), split.parse()?));
    }
    Ok(out)
}

/// Loads and preprocesses every sample listed in the manifest to `size × size`.
pub fn load_dataset(dir: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found")));
    }
    let mut ds = Dataset::default();
    for (id, split) in read_manifest(dir)? {
        let image = read_pgm(dir.join("images").join(format!("{id}.pgm")))?;
        let raw_mask = read_pgm(dir.join("masks").join(format!("{id}.pgm")))?;
        if (raw_mask.width, raw_mask.height) != (image.width, image.height) {
            return Err(Error::shape(
                "load_dataset",
                format!("{id}: mask {}x{} vs image {}x{}", raw_mask.width, raw_mask.height, image.width, image.height),
            ));
        }
        let mask = LabelMap::new(raw_mask.width, raw_mask.height, raw_mask.pixels)?;
        let sample = Sample {
            id,
            image: preprocess(&image, size)?,
            mask: super::resize_mask_nearest(&mask, size)?,
        };
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighty_twenty() {
        let train = (0..250).filter(|&i| split_of(i, 250) == Split::Train).count();
        assert_eq!(train, 200);
        assert_eq!(split_of(7, 10), Split::Train);
        assert_eq!(split_of(8, 10), Split::Val);
    }

    #[test]
    fn disk_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { size: 32, seed: 5, ..Default::default() };
        write_dataset(dir.path(), &spec, 6).unwrap();
        let disk = load_dataset(dir.path(), 32).unwrap();
        let mem = Dataset::synthetic(&spec, 6).unwrap();
        assert_eq!(disk.train, mem.train);
        assert_eq!(disk.val, mem.val);
        assert_eq!(disk.train.len(), 4);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "0000 test\n").unwrap();
        assert!(read_manifest(dir.path()).is_err());
        std::fs::write(dir.path().join("manifest.txt"), "../x train\n").unwrap();
        assert!(read_manifest(dir.path()).is_err());
        assert!(load_dataset(dir.path().join("missing"), 16).is_err());
    }
}
