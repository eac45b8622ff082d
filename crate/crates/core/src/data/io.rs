//! `SCLD1` dataset files.
//!
//! Layout (little-endian): magic; `u32` channels, height, width, image
//! count and class count; a `u32`-length key=value header of generator
//! parameters; train, val and test class tables (`u32` count then ids);
//! `u32` labels; `f32` pixels.

use std::path::Path;

use super::{ImageShape, LabeledImage, MetaDataset};
use crate::binio::{Reader, Writer};
use crate::kv::KvMap;
use crate::{Error, Result};

const MAGIC: &[u8] = b"SCLD1";

impl MetaDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        for v in [
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.images.len(),
            self.n_classes,
        ] {
            w.u32(v as u32);
        }
        w.len_prefixed(self.params.to_text().as_bytes());
        for split in [&self.train_classes, &self.val_classes, &self.test_classes] {
            w.u32(split.len() as u32);
            for &c in split {
                w.u32(c as u32);
            }
        }
        for img in &self.images {
            w.u32(img.label as u32);
        }
        for img in &self.images {
            for &p in &img.pixels {
                w.f32(p);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let mut head = [0usize; 5];
        for v in head.iter_mut() {
            *v = r.u32()? as usize;
        }
        let [channels, height, width, n_images, n_classes] = head;
        let shape = ImageShape {
            channels,
            height,
            width,
        };
        let params_at = r.offset();
        let params = KvMap::parse(&r.utf8()?).map_err(|e| Error::Format {
            offset: params_at,
            msg: format!("parameter header: {e}"),
        })?;
        let mut splits: [Vec<usize>; 3] = Default::default();
        for (name, split) in ["train", "val", "test"].iter().zip(splits.iter_mut()) {
            let at = r.offset();
            let n = r.u32()? as usize;
            if n > n_classes {
                return Err(r.fail(format!("{name} split lists {n} of {n_classes} classes")));
            }
            for _ in 0..n {
                let c = r.u32()? as usize;
                if c >= n_classes {
                    return Err(r.fail(format!("{name} class {c} out of range")));
                }
                split.push(c);
            }
            if n == 0 && *name != "val" {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("empty {name} split"),
                });
            }
        }
        let pixel_bytes = n_images
            .checked_mul(shape.len())
            .and_then(|n| n.checked_mul(4));
        if pixel_bytes.is_none_or(|n| n > bytes.len()) {
            return Err(r.fail(format!(
                "{n_images} images of {shape:?} exceed the file size"
            )));
        }
        let mut labels = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let l = r.u32()? as usize;
            if l >= n_classes {
                return Err(r.fail(format!("label {l} out of range")));
            }
            labels.push(l);
        }
        let mut images = Vec::with_capacity(n_images);
        for label in labels {
            let mut pixels = Vec::with_capacity(shape.len());
            for _ in 0..shape.len() {
                pixels.push(r.f32()?);
            }
            images.push(LabeledImage { pixels, label });
        }
        r.finish()?;
        let [train_classes, val_classes, test_classes] = splits;
        let ds = MetaDataset {
            shape,
            n_classes,
            images,
            train_classes,
            val_classes,
            test_classes,
            params,
        };
        ds.validate().map_err(|e| Error::Format {
            offset: 0,
            msg: e.to_string(),
        })?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use crate::data::{synth_generate, SynthConfig};
    use crate::Error;

    use super::*;

    fn small() -> MetaDataset {
        synth_generate(&SynthConfig::new(12, 3, 8, 2)).unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = MetaDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = small().to_bytes();
        let full = bytes.clone();
        bytes[2] = 0;
        assert!(matches!(
            MetaDataset::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        match MetaDataset::from_bytes(&full[..full.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_split_rejected() {
        let mut ds = small();
        ds.images.retain(|i| !ds.test_classes.contains(&i.label));
        ds.test_classes.clear();
        assert!(matches!(
            MetaDataset::from_bytes(&ds.to_bytes()),
            Err(Error::Format { .. })
        ));
    }
}
