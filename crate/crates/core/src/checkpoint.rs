//! `SCLK1` checkpoints.
//!
//! Layout (little-endian): magic, eight `u32` config fields, `u32` tensor
//! count, then per tensor `u32` name length, name bytes, `u32` rank, `u64`
//! dims and raw `f64` values. A `u32`-length key=value manifest closes the
//! file. Tensor names carry a `backbone.` or `classifier.` prefix.

use std::path::Path;

use scl_autodiff::{ParamStore, Tensor};

use crate::binio::{Reader, Writer};
use crate::kv::KvMap;
use crate::model::{Backbone, LinearHead, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8] = b"SCLK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    /// The CE head from pre-training, kept so a teacher can emit logits.
    pub classifier: Option<LinearHead>,
    pub manifest: KvMap,
}

impl Checkpoint {
    pub fn new(backbone: Backbone, classifier: Option<LinearHead>, manifest: KvMap) -> Self {
        Self {
            backbone,
            classifier,
            manifest,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.backbone.config();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        for v in [
            c.input_channels,
            c.input_size,
            c.feature_dim,
            c.head_dim,
            c.spatial_side(),
            c.pool_target,
            c.conv_channels[0],
            c.conv_channels[1],
        ] {
            w.u32(v as u32);
        }
        let mut tensors: Vec<(String, &Tensor)> = self
            .backbone
            .store()
            .iter()
            .map(|p| (format!("backbone.{}", p.name), &p.value))
            .collect();
        if let Some(head) = &self.classifier {
            tensors.extend(head.store().iter().map(|p| (p.name.clone(), &p.value)));
        }
        w.u32(tensors.len() as u32);
        for (name, t) in tensors {
            w.len_prefixed(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.len_prefixed(self.manifest.to_text().as_bytes());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let mut f = [0usize; 8];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            input_channels: f[0],
            input_size: f[1],
            feature_dim: f[2],
            head_dim: f[3],
            pool_target: f[5],
            conv_channels: [f[6], f[7]],
        };
        if config.validate().is_err() || config.spatial_side() != f[4] {
            return Err(r.fail("inconsistent model config block"));
        }
        let count = r.u32()? as usize;
        let mut backbone = ParamStore::new();
        let mut classifier = ParamStore::new();
        for _ in 0..count {
            let start = r.offset();
            let name = r.utf8()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.fail(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > bytes.len() {
                return Err(r.fail(format!("tensor {name} larger than file")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            let t = Tensor::new(shape, data).expect("element count matches shape");
            let decay = t.rank() > 1;
            if let Some(rest) = name.strip_prefix("backbone.") {
                backbone.push(rest, t, decay);
            } else if name.starts_with("classifier.") {
                classifier.push(name, t, decay);
            } else {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("unknown tensor {name}"),
                });
            }
        }
        let manifest_at = r.offset();
        let manifest = KvMap::parse(&r.utf8()?).map_err(|e| Error::Format {
            offset: manifest_at,
            msg: format!("manifest: {e}"),
        })?;
        r.finish()?;
        let as_format = |e: Error| Error::Format {
            offset: 0,
            msg: e.to_string(),
        };
        let backbone = Backbone::from_store(config, backbone).map_err(as_format)?;
        let classifier = if classifier.is_empty() {
            None
        } else {
            Some(LinearHead::from_store(classifier).map_err(as_format)?)
        };
        Ok(Self {
            backbone,
            classifier,
            manifest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
