//! Versioned binary container for a trained model.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      4 bytes  "SPCK"
//! version    u32
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_params   u32
//! repeated n_params times:
//!   name_len u32
//!   name     name_len bytes UTF-8
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f64, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, SurvPathModel};
use crate::param::ParamStore;
use crate::pathway::{Granularity, NormStats, PathwayDefinition};
use crate::survival::BinEdges;

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

/// Everything besides the weights needed to run a model on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub granularity: Granularity,
    pub genes: Vec<String>,
    pub pathways: Vec<PathwayDefinition>,
    pub norm: NormStats,
    pub bins: BinEdges,
    pub embed_dim: usize,
    pub fold: usize,
    /// Epoch whose weights were kept, `None` for an untrained model.
    pub best_epoch: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(meta.len() + 8 * self.store.total_elements() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_len(&mut out, self.store.len())?;
        for (_, p) in self.store.iter() {
            put_len(&mut out, p.name().len())?;
            out.extend_from_slice(p.name().as_bytes());
            put_len(&mut out, p.value().rows())?;
            put_len(&mut out, p.value().cols())?;
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let n = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Matrix::from_vec(rows, cols, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Length(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_model(model: &SurvPathModel, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            store: model.store.clone(),
        }
    }

    pub fn into_model(self) -> Result<SurvPathModel> {
        SurvPathModel::from_store(
            self.meta.model,
            self.store,
            self.meta.pathways,
            self.meta.genes.len(),
        )
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Size(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Length(format!(
                    "checkpoint truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathway::GeneIndex;

    fn sample() -> Checkpoint {
        let genes: Vec<String> = (0..6).map(|i| format!("G{i}")).collect();
        let index = GeneIndex::new(genes.clone()).unwrap();
        let defs = crate::pathway::filter_by_coverage(
            &[
                PathwayDefinition::new("A", ["G0", "G1", "G2"].map(String::from)),
                PathwayDefinition::new("B", ["G3", "G4", "G5"].map(String::from)),
            ],
            &index,
            0.9,
        )
        .unwrap();
        let config = ModelConfig {
            dim: 4,
            ..ModelConfig::default()
        };
        let model = SurvPathModel::new(config.clone(), defs.clone(), 6, 5, 3).unwrap();
        Checkpoint::from_model(
            &model,
            CheckpointMeta {
                model: config,
                granularity: Granularity::Hallmarks,
                genes,
                pathways: defs,
                norm: NormStats {
                    mean: vec![0.5; 6],
                    std: vec![2.0; 6],
                },
                bins: BinEdges {
                    edges: vec![1.0, 2.0, 3.0],
                },
                embed_dim: 5,
                fold: 0,
                best_epoch: Some(2),
                seed: 9,
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let model = back.into_model().unwrap();
        assert_eq!(model.n_pathways(), 2);
        assert_eq!(model.embed_dim(), 5);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Version {
                found: 7,
                expected: 1,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_magic_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Length(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
    }
}
