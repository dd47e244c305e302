//! Precomputed histology patch embeddings: file I/O, subsampling and the
//! learnable projection to the token width.
//!
//! File layout (`PFE1`), all integers little-endian:
//!
//! | bytes          | field                                  |
//! |----------------|----------------------------------------|
//! | 4              | magic `PFE1`                           |
//! | 4              | `u32` patch count N                    |
//! | 4              | `u32` embedding width e                |
//! | 1              | `u8` has_coords (0 or 1)               |
//! | 4·N·e          | `f32` embeddings, row-major            |
//! | 8·N (optional) | `i32` (x, y) per patch                 |

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamId, ParamStore};
use crate::rng::seeded;

pub const MAGIC: &[u8; 4] = b"PFE1";
const HEADER_LEN: usize = 13;
pub const DEFAULT_PATCH_SAMPLE: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingSet {
    pub slide_id: String,
    pub embeddings: Matrix,
    pub coords: Option<Vec<(i32, i32)>>,
}

impl PatchEmbeddingSet {
    pub fn new(
        slide_id: impl Into<String>,
        embeddings: Matrix,
        coords: Option<Vec<(i32, i32)>>,
    ) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::Data("a slide needs at least one patch".into()));
        }
        if let Some(c) = &coords {
            if c.len() != embeddings.rows() {
                return Err(Error::Length(format!(
                    "{} coordinates for {} patches",
                    c.len(),
                    embeddings.rows()
                )));
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            embeddings,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            slide_id: self.slide_id.clone(),
            embeddings: self.embeddings.select_rows(idx),
            coords: self
                .coords
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

pub fn encode_embeddings(set: &PatchEmbeddingSet) -> Vec<u8> {
    let (n, e) = set.embeddings.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * e + 8 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(e as u32).to_le_bytes());
    buf.push(u8::from(set.coords.is_some()));
    for &v in set.embeddings.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(coords) = &set.coords {
        for &(x, y) in coords {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8], slide_id: &str) -> Result<PatchEmbeddingSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected `PFE1`",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, e) = (u32_at(4), u32_at(8));
    let has_coords = match bytes[12] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("has_coords byte is {b}"))),
    };
    let payload = 4 * n * e;
    let expected = HEADER_LEN + payload + if has_coords { 8 * n } else { 0 };
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "header advertises {n}x{e} (coords: {has_coords}) = {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let coords = has_coords.then(|| {
        bytes[HEADER_LEN + payload..]
            .chunks_exact(8)
            .map(|c| {
                (
                    i32::from_le_bytes(c[..4].try_into().unwrap()),
                    i32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect()
    });
    PatchEmbeddingSet::new(slide_id, Matrix::from_vec(n, e, data)?, coords)
}

/// Read a `PFE1` file; the slide id is the file stem.
pub fn load_embeddings(path: &Path) -> Result<PatchEmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let slide = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_embeddings(&bytes, &slide).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Length(m) => Error::Length(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_embeddings(path: &Path, set: &PatchEmbeddingSet) -> Result<()> {
    fs::write(path, encode_embeddings(set)).map_err(|e| Error::io(path, e))
}

/// Sorted indices of `k` patches drawn uniformly without replacement, or
/// all indices when `n <= k`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Contract(
            "patch sample size must be at least 1".into(),
        ));
    }
    if n <= k {
        return Ok((0..n).collect());
    }
    let mut rng = seeded(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample(set: &PatchEmbeddingSet, k: usize, seed: u64) -> Result<PatchEmbeddingSet> {
    if set.len() <= k {
        if k == 0 {
            return Err(Error::Contract(
                "patch sample size must be at least 1".into(),
            ));
        }
        return Ok(set.clone());
    }
    Ok(set.select(&subsample_indices(set.len(), k, seed)?))
}

/// Affine map from the embedding width to the token width.
#[derive(Debug, Clone)]
pub struct PatchProjector {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    dim: usize,
}

impl PatchProjector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_glorot("patch.w", in_dim, dim, rng)?,
            bias: store.add("patch.b", Matrix::zeros(1, dim))?,
            in_dim,
            dim,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let weight = store
            .id("patch.w")
            .ok_or_else(|| Error::Data("checkpoint lacks `patch.w`".into()))?;
        let bias = store
            .id("patch.b")
            .ok_or_else(|| Error::Data("checkpoint lacks `patch.b`".into()))?;
        let (in_dim, dim) = store.value(weight).shape();
        Ok(Self {
            weight,
            bias,
            in_dim,
            dim,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embeddings: Var,
    ) -> Result<Var> {
        let e = tape.value(embeddings).cols();
        if e != self.in_dim {
            return Err(Error::Contract(format!(
                "patch embeddings have width {e}, projector expects {}",
                self.in_dim
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(embeddings, w)?;
        tape.add_row(h, b)
    }

    pub fn project(&self, store: &ParamStore, set: &PatchEmbeddingSet) -> Result<Matrix> {
        let mut tape = Tape::with_mode(Mode::Eval);
        let x = tape.leaf(set.embeddings.clone());
        let y = self.project_on_tape(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_set(n: usize, e: usize, seed: u64, coords: bool) -> PatchEmbeddingSet {
        let mut rng = seeded(seed);
        let data = (0..n * e)
            .map(|_| rng.random::<f32>() as f64 - 0.5)
            .collect();
        let coords = coords.then(|| (0..n as i32).map(|i| (i * 256, -i)).collect());
        PatchEmbeddingSet::new("s", Matrix::from_vec(n, e, data).unwrap(), coords).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for coords in [false, true] {
            let set = random_set(5, 8, 1, coords);
            let back = decode_embeddings(&encode_embeddings(&set), "s").unwrap();
            assert_eq!(back, set);
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_embeddings(&random_set(2, 2, 1, false));
        bytes[0] = b'X';
        assert!(matches!(
            decode_embeddings(&bytes, "s"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let set = random_set(10, 4, 2, false);
        let mut bytes = encode_embeddings(&set);
        bytes.truncate(bytes.len() - 16);
        assert!(matches!(
            decode_embeddings(&bytes, "s"),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn subsample_small_set_is_identity() {
        let set = random_set(3, 2, 3, false);
        assert_eq!(subsample(&set, 5, 9).unwrap(), set);
    }

    #[test]
    fn subsample_is_deterministic() {
        let a = subsample_indices(100, 10, 42).unwrap();
        assert_eq!(a, subsample_indices(100, 10, 42).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn subsample_frequencies_are_uniform() {
        let mut counts = [0usize; 20];
        for seed in 0..10_000u64 {
            for i in subsample_indices(20, 5, seed).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((2350..=2650).contains(&c), "count {c}");
        }
    }

    #[test]
    fn zero_sample_size_is_rejected() {
        assert!(subsample_indices(4, 0, 1).is_err());
    }

    #[test]
    fn identity_projector_and_bias_broadcast() {
        let mut store = ParamStore::new();
        let p = PatchProjector::new(&mut store, 3, 3, &mut seeded(0)).unwrap();
        *store.value_mut(p.weight()) = Matrix::identity(3);
        let set = random_set(4, 3, 5, false);
        assert_eq!(p.project(&store, &set).unwrap(), set.embeddings);

        *store.value_mut(p.bias()) = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        let zeros = PatchEmbeddingSet::new("z", Matrix::zeros(4, 3), None).unwrap();
        let out = p.project(&store, &zeros).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn projector_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let p = PatchProjector::new(&mut store, 3, 2, &mut seeded(0)).unwrap();
        assert!(matches!(
            p.project(&store, &random_set(2, 4, 1, false)),
            Err(Error::Contract(_))
        ));
    }
}
