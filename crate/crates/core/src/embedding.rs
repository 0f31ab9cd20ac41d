//! The fixed diffusion space `E` and the learnable readout `R`.
//!
//! Every embedding row has L2 norm `√D`, matching the expected norm of a
//! standard Gaussian sample in `D` dimensions. `E` never changes after
//! construction; `R` starts as a copy of `E` and is trained on its own.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Result, SedError};
use crate::real::Real;
use crate::tensor::Matrix;

/// Which diffusion space to build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    #[default]
    Random,
    Pretrained,
    Bits,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Pretrained => "pretrained",
            Self::Bits => "bits",
        }
    }
}

impl FromStr for SpaceKind {
    type Err = SedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "pretrained" => Ok(Self::Pretrained),
            "bits" => Ok(Self::Bits),
            other => Err(SedError::InvalidArgument(format!(
                "unknown space kind {other:?} (expected random, pretrained or bits)"
            ))),
        }
    }
}

/// `V × D` token embeddings, one row per token, each of norm `√D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    values: Matrix<f64>,
}

/// Smallest `D` with `2^D ≥ V`.
pub fn bits_dimension(vocab_size: usize) -> usize {
    let mut d = 0;
    while (1usize << d) < vocab_size {
        d += 1;
    }
    d.max(1)
}

impl EmbeddingMatrix {
    /// Rescales every row to norm `√D`. Errors on an all-zero row.
    pub fn from_rows_normalized(mut values: Matrix<f64>) -> Result<Self> {
        if values.rows() < 2 || values.cols() < 1 {
            return Err(SedError::InvalidArgument(format!(
                "embedding needs V >= 2 and D >= 1, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        let target = (values.cols() as f64).sqrt();
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(SedError::InvalidArgument(format!(
                    "embedding row {r} has norm {norm}"
                )));
            }
            let k = target / norm;
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(Self { values })
    }

    /// Isotropic Gaussian rows rescaled to norm `√D`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Matrix::from_fn(vocab_size, dim, |_, _| rng.sample(StandardNormal));
        Self::from_rows_normalized(values)
    }

    /// Row `k` is the binary expansion of `k` (most significant bit first)
    /// mapped `0 → −1`, `1 → +1`.
    pub fn bits(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(SedError::InvalidArgument(format!(
                "bits space needs V >= 2, got {vocab_size}"
            )));
        }
        let dim = bits_dimension(vocab_size);
        let values = Matrix::from_fn(vocab_size, dim, |k, j| {
            if (k >> (dim - 1 - j)) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        });
        Ok(Self { values })
    }

    /// Rounds every value to the nearest `f32`. The result survives a
    /// 32-bit save and [`Self::from_stored_rows`] bit for bit.
    pub fn round_to_f32(&self) -> Self {
        Self {
            values: self.values.map(|v| v as f32 as f64),
        }
    }

    /// Accepts rows as stored, checking the norm invariant to `1e-5`
    /// relative instead of rescaling.
    pub fn from_stored_rows(values: Matrix<f64>) -> Result<Self> {
        let target = (values.cols() as f64).sqrt();
        for (r, row) in values.iter_rows().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - target).abs() <= 1e-5 * target) {
                return Err(SedError::Format {
                    what: "embedding",
                    detail: format!("row {r} has norm {norm}, expected {target}"),
                });
            }
        }
        if values.rows() < 2 {
            return Err(SedError::InvalidArgument("embedding needs V >= 2".into()));
        }
        Ok(Self { values })
    }

    pub fn vocab_size(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<f64> {
        &self.values
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.values.row(token)
    }

    pub fn cast<T: Real>(&self) -> Matrix<T> {
        self.values.cast()
    }

    /// Rows `E[w_i]`, one per token, without noise.
    pub fn lookup<T: Real>(&self, seq: &[usize]) -> Matrix<T> {
        let d = self.dim();
        let mut out = Matrix::zeros(seq.len(), d);
        for (i, &w) in seq.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(self.values.row(w)) {
                *o = T::from_f64(v);
            }
        }
        out
    }

    /// Header `SEDEMB 1 <V> <D>` and a newline, then `V·D` little-endian
    /// `f32` values, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("SEDEMB 1 {} {}\n", self.vocab_size(), self.dim()).into_bytes();
        out.reserve(self.values.len() * 4);
        for &v in self.values.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses an embedding file and renormalises its rows. When
    /// `expected_vocab` is given the row count must match it.
    pub fn from_bytes(bytes: &[u8], expected_vocab: Option<usize>) -> Result<Self> {
        let bad = |detail: String| SedError::Format {
            what: "embedding file",
            detail,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "SEDEMB" || fields[1] != "1" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let v: usize = fields[2].parse().map_err(|_| bad("bad V".into()))?;
        let d: usize = fields[3].parse().map_err(|_| bad("bad D".into()))?;
        if let Some(expect) = expected_vocab {
            if expect != v {
                return Err(bad(format!(
                    "file has V = {v} but the vocabulary has {expect} entries"
                )));
            }
        }
        let body = &bytes[nl + 1..];
        if body.len() != v * d * 4 {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                v * d * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_rows_normalized(Matrix::from_vec(v, d, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| SedError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| SedError::io(path, e))
    }

    pub fn load(path: &Path, expected_vocab: Option<usize>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SedError::io(path, e))?;
        Self::from_bytes(&bytes, expected_vocab)
    }
}

/// The trainable `V × D` logits map. Initialised as a copy of `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutMatrix<T> {
    pub values: Matrix<T>,
}

impl<T: Real> ReadoutMatrix<T> {
    pub fn from_embedding(e: &EmbeddingMatrix) -> Self {
        Self { values: e.cast() }
    }

    pub fn vocab_size(&self) -> usize {
        self.values.rows()
    }
}

/// `x_0 = E[w] + σ0·ε`: the discrete-to-continuous step.
pub fn embed_tokens<T: Real, R: Rng + ?Sized>(
    seq: &[usize],
    e: &EmbeddingMatrix,
    sigma0: f64,
    rng: &mut R,
) -> Matrix<T> {
    let mut x = Matrix::zeros(seq.len(), e.dim());
    for (i, &w) in seq.iter().enumerate() {
        for (o, &v) in x.row_mut(i).iter_mut().zip(e.row(w)) {
            let noise: f64 = if sigma0 > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            *o = T::from_f64(v + sigma0 * noise);
        }
    }
    x
}

/// `x · Rᵀ`, one row of `V` logits per position.
pub fn logits<T: Real>(x: &Matrix<T>, readout: &Matrix<T>) -> Matrix<T> {
    x.matmul_t(readout)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax of the readout logits at every position.
pub fn decode_argmax<T: Real>(x: &Matrix<T>, readout: &Matrix<T>) -> TokenSeq {
    let l = logits(x, readout);
    TokenSeq(l.iter_rows().map(argmax).collect())
}

/// Squared Euclidean distances from `point` to every embedding row, up to a
/// constant shared by all rows.
fn relative_sq_distances(e: &EmbeddingMatrix, norms: &[f64], point: &[f64]) -> Vec<f64> {
    let v = e.values();
    (0..v.rows())
        .map(|k| {
            let dot: f64 = v.row(k).iter().zip(point).map(|(a, b)| a * b).sum();
            norms[k] - 2.0 * dot
        })
        .collect()
}

fn row_norms(e: &EmbeddingMatrix) -> Vec<f64> {
    e.values()
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// The `k` embedding rows closest to row `token`, nearest first, ties by
/// lowest id. The token itself comes first.
pub fn nearest_neighbors(e: &EmbeddingMatrix, token: usize, k: usize) -> Vec<usize> {
    let norms = row_norms(e);
    let d = relative_sq_distances(e, &norms, e.row(token));
    let mut ids: Vec<usize> = (0..e.vocab_size()).collect();
    ids.sort_by(|&a, &b| {
        // the query row is exactly at distance zero
        let da = if a == token { f64::NEG_INFINITY } else { d[a] };
        let db = if b == token { f64::NEG_INFINITY } else { d[b] };
        da.total_cmp(&db).then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Nearest embedding row (Euclidean) to every row of `x`.
pub fn nearest_tokens<T: Real>(x: &Matrix<T>, e: &EmbeddingMatrix) -> Vec<usize> {
    let norms = row_norms(e);
    x.iter_rows()
        .map(|row| {
            let point: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
            let d = relative_sq_distances(e, &norms, &point);
            let mut best = 0;
            for (k, &dk) in d.iter().enumerate().skip(1) {
                if dk < d[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Rank of the nearest token to `x[i]` within the `k` nearest neighbors of
/// `reference[i]`, or `k` when it is not among them.
pub fn nn_ranks<T: Real>(
    x: &Matrix<T>,
    reference: &[usize],
    e: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    if k > e.vocab_size() {
        return Err(SedError::InvalidArgument(format!(
            "K = {k} exceeds vocabulary size {}",
            e.vocab_size()
        )));
    }
    if x.rows() != reference.len() || x.cols() != e.dim() {
        return Err(SedError::Shape(format!(
            "x is {:?}, reference has {} tokens, D = {}",
            x.shape(),
            reference.len(),
            e.dim()
        )));
    }
    let nearest = nearest_tokens(x, e);
    let mut cache: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    Ok(nearest
        .iter()
        .zip(reference)
        .map(|(&w, &w0)| {
            let nn = cache
                .entry(w0)
                .or_insert_with(|| nearest_neighbors(e, w0, k));
            nn.iter().position(|&c| c == w).unwrap_or(k)
        })
        .collect())
}
