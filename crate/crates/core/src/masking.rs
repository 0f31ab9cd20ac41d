//! Span conditioning masks.
//!
//! A mask splits a length-`L` sequence into `n` contiguous spans whose
//! boundaries are `n − 1` distinct positions drawn uniformly from `1..L`.
//! Even spans are conditioning (1) and odd spans infill (0); the whole mask
//! is then flipped with probability one half. One span means unconditional
//! generation: the mask is all zeros.

use rand::seq::index;
use rand::Rng;

use crate::error::{Result, SedError};
use crate::real::Real;
use crate::tensor::Matrix;

/// Per-position flags; `true` marks a conditioning position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditioningMask(pub Vec<bool>);

impl ConditioningMask {
    pub fn unconditional(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_conditioning(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn any_conditioning(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn conditioning_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `1.0` on conditioning positions, `0.0` elsewhere.
    pub fn as_channel<T: Real>(&self) -> Vec<T> {
        self.0
            .iter()
            .map(|&b| if b { T::ONE } else { T::ZERO })
            .collect()
    }

    /// Serialises as a string of `0`/`1`.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(SedError::Format {
                    what: "mask",
                    detail: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// A sampled mask together with the draw that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanDraw {
    /// Number of spans.
    pub spans: usize,
    /// Sorted span starts `0 < i_1 < … < i_{n−1} < L`.
    pub starts: Vec<usize>,
    pub flipped: bool,
    pub mask: ConditioningMask,
}

/// Samples a span mask with up to `max_spans` spans and returns the
/// intermediate draw.
pub fn sample_span_draw<R: Rng + ?Sized>(
    len: usize,
    max_spans: usize,
    rng: &mut R,
) -> Result<SpanDraw> {
    if max_spans == 0 || max_spans > len {
        return Err(SedError::InvalidArgument(format!(
            "max span count {max_spans} must lie in [1, {len}]"
        )));
    }
    let spans = rng.random_range(1..=max_spans);
    if spans == 1 {
        return Ok(SpanDraw {
            spans,
            starts: Vec::new(),
            flipped: false,
            mask: ConditioningMask::unconditional(len),
        });
    }
    let mut starts: Vec<usize> = index::sample(rng, len - 1, spans - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    starts.sort_unstable();
    let flipped = rng.random_bool(0.5);
    let mut bits = vec![false; len];
    let mut span = 0;
    let mut next = 0;
    for (pos, bit) in bits.iter_mut().enumerate() {
        while next < starts.len() && starts[next] == pos {
            span += 1;
            next += 1;
        }
        *bit = (span % 2 == 0) != flipped;
    }
    Ok(SpanDraw {
        spans,
        starts,
        flipped,
        mask: ConditioningMask(bits),
    })
}

pub fn sample_mask<R: Rng + ?Sized>(
    len: usize,
    max_spans: usize,
    rng: &mut R,
) -> Result<ConditioningMask> {
    sample_span_draw(len, max_spans, rng).map(|d| d.mask)
}

/// Rows of `clean` at conditioning positions, rows of `x_t` elsewhere.
pub fn apply_conditioning<T: Real>(
    x_t: &Matrix<T>,
    clean: &Matrix<T>,
    mask: &ConditioningMask,
) -> Matrix<T> {
    assert_eq!(x_t.shape(), clean.shape(), "conditioning shape mismatch");
    assert_eq!(x_t.rows(), mask.len(), "mask length mismatch");
    let mut out = x_t.clone();
    for i in (0..mask.len()).filter(|&i| mask.is_conditioning(i)) {
        out.row_mut(i).copy_from_slice(clean.row(i));
    }
    out
}

/// Zeroes the conditioning positions: the null conditioning label.
pub fn null_conditioning<T: Real>(x: &Matrix<T>, mask: &ConditioningMask) -> Matrix<T> {
    assert_eq!(x.rows(), mask.len(), "mask length mismatch");
    let mut out = x.clone();
    for i in (0..mask.len()).filter(|&i| mask.is_conditioning(i)) {
        out.row_mut(i).iter_mut().for_each(|v| *v = T::ZERO);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_span_is_unconditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = sample_mask(16, 1, &mut rng).unwrap();
            assert!(!m.any_conditioning());
            assert_eq!(m.len(), 16);
        }
    }

    #[test]
    fn bad_span_counts_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(4, 5, &mut rng).is_err());
        assert!(sample_mask(4, 0, &mut rng).is_err());
    }

    #[test]
    fn spans_alternate_between_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let d = sample_span_draw(20, 6, &mut rng).unwrap();
            assert_eq!(d.starts.len(), d.spans - 1);
            assert!(d.starts.windows(2).all(|w| w[0] < w[1]));
            assert!(d.starts.iter().all(|&s| s > 0 && s < 20));
            if d.spans == 1 {
                continue;
            }
            let first = d.mask.0[0];
            assert_eq!(first, !d.flipped);
            // the mask changes value exactly at the span starts
            let changes: Vec<usize> = (1..20).filter(|&i| d.mask.0[i] != d.mask.0[i - 1]).collect();
            assert_eq!(changes, d.starts);
        }
    }

    #[test]
    fn conditioning_selection() {
        let x = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let c = Matrix::from_fn(3, 2, |i, j| -((i * 2 + j) as f64) - 10.0);
        let none = ConditioningMask(vec![false; 3]);
        let all = ConditioningMask(vec![true; 3]);
        let mixed = ConditioningMask(vec![true, false, true]);
        assert_eq!(apply_conditioning(&x, &c, &none), x);
        assert_eq!(apply_conditioning(&x, &c, &all), c);
        assert_eq!(null_conditioning(&x, &none), x);
        assert_eq!(null_conditioning(&x, &all), Matrix::zeros(3, 2));
        let out = apply_conditioning(&x, &c, &mixed);
        for i in 0..3 {
            for j in 0..2 {
                let expect = if mixed.0[i] { c[(i, j)] } else { x[(i, j)] };
                assert_eq!(out[(i, j)], expect);
            }
        }
        assert_eq!(apply_conditioning(&out, &c, &mixed), out);
    }

    #[test]
    fn bit_string_roundtrip() {
        let m = ConditioningMask(vec![true, false, false, true]);
        assert_eq!(m.to_bit_string(), "1001");
        assert_eq!(ConditioningMask::from_bit_string("1001").unwrap(), m);
        assert!(ConditioningMask::from_bit_string("10x").is_err());
    }
}
