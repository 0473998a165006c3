//! Deterministic stand-in for pretrained word vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// FNV-1a, fixed across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-length vector seeded by a hash of `token`.
pub fn pseudo_embed(token: &str, dim: usize) -> Result<Vec<f64>> {
    if token.is_empty() {
        return Err(Error::EmptyToken);
    }
    if dim == 0 {
        return Err(Error::InvalidArgument {
            op: "pseudo_embed",
            msg: "dim must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Whitespace-tokenized sentence as a `[tokens, dim]` matrix.
pub fn embed_sentence(text: &str, dim: usize) -> Result<Tensor> {
    let rows = text
        .split_whitespace()
        .map(|t| pseudo_embed(t, dim))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyToken);
    }
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_unit_and_distinct() {
        let a = pseudo_embed("car", 300).unwrap();
        assert_eq!(a, pseudo_embed("car", 300).unwrap());
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, pseudo_embed("cat", 300).unwrap());
        assert!(matches!(pseudo_embed("", 4), Err(Error::EmptyToken)));
    }

    #[test]
    fn sentences() {
        let t = embed_sentence("which car turned", 8).unwrap();
        assert_eq!(t.shape(), &[3, 8]);
        assert!(embed_sentence("   ", 8).is_err());
    }
}
