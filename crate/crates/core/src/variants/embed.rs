//! Signed feature-hashing embedder for variant text.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptParams, Variant};
use crate::error::{Error, Result};
use crate::numkit::{normalize_in_place, stable_hash, Matrix};

const PROJECTION_SEED: u64 = 0x00e3_b0c4_4298_fc1c;

/// Hashes lowercase alphanumeric tokens into `dim` signed buckets, adds a
/// fixed random projection of the raw features, and L2-normalizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    dim: usize,
    projection: Matrix,
}

impl Embedder {
    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        Self {
            dim,
            projection: Matrix::glorot(dim, PromptParams::encoded_len(), &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    /// Bucket and sign for one token.
    pub fn token_bucket(&self, token: &str) -> (usize, f64) {
        let h = stable_hash(token.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        (bucket, sign)
    }

    /// Signed bag-of-tokens vector before projection and normalization.
    pub fn bag_of_tokens(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in Self::tokens(text) {
            let (b, s) = self.token_bucket(&token);
            v[b] += s;
        }
        v
    }

    pub fn embed(&self, text: &str, raw_features: &[f64]) -> Result<Vec<f64>> {
        if Self::tokens(text).next().is_none() {
            return Err(Error::Validation("variant text has no tokens".into()));
        }
        if raw_features.len() != self.projection.cols() {
            return Err(Error::dim(
                "variant raw features",
                self.projection.cols(),
                raw_features.len(),
            ));
        }
        let mut v = self.bag_of_tokens(text);
        for (x, p) in v.iter_mut().zip(self.projection.matvec(raw_features)) {
            *x += p;
        }
        if normalize_in_place(&mut v) == 0.0 {
            return Err(Error::Numeric("variant embedding collapsed to zero".into()));
        }
        Ok(v)
    }
}

/// `embed_variant(v)`: the variant's unit-norm embedding.
pub fn embed_variant(embedder: &Embedder, variant: &Variant) -> Result<Vec<f64>> {
    embedder.embed(&variant.text, &variant.raw_features)
}
