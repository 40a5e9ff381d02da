//! Multi-modal state fusion: `s = MLP([u; c; e_A; e_B])`.
//!
//! The fusion network is a three-layer tanh/tanh/linear MLP. Block order in
//! the concatenation is fixed, so the encoder is sensitive to which variant
//! sits in slot A.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{all_finite, Mlp, MlpCache, MlpGrads};

/// Dimensions shared by every learned component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub user: usize,
    pub context: usize,
    pub embedding: usize,
    pub state: usize,
    pub hidden: usize,
    pub memory: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            user: 16,
            context: 8,
            embedding: 32,
            state: 32,
            hidden: 64,
            memory: 16,
        }
    }
}

impl Dims {
    pub fn fusion_input(&self) -> usize {
        self.user + self.context + 2 * self.embedding
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub timestamp: u64,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub s: Vec<f64>,
    pub user_id: UserId,
    pub step: u64,
}

/// Raw blocks fed to the fusion network, kept so states can be re-encoded
/// after the encoder moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    pub e_a: Vec<f64>,
    pub e_b: Vec<f64>,
}

impl FusionInput {
    pub fn concat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.u.len() + self.c.len() + self.e_a.len() + self.e_b.len());
        x.extend_from_slice(&self.u);
        x.extend_from_slice(&self.c);
        x.extend_from_slice(&self.e_a);
        x.extend_from_slice(&self.e_b);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: Dims,
    pub fusion: Mlp,
}

/// Gradients with respect to each input block.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub du: Vec<f64>,
    pub dc: Vec<f64>,
    pub de_a: Vec<f64>,
    pub de_b: Vec<f64>,
}

impl InputGrads {
    pub fn concat(&self) -> Vec<f64> {
        [&self.du[..], &self.dc, &self.de_a, &self.de_b].concat()
    }
}

pub struct EncoderCache {
    mlp: MlpCache,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Result<Self> {
        let fusion = Mlp::new(
            &[dims.fusion_input(), dims.hidden, dims.hidden, dims.state],
            rng,
        )?;
        Ok(Self { dims, fusion })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        let fusion = Mlp::zeros(&[dims.fusion_input(), dims.hidden, dims.hidden, dims.state])?;
        Ok(Self { dims, fusion })
    }

    fn check_blocks(&self, u: &[f64], c: &[f64], e_a: &[f64], e_b: &[f64]) -> Result<()> {
        let d = &self.dims;
        for (name, expected, got) in [
            ("user block u", d.user, u.len()),
            ("context block c", d.context, c.len()),
            ("variant A embedding", d.embedding, e_a.len()),
            ("variant B embedding", d.embedding, e_b.len()),
        ] {
            if expected != got {
                return Err(Error::Dimension {
                    context: name.into(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn encode(
        &self,
        profile: &UserProfile,
        context: &ContextFeatures,
        e_a: &[f64],
        e_b: &[f64],
    ) -> Result<(State, EncoderCache)> {
        self.check_blocks(&profile.u, &context.c, e_a, e_b)?;
        let x = [&profile.u[..], &context.c, e_a, e_b].concat();
        let (s, mlp) = self.fusion.forward(&x)?;
        if !all_finite(&s) {
            return Err(Error::Numeric("encoded state".into()));
        }
        Ok((
            State {
                s,
                user_id: profile.user_id,
                step: context.timestamp,
            },
            EncoderCache { mlp },
        ))
    }

    /// Encodes a stored [`FusionInput`].
    pub fn encode_input(&self, input: &FusionInput) -> Result<(Vec<f64>, EncoderCache)> {
        self.check_blocks(&input.u, &input.c, &input.e_a, &input.e_b)?;
        let (s, mlp) = self.fusion.forward(&input.concat())?;
        Ok((s, EncoderCache { mlp }))
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        upstream: &[f64],
    ) -> Result<(EncoderGrads, InputGrads)> {
        if cache.mlp.input().len() != self.dims.fusion_input() {
            return Err(Error::Contract(
                "encoder cache does not match the encoder dimensions".into(),
            ));
        }
        let (g, dx) = self.fusion.backward(&cache.mlp, upstream)?;
        let d = &self.dims;
        let (du, rest) = dx.split_at(d.user);
        let (dc, rest) = rest.split_at(d.context);
        let (de_a, de_b) = rest.split_at(d.embedding);
        Ok((
            EncoderGrads { fusion: g },
            InputGrads {
                du: du.to_vec(),
                dc: dc.to_vec(),
                de_a: de_a.to_vec(),
                de_b: de_b.to_vec(),
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub fusion: MlpGrads,
}

/// `encode_state(params, u, c, e_A, e_B)`.
pub fn encode_state(
    params: &EncoderParams,
    profile: &UserProfile,
    context: &ContextFeatures,
    e_a: &[f64],
    e_b: &[f64],
) -> Result<(State, EncoderCache)> {
    params.encode(profile, context, e_a, e_b)
}

/// `encode_grad(params, cache, upstream)`.
pub fn encode_grad(
    params: &EncoderParams,
    cache: &EncoderCache,
    upstream: &[f64],
) -> Result<(EncoderGrads, InputGrads)> {
    params.backward(cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Parameterized;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> Dims {
        Dims {
            user: 3,
            context: 2,
            embedding: 4,
            state: 5,
            hidden: 6,
            memory: 4,
        }
    }

    fn inputs(d: &Dims, rng: &mut ChaCha8Rng) -> (UserProfile, ContextFeatures, Vec<f64>, Vec<f64>) {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        (
            UserProfile {
                user_id: UserId(7),
                u: v(d.user),
            },
            ContextFeatures {
                timestamp: 3,
                c: v(d.context),
            },
            v(d.embedding),
            v(d.embedding),
        )
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let d = small_dims();
        let enc = EncoderParams::zeros(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, c, a, b) = inputs(&d, &mut rng);
        let (s, _) = enc.encode(&u, &c, &a, &b).unwrap();
        assert_eq!(s.s, vec![0.0; d.state]);
        assert_eq!(s.user_id, UserId(7));
        assert_eq!(s.step, 3);
    }

    #[test]
    fn swapping_variants_changes_the_state() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderParams::new(d, &mut rng).unwrap();
        let (u, c, a, b) = inputs(&d, &mut rng);
        let (s1, _) = enc.encode(&u, &c, &a, &b).unwrap();
        let (s2, _) = enc.encode(&u, &c, &b, &a).unwrap();
        assert_ne!(s1.s, s2.s);
    }

    #[test]
    fn matches_straight_line_recomputation() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::new(d, &mut rng).unwrap();
        let (u, c, a, b) = inputs(&d, &mut rng);
        let (s, _) = enc.encode(&u, &c, &a, &b).unwrap();

        let mut h: Vec<f64> = u.u.iter().chain(&c.c).chain(&a).chain(&b).copied().collect();
        let n = enc.fusion.layers().len();
        for (k, layer) in enc.fusion.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim()];
            for (r, out) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[r];
                for (col, hv) in h.iter().enumerate() {
                    acc += layer.weight.get(r, col) * hv;
                }
                *out = if k + 1 < n { acc.tanh() } else { acc };
            }
            h = next;
        }
        for (x, y) in s.s.iter().zip(&h) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_error_names_the_block() {
        let d = small_dims();
        let enc = EncoderParams::zeros(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (u, c, a, _) = inputs(&d, &mut rng);
        match enc.encode(&u, &c, &a, &[0.0; 2]) {
            Err(Error::Dimension { context, .. }) => assert!(context.contains("variant B")),
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn zero_upstream_and_block_shapes() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::new(d, &mut rng).unwrap();
        let (u, c, a, b) = inputs(&d, &mut rng);
        let (_, cache) = enc.encode(&u, &c, &a, &b).unwrap();
        let (g, blocks) = enc.backward(&cache, &vec![0.0; d.state]).unwrap();
        assert!(g.fusion.flat_params().iter().all(|&v| v == 0.0));
        assert_eq!(blocks.concat().len(), d.fusion_input());
        assert!(blocks.concat().iter().all(|&v| v == 0.0));
    }
}
