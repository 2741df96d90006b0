use serde::{Deserialize, Serialize};

use crate::digest::digest_values;
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_INIT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nearest-token rule used by the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    L2,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub tokens: usize,
    pub metric: Metric,
    pub gamma: f64,
    pub beta: f64,
    pub edge_features: bool,
    /// Above this node count the topology term is estimated from samples.
    pub dense_threshold: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            heads: 4,
            tokens: 128,
            metric: Metric::Cosine,
            gamma: 2.0,
            beta: 0.25,
            edge_features: false,
            dense_threshold: 2000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(Error::Config("d, heads and tokens must all be at least 1".into()));
        }
        if !(self.gamma > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("gamma must be positive and beta non-negative".into()));
        }
        Ok(())
    }

    /// Standard deviation of randomly initialized codebook tokens.
    pub fn token_scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<S> {
    pub w_self: Tensor<S>,
    pub w_nbr: Tensor<S>,
    pub w_edge: Option<Tensor<S>>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Codebook<S> {
    /// One `T x d` token matrix per head.
    pub heads: Vec<Tensor<S>>,
    /// `(M·d) x d` map from concatenated head outputs to the quantized vector.
    pub projection: Tensor<S>,
    pub metric: Metric,
}

impl<S: Scalar> Codebook<S> {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn tokens_per_head(&self) -> usize {
        self.heads.first().map_or(0, Tensor::rows)
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    /// `(1/M)[I; I; …; I]`: the quantized vector is the average of the head
    /// outputs.
    pub fn block_average(heads: usize, d: usize) -> Tensor<S> {
        let mut p = Tensor::zeros(&[heads * d, d]);
        let w = S::from_f64_lossy(1.0 / heads as f64);
        for m in 0..heads {
            for j in 0..d {
                p.set(m * d + j, j, w);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = (self.tokens_per_head(), self.dim());
        if self.heads.is_empty() || t == 0 {
            return Err(Error::contract("codebook needs at least one head and one token"));
        }
        for (m, h) in self.heads.iter().enumerate() {
            if h.shape() != [t, d] {
                return Err(Error::contract(format!(
                    "head {m} has shape {:?}, expected [{t}, {d}]",
                    h.shape()
                )));
            }
            if self.metric == Metric::Cosine {
                if let Some(i) = (0..t).find(|&i| h.row(i).iter().all(|v| *v == S::zero())) {
                    return Err(Error::contract(format!(
                        "head {m} token {i} has zero norm under the cosine metric"
                    )));
                }
            }
        }
        if self.projection.shape() != [self.heads.len() * d, d] {
            return Err(Error::contract("projection must be (M·d) x d"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Everything the server aggregates: encoder, codebook and decoder.
#[derive(Debug, Clone)]
pub struct GfmParams<S> {
    pub layers: Vec<EncoderLayer<S>>,
    pub codebook: Codebook<S>,
    pub decoder: Decoder<S>,
}

pub const ENCODER_LAYERS: usize = 2;

fn gaussian<S: Scalar>(rng: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Tensor<S> {
    Tensor::new(vec![rows, cols], rng::normal_vec(rng, rows * cols, scale)).expect("shape matches")
}

impl<S: Scalar> GfmParams<S> {
    /// Gaussian weights with variance `1/d_in`, zero biases, Gaussian tokens
    /// and a random projection.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let mut rng = rng::stream(seed, &[STREAM_INIT]);
        let w = 1.0 / (d as f64).sqrt();
        let layers = (0..ENCODER_LAYERS)
            .map(|_| EncoderLayer {
                w_self: gaussian(&mut rng, d, d, w),
                w_nbr: gaussian(&mut rng, d, d, w),
                w_edge: cfg.edge_features.then(|| gaussian(&mut rng, d, d, w)),
                bias: Tensor::zeros(&[1, d]),
            })
            .collect();
        let heads = (0..cfg.heads)
            .map(|_| gaussian(&mut rng, cfg.tokens, d, cfg.token_scale()))
            .collect();
        let projection = gaussian(&mut rng, cfg.heads * d, d, 1.0 / ((cfg.heads * d) as f64).sqrt());
        let decoder = Decoder {
            w1: gaussian(&mut rng, d, d, w),
            b1: Tensor::zeros(&[1, d]),
            w2: gaussian(&mut rng, d, d, w),
            b2: Tensor::zeros(&[1, d]),
        };
        Ok(Self {
            layers,
            codebook: Codebook {
                heads,
                projection,
                metric: cfg.metric,
            },
            decoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn has_edge_weights(&self) -> bool {
        self.layers.iter().any(|l| l.w_edge.is_some())
    }

    /// Tensors in flattening order, each with a stable name.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("enc{i}.w_self"), &l.w_self));
            out.push((format!("enc{i}.w_nbr"), &l.w_nbr));
            if let Some(e) = &l.w_edge {
                out.push((format!("enc{i}.w_edge"), e));
            }
            out.push((format!("enc{i}.bias"), &l.bias));
        }
        for (m, h) in self.codebook.heads.iter().enumerate() {
            out.push((format!("codebook.head{m}"), h));
        }
        out.push(("codebook.projection".into(), &self.codebook.projection));
        let dec = &self.decoder;
        out.push(("dec.w1".into(), &dec.w1));
        out.push(("dec.b1".into(), &dec.b1));
        out.push(("dec.w2".into(), &dec.w2));
        out.push(("dec.b2".into(), &dec.b2));
        out
    }

    /// Mutable view in the same order as [`GfmParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w_self);
            out.push(&mut l.w_nbr);
            if let Some(e) = &mut l.w_edge {
                out.push(e);
            }
            out.push(&mut l.bias);
        }
        for h in &mut self.codebook.heads {
            out.push(h);
        }
        out.push(&mut self.codebook.projection);
        let dec = &mut self.decoder;
        out.extend([&mut dec.w1, &mut dec.b1, &mut dec.w2, &mut dec.b2]);
        out
    }

    /// Names and shapes of the flat layout. Two parameter sets can be
    /// averaged only if their schemas match.
    pub fn schema(&self) -> String {
        self.named()
            .iter()
            .map(|(n, t)| format!("{n}{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat vector has {} entries, schema needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_values(self.named().into_iter().map(|(_, t)| t.data()))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.schema() == other.schema()
            && self.codebook.metric == other.codebook.metric
            && self
                .named()
                .iter()
                .zip(other.named())
                .all(|((_, a), (_, b))| a.bitwise_eq(b))
    }

    pub fn cast<T: Scalar>(&self) -> GfmParams<T> {
        GfmParams {
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    w_self: l.w_self.cast(),
                    w_nbr: l.w_nbr.cast(),
                    w_edge: l.w_edge.as_ref().map(Tensor::cast),
                    bias: l.bias.cast(),
                })
                .collect(),
            codebook: Codebook {
                heads: self.codebook.heads.iter().map(Tensor::cast).collect(),
                projection: self.codebook.projection.cast(),
                metric: self.codebook.metric,
            },
            decoder: Decoder {
                w1: self.decoder.w1.cast(),
                b1: self.decoder.b1.cast(),
                w2: self.decoder.w2.cast(),
                b2: self.decoder.b2.cast(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 4,
            heads: 2,
            tokens: 3,
            edge_features: true,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let p = GfmParams::<f64>::init(&small(), 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = GfmParams::<f64>::init(&small(), 2).unwrap();
        assert!(!q.bitwise_eq(&p));
        q.unflatten(&flat).unwrap();
        assert!(q.bitwise_eq(&p));
        assert_eq!(q.digest(), p.digest());
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let mut p = GfmParams::<f64>::init(&small(), 1).unwrap();
        assert!(p.unflatten(&[0.0; 3]).is_err());
    }

    #[test]
    fn block_average_projection() {
        let p = Codebook::<f64>::block_average(2, 3);
        assert_eq!(p.shape(), &[6, 3]);
        assert_eq!(p.at(0, 0), 0.5);
        assert_eq!(p.at(3, 0), 0.5);
        assert_eq!(p.at(4, 1), 0.5);
        assert_eq!(p.at(4, 0), 0.0);
    }

    #[test]
    fn schema_lists_edge_weights_only_when_present() {
        let with = GfmParams::<f64>::init(&small(), 0).unwrap();
        let without = GfmParams::<f64>::init(
            &ModelConfig {
                edge_features: false,
                ..small()
            },
            0,
        )
        .unwrap();
        assert!(with.schema().contains("w_edge"));
        assert!(!without.schema().contains("w_edge"));
    }

    #[test]
    fn zero_token_rejected_under_cosine() {
        let mut p = GfmParams::<f64>::init(&small(), 0).unwrap();
        p.codebook.validate().unwrap();
        for v in p.codebook.heads[1].row_mut(2) {
            *v = 0.0;
        }
        assert!(p.codebook.validate().is_err());
        p.codebook.metric = Metric::L2;
        assert!(p.codebook.validate().is_ok());
    }
}
