//! The MLP that maps a concatenated feature stack to a style embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, ExtractorSpec, FeatureStack, FEATURE_WIDTH};
use super::loss::cosine;
use crate::error::{Error, Result};
use crate::numeric::params::uniform_fan_in;
use crate::numeric::{Array, Bound, ParamId, ParamStore, Tape, Var};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_width: usize,
    /// Widths of the hidden layers; a GELU follows each one. Empty means a
    /// single affine map.
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub tau: f64,
    pub extractor: ExtractorSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_width: FEATURE_WIDTH,
            hidden_dims: vec![128],
            embedding_dim: 64,
            tau: 0.1,
            extractor: ExtractorSpec::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.input_width == 0 || self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// A style embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding(pub Vec<f64>);

impl StyleEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().fold(0.0, |t, v| t + v * v).sqrt()
    }

    pub fn cosine(&self, other: &StyleEmbedding) -> Result<f64> {
        cosine(&self.0, &other.0)
    }

    pub fn as_row(&self) -> Array {
        Array::row(&self.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Φ: affine layers with GELU between them. Weights are `[in, out]` and act
/// on row vectors.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    config: EncoderConfig,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl StyleEncoder {
    /// Weights and biases drawn from U(±1/√fan_in) with a seeded ChaCha8 stream.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut widths = vec![config.input_width];
        widths.extend(&config.hidden_dims);
        widths.push(config.embedding_dim);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = store.add(format!("phi.{i}.weight"), uniform_fan_in(&[fan_in, fan_out], fan_in, &mut rng), true)?;
            let bias = store.add(format!("phi.{i}.bias"), uniform_fan_in(&[1, fan_out], fan_in, &mut rng), true)?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { config, store, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Ids of (weight, bias) per layer, input side first.
    pub fn layer_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    /// Φ applied to a `[batch, input_width]` node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.config.input_width {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![width],
                rhs: vec![self.config.input_width],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, bound[layer.weight])?;
            h = tape.add_row(h, bound[layer.bias])?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Embeddings of a `[batch, input_width]` feature matrix.
    pub fn embed_matrix(&self, features: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = self.store.bind_with(&mut tape, &[]);
        let x = tape.constant(features.clone());
        let e = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }

    pub fn embed(&self, stack: &FeatureStack) -> Result<StyleEmbedding> {
        let x = Array::new(vec![1, stack.width()], stack.concat())?;
        Ok(StyleEmbedding(self.embed_matrix(&x)?.into_data()))
    }

    pub fn embed_image(&self, image: &Raster) -> Result<StyleEmbedding> {
        self.embed(&extract_features(image, &self.config.extractor)?)
    }

    pub fn embed_images(&self, images: &[Raster]) -> Result<Vec<StyleEmbedding>> {
        let stacks = images
            .iter()
            .map(|im| extract_features(im, &self.config.extractor))
            .collect::<Result<Vec<_>>>()?;
        let m = self.embed_matrix(&super::features::feature_matrix(&stacks)?)?;
        Ok((0..m.rows()).map(|r| StyleEmbedding(m.row_slice(r).to_vec())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(hidden: Vec<usize>, input: usize, out: usize) -> StyleEncoder {
        let cfg = EncoderConfig {
            input_width: input,
            hidden_dims: hidden,
            embedding_dim: out,
            ..EncoderConfig::default()
        };
        StyleEncoder::new(cfg, 7).unwrap()
    }

    fn stack(levels: Vec<Vec<f64>>) -> FeatureStack {
        FeatureStack { levels }
    }

    #[test]
    fn zero_weight_single_layer_returns_bias() {
        let mut enc = tiny(vec![], 3, 3);
        let (w, b) = enc.layer_ids()[0];
        *enc.store_mut().get_mut(w) = Array::zeros(&[3, 3]);
        *enc.store_mut().get_mut(b) = Array::row(&[0.5, -1.0, 2.0]);
        let e = enc.embed(&stack(vec![vec![3.0], vec![-7.0, 1.0]])).unwrap();
        assert_eq!(e.values(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn level_order_matters() {
        let enc = tiny(vec![4], 4, 3);
        let a = enc.embed(&stack(vec![vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let b = enc.embed(&stack(vec![vec![3.0, 4.0], vec![1.0, 2.0]])).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn two_level_toy_matches_hand_arithmetic() {
        let mut enc = tiny(vec![2], 4, 2);
        let ids = enc.layer_ids();
        let s = enc.store_mut();
        *s.get_mut(ids[0].0) = Array::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.5]]).unwrap();
        *s.get_mut(ids[0].1) = Array::row(&[0.0, -1.0]);
        *s.get_mut(ids[1].0) = Array::from_rows(&[&[2.0, 0.0], &[1.0, -1.0]]).unwrap();
        *s.get_mut(ids[1].1) = Array::row(&[0.1, 0.2]);
        let e = enc.embed(&stack(vec![vec![1.0, 2.0], vec![0.5, 1.0]])).unwrap();
        // hidden pre-activation: [1 + 0.5 − 1, 2 + 0.5 + 0.5 − 1] = [0.5, 2.0]
        let h = [crate::numeric::tape::gelu(0.5), crate::numeric::tape::gelu(2.0)];
        let expected = [2.0 * h[0] + h[1] + 0.1, -h[1] + 0.2];
        assert!((e.values()[0] - expected[0]).abs() < 1e-14);
        assert!((e.values()[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn width_mismatch_rejected() {
        let enc = tiny(vec![4], 5, 3);
        assert!(enc.embed(&stack(vec![vec![1.0, 2.0]])).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = StyleEncoder::new(EncoderConfig::default(), 3).unwrap();
        let b = StyleEncoder::new(EncoderConfig::default(), 3).unwrap();
        let c = StyleEncoder::new(EncoderConfig::default(), 4).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store(), c.store());
    }
}
