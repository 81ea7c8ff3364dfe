//! Learned weights of the one-layer encoder-decoder, with a uniform
//! name/shape/slice view used by the optimizer, checkpoints and gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;

/// Floating point type the network can run in: `f32` for training and
/// inference, `f64` for gradient checking.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite conversion")
}

/// Borrowed view of one named tensor.
pub struct TensorView<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

pub struct TensorViewMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

trait Visit<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, F>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, F>>);
}

fn push1<'a, F>(out: &mut Vec<TensorView<'a, F>>, name: String, a: &'a Array1<F>) {
    out.push(TensorView { name, shape: a.shape().to_vec(), data: a.as_slice().expect("contiguous") });
}

fn push2<'a, F>(out: &mut Vec<TensorView<'a, F>>, name: String, a: &'a Array2<F>) {
    out.push(TensorView { name, shape: a.shape().to_vec(), data: a.as_slice().expect("contiguous") });
}

fn push1_mut<'a, F>(out: &mut Vec<TensorViewMut<'a, F>>, name: String, a: &'a mut Array1<F>) {
    let shape = a.shape().to_vec();
    out.push(TensorViewMut { name, shape, data: a.as_slice_mut().expect("contiguous") });
}

fn push2_mut<'a, F>(out: &mut Vec<TensorViewMut<'a, F>>, name: String, a: &'a mut Array2<F>) {
    let shape = a.shape().to_vec();
    out.push(TensorViewMut { name, shape, data: a.as_slice_mut().expect("contiguous") });
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weight: Array2::zeros((n_in, n_out)), bias: Array1::zeros(n_out) }
    }

    fn xavier<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        Self {
            weight: Array2::from_shape_simple_fn((n_in, n_out), || cast(dist.sample(rng))),
            bias: Array1::zeros(n_out),
        }
    }

    fn map<G: Scalar>(&self, f: &impl Fn(F) -> G) -> Linear<G> {
        Linear { weight: self.weight.mapv(f), bias: self.bias.mapv(f) }
    }
}

impl<F> Visit<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, F>>) {
        push2(out, format!("{prefix}.weight"), &self.weight);
        push1(out, format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, F>>) {
        push2_mut(out, format!("{prefix}.weight"), &mut self.weight);
        push1_mut(out, format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    fn identity(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        Self { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }

    fn map<G: Scalar>(&self, f: &impl Fn(F) -> G) -> LayerNorm<G> {
        LayerNorm { gamma: self.gamma.mapv(f), beta: self.beta.mapv(f) }
    }
}

impl<F> Visit<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, F>>) {
        push1(out, format!("{prefix}.gamma"), &self.gamma);
        push1(out, format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, F>>) {
        push1_mut(out, format!("{prefix}.gamma"), &mut self.gamma);
        push1_mut(out, format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Multi-head attention projections; heads are column blocks of width `d_model / n_heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
}

impl<F: Scalar> Attention<F> {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::xavier(d, d, rng),
            key: Linear::xavier(d, d, rng),
            value: Linear::xavier(d, d, rng),
            output: Linear::xavier(d, d, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self { query: Linear::zeros(d, d), key: Linear::zeros(d, d), value: Linear::zeros(d, d), output: Linear::zeros(d, d) }
    }

    fn map<G: Scalar>(&self, f: &impl Fn(F) -> G) -> Attention<G> {
        Attention { query: self.query.map(f), key: self.key.map(f), value: self.value.map(f), output: self.output.map(f) }
    }
}

impl<F> Visit<F> for Attention<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, F>>) {
        self.query.visit(&format!("{prefix}.query"), out);
        self.key.visit(&format!("{prefix}.key"), out);
        self.value.visit(&format!("{prefix}.value"), out);
        self.output.visit(&format!("{prefix}.output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, F>>) {
        self.query.visit_mut(&format!("{prefix}.query"), out);
        self.key.visit_mut(&format!("{prefix}.key"), out);
        self.value.visit_mut(&format!("{prefix}.value"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

impl<F: Scalar> FeedForward<F> {
    fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self { hidden: Linear::xavier(d, d_ff, rng), output: Linear::xavier(d_ff, d, rng) }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        Self { hidden: Linear::zeros(d, d_ff), output: Linear::zeros(d_ff, d) }
    }

    fn map<G: Scalar>(&self, f: &impl Fn(F) -> G) -> FeedForward<G> {
        FeedForward { hidden: self.hidden.map(f), output: self.output.map(f) }
    }
}

impl<F> Visit<F> for FeedForward<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, F>>) {
        self.hidden.visit(&format!("{prefix}.hidden"), out);
        self.output.visit(&format!("{prefix}.output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, F>>) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub self_attn: Attention<F>,
    pub norm1: LayerNorm<F>,
    pub ff: FeedForward<F>,
    pub norm2: LayerNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_attn: Attention<F>,
    pub norm1: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub ff: FeedForward<F>,
    pub norm3: LayerNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// Token embedding shared by encoder and decoder, `vocab x d_model`.
    pub embedding: Array2<F>,
    pub encoder: EncoderLayer<F>,
    pub decoder: DecoderLayer<F>,
    /// `d_model x vocab`.
    pub output: Linear<F>,
}

impl<F: Scalar> Params<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let emb = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
        let embedding = Array2::from_shape_simple_fn((v, d), || cast(emb.sample(rng)));
        let encoder = EncoderLayer {
            self_attn: Attention::init(d, rng),
            norm1: LayerNorm::identity(d),
            ff: FeedForward::init(d, ff, rng),
            norm2: LayerNorm::identity(d),
        };
        let decoder = DecoderLayer {
            self_attn: Attention::init(d, rng),
            norm1: LayerNorm::identity(d),
            cross_attn: Attention::init(d, rng),
            norm2: LayerNorm::identity(d),
            ff: FeedForward::init(d, ff, rng),
            norm3: LayerNorm::identity(d),
        };
        // Small output weights keep the initial prediction close to uniform.
        let out = Normal::new(0.0, 0.02).expect("valid std");
        let output = Linear { weight: Array2::from_shape_simple_fn((d, v), || cast(out.sample(rng))), bias: Array1::zeros(v) };
        Self { embedding, encoder, decoder, output }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        Self {
            embedding: Array2::zeros((v, d)),
            encoder: EncoderLayer {
                self_attn: Attention::zeros(d),
                norm1: LayerNorm::zeros(d),
                ff: FeedForward::zeros(d, ff),
                norm2: LayerNorm::zeros(d),
            },
            decoder: DecoderLayer {
                self_attn: Attention::zeros(d),
                norm1: LayerNorm::zeros(d),
                cross_attn: Attention::zeros(d),
                norm2: LayerNorm::zeros(d),
                ff: FeedForward::zeros(d, ff),
                norm3: LayerNorm::zeros(d),
            },
            output: Linear::zeros(d, v),
        }
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Params<G> {
        let f = &f;
        Params {
            embedding: self.embedding.mapv(f),
            encoder: EncoderLayer {
                self_attn: self.encoder.self_attn.map(f),
                norm1: self.encoder.norm1.map(f),
                ff: self.encoder.ff.map(f),
                norm2: self.encoder.norm2.map(f),
            },
            decoder: DecoderLayer {
                self_attn: self.decoder.self_attn.map(f),
                norm1: self.decoder.norm1.map(f),
                cross_attn: self.decoder.cross_attn.map(f),
                norm2: self.decoder.norm2.map(f),
                ff: self.decoder.ff.map(f),
                norm3: self.decoder.norm3.map(f),
            },
            output: self.output.map(f),
        }
    }

    /// All tensors in a fixed order (the checkpoint manifest order).
    pub fn tensors(&self) -> Vec<TensorView<'_, F>> {
        let mut out = Vec::new();
        push2(&mut out, "embedding".into(), &self.embedding);
        self.encoder.self_attn.visit("encoder.self_attn", &mut out);
        self.encoder.norm1.visit("encoder.norm1", &mut out);
        self.encoder.ff.visit("encoder.ff", &mut out);
        self.encoder.norm2.visit("encoder.norm2", &mut out);
        self.decoder.self_attn.visit("decoder.self_attn", &mut out);
        self.decoder.norm1.visit("decoder.norm1", &mut out);
        self.decoder.cross_attn.visit("decoder.cross_attn", &mut out);
        self.decoder.norm2.visit("decoder.norm2", &mut out);
        self.decoder.ff.visit("decoder.ff", &mut out);
        self.decoder.norm3.visit("decoder.norm3", &mut out);
        self.output.visit("output", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, F>> {
        let mut out = Vec::new();
        push2_mut(&mut out, "embedding".into(), &mut self.embedding);
        self.encoder.self_attn.visit_mut("encoder.self_attn", &mut out);
        self.encoder.norm1.visit_mut("encoder.norm1", &mut out);
        self.encoder.ff.visit_mut("encoder.ff", &mut out);
        self.encoder.norm2.visit_mut("encoder.norm2", &mut out);
        self.decoder.self_attn.visit_mut("decoder.self_attn", &mut out);
        self.decoder.norm1.visit_mut("decoder.norm1", &mut out);
        self.decoder.cross_attn.visit_mut("decoder.cross_attn", &mut out);
        self.decoder.norm2.visit_mut("decoder.norm2", &mut out);
        self.decoder.ff.visit_mut("decoder.ff", &mut out);
        self.decoder.norm3.visit_mut("decoder.norm3", &mut out);
        self.output.visit_mut("output", &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 24, ..ModelConfig::default() };
        let p: Params<f32> = Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let tensors = p.tensors();
        assert_eq!(tensors[0].name, "embedding");
        assert_eq!(tensors[0].shape, vec![19, 16]);
        let names: Vec<_> = tensors.iter().map(|t| t.name.as_str()).collect();
        assert!(names.contains(&"decoder.cross_attn.key.weight"));
        assert!(names.contains(&"output.bias"));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(p.all_finite());
        let z: Params<f64> = Params::zeros(&cfg);
        assert_eq!(z.num_parameters(), p.num_parameters());
        let widened = p.map(f64::from);
        assert_eq!(widened.num_parameters(), p.num_parameters());
    }
}
