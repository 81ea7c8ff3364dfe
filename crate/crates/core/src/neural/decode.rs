//! Autoregressive decoding with cached keys and values.

use std::ops::Range;

use ndarray::{s, Array2, Array3, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};

use super::layers::{feed_forward, layer_norm, linear, softmax_rows};
use super::model::{Model, SeqBatch};
use super::params::{cast, Attention, Scalar};
use super::posenc::{decoder_positions, encoder_positions};
use super::NeuralError;
use crate::hybrid::SolverPort;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Decoder state for a batch of rows advancing one token at a time. Row `b`
/// attends to `memory[ssegs[b]]`; several rows may share one memory segment.
pub(crate) struct IncrementalDecoder<'m, F> {
    model: &'m Model<F>,
    ssegs: Vec<Range<usize>>,
    cross_k: Array2<F>,
    cross_v: Array2<F>,
    self_k: Array3<F>,
    self_v: Array3<F>,
    t: usize,
}

impl<'m, F: Scalar> IncrementalDecoder<'m, F> {
    pub(crate) fn new(model: &'m Model<F>, memory: &Array2<F>, ssegs: Vec<Range<usize>>) -> Self {
        let cross = &model.params.decoder.cross_attn;
        let (rows, span, d) = (ssegs.len(), model.config.decoder_span(), model.config.d_model);
        Self {
            model,
            cross_k: linear(&memory.view(), &cross.key),
            cross_v: linear(&memory.view(), &cross.value),
            ssegs,
            self_k: Array3::zeros((rows, span, d)),
            self_v: Array3::zeros((rows, span, d)),
            t: 0,
        }
    }

    /// Encodes `src` and prepares one decoder row per source sequence.
    pub(crate) fn for_sources(model: &'m Model<F>, src: &SeqBatch) -> Result<Self, NeuralError> {
        let x = model.embed_at(&src.ids, &src.positions)?;
        let memory = model.encode_plain(x, &src.segments);
        Ok(Self::new(model, &memory, src.segments.clone()))
    }

    #[cfg(test)]
    pub(crate) fn steps_taken(&self) -> usize {
        self.t
    }

    /// Feeds one token per row at the given positions; returns `rows x vocab` logits.
    pub(crate) fn step(&mut self, tokens: &[usize], positions: &[usize]) -> Result<Array2<F>, NeuralError> {
        let rows = self.ssegs.len();
        assert_eq!(tokens.len(), rows, "one token per row");
        if self.t >= self.self_k.shape()[1] {
            return Err(NeuralError::SequenceTooLong { len: self.t + 1, max: self.self_k.shape()[1] });
        }
        let p = &self.model.params.decoder;
        let h = self.model.config.n_heads;
        let t = self.t;
        let y = self.model.embed_at(tokens, positions)?;

        let q = linear(&y.view(), &p.self_attn.query);
        self.self_k.slice_mut(s![.., t, ..]).assign(&linear(&y.view(), &p.self_attn.key));
        self.self_v.slice_mut(s![.., t, ..]).assign(&linear(&y.view(), &p.self_attn.value));
        let mut ctx = Array2::zeros(q.raw_dim());
        for b in 0..rows {
            let k = self.self_k.slice(s![b, ..=t, ..]);
            let v = self.self_v.slice(s![b, ..=t, ..]);
            attend_row(&q, &k, &v, b, h, &mut ctx);
        }
        let mut s1 = project(&ctx, &p.self_attn);
        s1 += &y;
        let (g1, _) = layer_norm(&s1, &p.norm1);

        let q = linear(&g1.view(), &p.cross_attn.query);
        let mut ctx = Array2::zeros(q.raw_dim());
        for (b, seg) in self.ssegs.iter().enumerate() {
            let k = self.cross_k.slice(s![seg.clone(), ..]);
            let v = self.cross_v.slice(s![seg.clone(), ..]);
            attend_row(&q, &k, &v, b, h, &mut ctx);
        }
        let mut c = project(&ctx, &p.cross_attn);
        c += &g1;
        let (g2, _) = layer_norm(&c, &p.norm2);
        let (mut f, _) = feed_forward(&p.ff, &g2);
        f += &g2;
        let (g3, _) = layer_norm(&f, &p.norm3);
        self.t += 1;
        Ok(linear(&g3.view(), &self.model.params.output))
    }
}

fn project<F: Scalar>(ctx: &Array2<F>, a: &Attention<F>) -> Array2<F> {
    linear(&ctx.view(), &a.output)
}

fn attend_row<F: Scalar>(
    q: &Array2<F>,
    k: &ndarray::ArrayView2<F>,
    v: &ndarray::ArrayView2<F>,
    row: usize,
    n_heads: usize,
    ctx: &mut Array2<F>,
) {
    let dh = q.ncols() / n_heads;
    let scale: F = cast(1.0 / (dh as f64).sqrt());
    for head in 0..n_heads {
        let cols = head * dh..(head + 1) * dh;
        let qh = q.slice(s![row..row + 1, cols.clone()]);
        let mut scores = qh.dot(&k.slice(s![.., cols.clone()]).t());
        scores *= scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(s![row..row + 1, cols.clone()]).assign(&scores.dot(&v.slice(s![.., cols])));
    }
}

pub(crate) fn argmax<F: Scalar>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_token<F: Scalar, R: Rng + ?Sized>(row: ndarray::ArrayView1<F>, temperature: f64, rng: &mut R) -> usize {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
    let weights: Vec<f64> = row.iter().map(|v| ((v.to_f64().unwrap() - max) / temperature).exp()).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax(row),
    }
}

fn pick<F: Scalar, R: Rng + ?Sized>(row: ndarray::ArrayView1<F>, mode: DecodeMode, rng: &mut R) -> usize {
    match mode {
        DecodeMode::Greedy => argmax(row),
        DecodeMode::Sample { temperature } => sample_token(row, temperature, rng),
    }
}

/// Runs rows until each has emitted EOS or `max_decode_len` tokens.
fn run_rows<F: Scalar, R: Rng + ?Sized>(
    dec: &mut IncrementalDecoder<'_, F>,
    dec_positions: &[Vec<usize>],
    max_len: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<String>, NeuralError> {
    let rows = dec_positions.len();
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    let mut tokens = vec![Vocab::SOS; rows];
    for step in 0..max_len {
        let positions: Vec<usize> = dec_positions.iter().map(|p| p[step]).collect();
        let logits = dec.step(&tokens, &positions)?;
        for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
            if done[b] {
                continue;
            }
            let tok = pick(row, mode, rng);
            if tok == Vocab::EOS {
                done[b] = true;
            } else {
                outputs[b].push(tok);
                tokens[b] = tok;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs.iter().map(|ids| Vocab.decode(ids)).collect())
}

/// One generation for `input_text`. Ids that are not printable symbols
/// (SOS, PAD) are kept in the decoder input but dropped from the output.
pub fn generate<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    input_text: &str,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<String, NeuralError> {
    let src_ids = Vocab.encode(input_text)?;
    let src_pos = encoder_positions(&model.config, rng, src_ids.len())?;
    let dec_pos = decoder_positions(&model.config, rng);
    let mut dec = IncrementalDecoder::for_sources(model, &SeqBatch::single(&src_ids, &src_pos))?;
    Ok(run_rows(&mut dec, &[dec_pos], model.config.max_decode_len, mode, rng)?.swap_remove(0))
}

/// `n` independent samples at temperature 1. The encoder runs once; every
/// generation gets its own decoder positions.
pub fn generate_multi<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    input_text: &str,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>, NeuralError> {
    let src_ids = Vocab.encode(input_text)?;
    let src_pos = encoder_positions(&model.config, rng, src_ids.len())?;
    let x = model.embed_at(&src_ids, &src_pos)?;
    let memory = model.encode_plain(x, &[0..src_ids.len()]);
    let dec_pos: Vec<Vec<usize>> = (0..n).map(|_| decoder_positions(&model.config, rng)).collect();
    let mut dec = IncrementalDecoder::new(model, &memory, vec![0..src_ids.len(); n]);
    run_rows(&mut dec, &dec_pos, model.config.max_decode_len, DecodeMode::Sample { temperature: 1.0 }, rng)
}

/// Greedy generation for many inputs at once.
pub fn generate_batch_greedy<F: Scalar, R: Rng + ?Sized, S: AsRef<str>>(
    model: &Model<F>,
    inputs: &[S],
    rng: &mut R,
) -> Result<Vec<String>, NeuralError> {
    let mut src = SeqBatch::default();
    let mut dec_pos = Vec::with_capacity(inputs.len());
    for input in inputs {
        let ids = Vocab.encode(input.as_ref())?;
        let pos = encoder_positions(&model.config, rng, ids.len())?;
        src.push(&ids, &pos);
        dec_pos.push(decoder_positions(&model.config, rng));
    }
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = IncrementalDecoder::for_sources(model, &src)?;
    run_rows(&mut dec, &dec_pos, model.config.max_decode_len, DecodeMode::Greedy, rng)
}

/// The trained network behind the solver port. Inputs outside the vocabulary
/// yield empty candidates, which the combiner treats as malformed.
#[derive(Debug, Clone)]
pub struct NeuralSolver {
    pub model: Model<f32>,
}

impl NeuralSolver {
    pub fn new(model: Model<f32>) -> Self {
        Self { model }
    }
}

impl SolverPort for NeuralSolver {
    fn propose(&self, input: &str, n: usize, rng: &mut dyn RngCore) -> Vec<String> {
        generate_multi(&self.model, input, n, rng).unwrap_or_else(|_| vec![String::new(); n])
    }

    fn greedy(&self, input: &str, rng: &mut dyn RngCore) -> String {
        generate(&self.model, input, DecodeMode::Greedy, rng).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::config::{ModelConfig, PeMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(pe_mode: PeMode) -> Model<f64> {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 24, max_positions: 40, pe_mode, ..Default::default() };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let m = small(PeMode::Label);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut src = SeqBatch::default();
        let mut tgt = SeqBatch::default();
        let mut dec_pos = Vec::new();
        let seqs: [(&[usize], &[usize]); 2] = [(&[16, 1, 12, 2, 17], &[16, 3, 15, 10]), (&[16, 9, 17], &[16, 4, 4, 4])];
        for (s_ids, t_ids) in seqs {
            src.push(s_ids, &encoder_positions(&m.config, &mut rng, s_ids.len()).unwrap());
            let dp = decoder_positions(&m.config, &mut rng);
            tgt.push(t_ids, &dp[..t_ids.len()]);
            dec_pos.push(dp);
        }
        let full = m.forward(&src, &tgt).unwrap();
        let mut dec = IncrementalDecoder::for_sources(&m, &src).unwrap();
        for t in 0..4 {
            let tokens = [seqs[0].1[t], seqs[1].1[t]];
            let logits = dec.step(&tokens, &[dec_pos[0][t], dec_pos[1][t]]).unwrap();
            let rows = [full.row(t), full.row(4 + t)];
            for (b, row) in rows.iter().enumerate() {
                let diff = (&logits.row(b) - row).mapv(f64::abs).sum();
                assert!(diff < 1e-10, "step {t} row {b}: {diff}");
            }
        }
        assert_eq!(dec.steps_taken(), 4);
    }

    #[test]
    fn dominant_token_repeats_until_limit() {
        let mut m = small(PeMode::Sinusoidal);
        m.params.output.weight.fill(0.0);
        m.params.output.bias.fill(0.0);
        m.params.output.bias[7] = 1e6;
        let out = generate(&m, "(1+2)", DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, "7".repeat(m.config.max_decode_len));
    }

    #[test]
    fn cold_sampling_agrees_with_greedy() {
        let m = small(PeMode::Sinusoidal);
        for input in ["(1+2)", "((3*4)-5)", "(9-(8+7))"] {
            let g = generate(&m, input, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let s = generate(&m, input, DecodeMode::Sample { temperature: 1e-9 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(g, s);
            assert!(g.chars().count() <= m.config.max_decode_len);
        }
    }

    #[test]
    fn multi_generation_is_seeded() {
        let m = small(PeMode::Label);
        let a = generate_multi(&m, "((1+2)*3)", 100, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = generate_multi(&m, "((1+2)*3)", 100, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_eq!(generate_multi(&m, "(1+2)", 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().len(), 1);
    }

    #[test]
    fn batch_greedy_matches_single_sinusoidal() {
        let m = small(PeMode::Sinusoidal);
        let inputs = ["(1+2)", "((3*4)-5)", "7"];
        let batch = generate_batch_greedy(&m, &inputs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (input, out) in inputs.iter().zip(&batch) {
            assert_eq!(&generate(&m, input, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), out);
        }
    }
}
