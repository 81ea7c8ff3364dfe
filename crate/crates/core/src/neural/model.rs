//! Batched forward and backward passes of the one-layer encoder-decoder
//! (post-layer-norm, ReLU feed-forward).

use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::Rng;

use super::config::ModelConfig;
use super::layers::{
    apply_mask, attention, attention_backward, dropout_mask, feed_forward, feed_forward_backward, layer_norm,
    layer_norm_backward, linear, linear_backward, AttnCache, FfCache, NormCache,
};
use super::params::{cast, Params, Scalar};
use super::posenc::{encoder_positions, sinusoidal_table};
use super::NeuralError;

/// Token sequences stored back to back, with their positional indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl SeqBatch {
    pub fn push(&mut self, ids: &[usize], positions: &[usize]) {
        assert_eq!(ids.len(), positions.len(), "one position per token");
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.positions.extend_from_slice(positions);
        self.segments.push(start..self.ids.len());
    }

    pub fn single(ids: &[usize], positions: &[usize]) -> Self {
        let mut b = Self::default();
        b.push(ids, positions);
        b
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pe_table: Array2<F>,
}

pub(crate) struct EncoderCache<F> {
    x0: Array2<F>,
    mask0: Option<Array2<F>>,
    attn: AttnCache<F>,
    mask_attn: Option<Array2<F>>,
    norm1: NormCache<F>,
    h1: Array2<F>,
    ff: FfCache<F>,
    mask_ff: Option<Array2<F>>,
    norm2: NormCache<F>,
}

pub(crate) struct DecoderCache<F> {
    y0: Array2<F>,
    mask0: Option<Array2<F>>,
    self_attn: AttnCache<F>,
    mask_self: Option<Array2<F>>,
    norm1: NormCache<F>,
    g1: Array2<F>,
    cross_attn: AttnCache<F>,
    mask_cross: Option<Array2<F>>,
    norm2: NormCache<F>,
    g2: Array2<F>,
    ff: FfCache<F>,
    mask_ff: Option<Array2<F>>,
    norm3: NormCache<F>,
    g3: Array2<F>,
}

pub(crate) struct ForwardCache<F> {
    src: SeqBatch,
    tgt: SeqBatch,
    memory: Array2<F>,
    enc: EncoderCache<F>,
    dec: DecoderCache<F>,
}

#[cfg(test)]
impl<F> ForwardCache<F> {
    pub(crate) fn decoder_self_attention(&self) -> &[Array2<F>] {
        &self.dec.self_attn.probs
    }

    pub(crate) fn cross_attention(&self) -> &[Array2<F>] {
        &self.dec.cross_attn.probs
    }
}

/// Mean token cross-entropy and its gradient with respect to the logits.
pub struct LossOutput<F> {
    pub mean: f64,
    /// Mean loss per sequence of the target batch.
    pub per_sequence: Vec<f64>,
    pub dlogits: Array2<F>,
}

pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &[usize], segments: &[Range<usize>]) -> LossOutput<F> {
    assert_eq!(logits.nrows(), targets.len(), "one target per logits row");
    let n = targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut token_loss = Vec::with_capacity(targets.len());
    for ((row, mut drow), &t) in logits.rows().into_iter().zip(dlogits.rows_mut()).zip(targets) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let sum: f64 = row.iter().map(|v| (v.to_f64().unwrap() - max).exp()).sum();
        let log_z = max + sum.ln();
        token_loss.push(log_z - row[t].to_f64().unwrap());
        for (j, (d, v)) in drow.iter_mut().zip(row.iter()).enumerate() {
            let p = (v.to_f64().unwrap() - log_z).exp();
            let indicator = if j == t { 1.0 } else { 0.0 };
            *d = cast((p - indicator) / n);
        }
    }
    let per_sequence = segments
        .iter()
        .map(|r| token_loss[r.clone()].iter().sum::<f64>() / r.len().max(1) as f64)
        .collect();
    LossOutput { mean: token_loss.iter().sum::<f64>() / n, per_sequence, dlogits }
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, params: Params<F>) -> Self {
        let pe_table = sinusoidal_table(config.max_positions, config.d_model);
        Self { config, params, pe_table }
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let params = Params::init(&config, rng);
        Self::new(config, params)
    }

    pub fn pe_table(&self) -> &Array2<F> {
        &self.pe_table
    }

    fn embedding_scale(&self) -> F {
        if self.config.scale_embeddings {
            cast((self.config.d_model as f64).sqrt())
        } else {
            F::one()
        }
    }

    /// Token embeddings (optionally scaled) plus the positional rows at `positions`.
    pub fn embed_at(&self, ids: &[usize], positions: &[usize]) -> Result<Array2<F>, NeuralError> {
        let d = self.config.d_model;
        let scale = self.embedding_scale();
        let mut x = Array2::zeros((ids.len(), d));
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            if pos >= self.config.max_positions {
                return Err(NeuralError::SequenceTooLong { len: pos + 1, max: self.config.max_positions });
            }
            let mut row = x.row_mut(r);
            row.assign(&self.params.embedding.row(id));
            row *= scale;
            row += &self.pe_table.row(pos);
        }
        Ok(x)
    }

    /// Embeds one sequence at fresh positions (`0..len` in sinusoidal mode).
    pub fn embed<R: Rng + ?Sized>(&self, ids: &[usize], rng: &mut R) -> Result<Array2<F>, NeuralError> {
        let positions = encoder_positions(&self.config, rng, ids.len())?;
        self.embed_at(ids, &positions)
    }

    fn check_width(&self, x: &Array2<F>) -> Result<(), NeuralError> {
        if x.ncols() != self.config.d_model {
            return Err(NeuralError::ShapeMismatch(format!("expected {} columns, got {}", self.config.d_model, x.ncols())));
        }
        Ok(())
    }

    /// Encoder memory for one embedded source sequence.
    pub fn encoder_forward(&self, src_embedded: &Array2<F>) -> Result<Array2<F>, NeuralError> {
        self.check_width(src_embedded)?;
        Ok(self.encode_plain(src_embedded.clone(), &[0..src_embedded.nrows()]))
    }

    pub(crate) fn encode_plain(&self, x: Array2<F>, segs: &[Range<usize>]) -> Array2<F> {
        self.encode(x, segs, None::<&mut rand_chacha::ChaCha8Rng>).0
    }

    /// Vocabulary logits for one embedded (causally masked) target sequence.
    pub fn decoder_forward(&self, tgt_embedded: &Array2<F>, memory: &Array2<F>) -> Result<Array2<F>, NeuralError> {
        self.check_width(tgt_embedded)?;
        self.check_width(memory)?;
        let tsegs = [0..tgt_embedded.nrows()];
        let ssegs = [0..memory.nrows()];
        let (g3, _) = self.decode(tgt_embedded.clone(), memory, &tsegs, &ssegs, None::<&mut rand_chacha::ChaCha8Rng>);
        Ok(linear(&g3.view(), &self.params.output))
    }

    fn encode<R: Rng + ?Sized>(&self, x: Array2<F>, segs: &[Range<usize>], mut rng: Option<&mut R>) -> (Array2<F>, EncoderCache<F>) {
        let p = &self.params.encoder;
        let (h, drop) = (self.config.n_heads, self.config.dropout);
        let shape = (x.nrows(), x.ncols());
        let mut x0 = x;
        let mask0 = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut x0, &mask0);
        let (mut a, attn) = attention(&p.self_attn, &x0, &x0, segs, segs, h, false);
        let mask_attn = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut a, &mask_attn);
        a += &x0;
        let (h1, norm1) = layer_norm(&a, &p.norm1);
        let (mut f, ff) = feed_forward(&p.ff, &h1);
        let mask_ff = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut f, &mask_ff);
        f += &h1;
        let (memory, norm2) = layer_norm(&f, &p.norm2);
        (memory, EncoderCache { x0, mask0, attn, mask_attn, norm1, h1, ff, mask_ff, norm2 })
    }

    fn decode<R: Rng + ?Sized>(
        &self,
        y: Array2<F>,
        memory: &Array2<F>,
        tsegs: &[Range<usize>],
        ssegs: &[Range<usize>],
        mut rng: Option<&mut R>,
    ) -> (Array2<F>, DecoderCache<F>) {
        let p = &self.params.decoder;
        let (h, drop) = (self.config.n_heads, self.config.dropout);
        let shape = (y.nrows(), y.ncols());
        let mut y0 = y;
        let mask0 = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut y0, &mask0);
        let (mut s, self_attn) = attention(&p.self_attn, &y0, &y0, tsegs, tsegs, h, true);
        let mask_self = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut s, &mask_self);
        s += &y0;
        let (g1, norm1) = layer_norm(&s, &p.norm1);
        let (mut c, cross_attn) = attention(&p.cross_attn, &g1, memory, tsegs, ssegs, h, false);
        let mask_cross = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut c, &mask_cross);
        c += &g1;
        let (g2, norm2) = layer_norm(&c, &p.norm2);
        let (mut f, ff) = feed_forward(&p.ff, &g2);
        let mask_ff = dropout_mask(rng.as_deref_mut(), shape, drop);
        apply_mask(&mut f, &mask_ff);
        f += &g2;
        let (g3, norm3) = layer_norm(&f, &p.norm3);
        let cache = DecoderCache {
            y0,
            mask0,
            self_attn,
            mask_self,
            norm1,
            g1,
            cross_attn,
            mask_cross,
            norm2,
            g2,
            ff,
            mask_ff,
            norm3,
            g3: g3.clone(),
        };
        (g3, cache)
    }

    /// Logits for every target position (teacher-forced layout, no dropout).
    pub fn forward(&self, src: &SeqBatch, tgt: &SeqBatch) -> Result<Array2<F>, NeuralError> {
        Ok(self.forward_train(src, tgt, None::<&mut rand_chacha::ChaCha8Rng>)?.0)
    }

    pub(crate) fn forward_train<R: Rng + ?Sized>(
        &self,
        src: &SeqBatch,
        tgt: &SeqBatch,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<F>, ForwardCache<F>), NeuralError> {
        if src.len() != tgt.len() {
            return Err(NeuralError::ShapeMismatch(format!("{} sources for {} targets", src.len(), tgt.len())));
        }
        let x = self.embed_at(&src.ids, &src.positions)?;
        let y = self.embed_at(&tgt.ids, &tgt.positions)?;
        let (memory, enc) = self.encode(x, &src.segments, rng.as_deref_mut());
        let (g3, dec) = self.decode(y, &memory, &tgt.segments, &src.segments, rng);
        let logits = linear(&g3.view(), &self.params.output);
        Ok((logits, ForwardCache { src: src.clone(), tgt: tgt.clone(), memory, enc, dec }))
    }

    pub(crate) fn backward(&self, cache: &ForwardCache<F>, dlogits: &Array2<F>) -> Params<F> {
        let mut g = Params::zeros(&self.config);
        let p = &self.params;
        let h = self.config.n_heads;
        let (tsegs, ssegs) = (&cache.tgt.segments, &cache.src.segments);
        let dec = &cache.dec;

        let dg3 = linear_backward(&dec.g3.view(), &dlogits.view(), &p.output, &mut g.output);
        let mut dg2 = layer_norm_backward(&dec.norm3, &dg3, &p.decoder.norm3, &mut g.decoder.norm3);
        let mut df = dg2.clone();
        apply_mask(&mut df, &dec.mask_ff);
        dg2 += &feed_forward_backward(&p.decoder.ff, &mut g.decoder.ff, &dec.ff, &dec.g2, &df);

        let mut dg1 = layer_norm_backward(&dec.norm2, &dg2, &p.decoder.norm2, &mut g.decoder.norm2);
        let mut dc = dg1.clone();
        apply_mask(&mut dc, &dec.mask_cross);
        let (dq, dmemory) = attention_backward(
            &p.decoder.cross_attn,
            &mut g.decoder.cross_attn,
            &dec.cross_attn,
            &dec.g1,
            &cache.memory,
            &dc,
            tsegs,
            ssegs,
            h,
        );
        dg1 += &dq;

        let mut dy0 = layer_norm_backward(&dec.norm1, &dg1, &p.decoder.norm1, &mut g.decoder.norm1);
        let mut ds = dy0.clone();
        apply_mask(&mut ds, &dec.mask_self);
        let (dq, dkv) =
            attention_backward(&p.decoder.self_attn, &mut g.decoder.self_attn, &dec.self_attn, &dec.y0, &dec.y0, &ds, tsegs, tsegs, h);
        dy0 += &dq;
        dy0 += &dkv;
        apply_mask(&mut dy0, &dec.mask0);
        self.embedding_backward(&cache.tgt.ids, &dy0, &mut g);

        let enc = &cache.enc;
        let mut dh1 = layer_norm_backward(&enc.norm2, &dmemory, &p.encoder.norm2, &mut g.encoder.norm2);
        let mut df = dh1.clone();
        apply_mask(&mut df, &enc.mask_ff);
        dh1 += &feed_forward_backward(&p.encoder.ff, &mut g.encoder.ff, &enc.ff, &enc.h1, &df);
        let mut dx0 = layer_norm_backward(&enc.norm1, &dh1, &p.encoder.norm1, &mut g.encoder.norm1);
        let mut da = dx0.clone();
        apply_mask(&mut da, &enc.mask_attn);
        let (dq, dkv) =
            attention_backward(&p.encoder.self_attn, &mut g.encoder.self_attn, &enc.attn, &enc.x0, &enc.x0, &da, ssegs, ssegs, h);
        dx0 += &dq;
        dx0 += &dkv;
        apply_mask(&mut dx0, &enc.mask0);
        self.embedding_backward(&cache.src.ids, &dx0, &mut g);
        g
    }

    fn embedding_backward(&self, ids: &[usize], dx: &Array2<F>, g: &mut Params<F>) {
        let scale = self.embedding_scale();
        for (&id, row) in ids.iter().zip(dx.axis_iter(Axis(0))) {
            let mut target = g.embedding.row_mut(id);
            target.scaled_add(scale, &row);
        }
    }

    /// Cross-entropy of `targets` (one per target token) and parameter gradients.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        src: &SeqBatch,
        tgt: &SeqBatch,
        targets: &[usize],
        dropout_rng: Option<&mut R>,
    ) -> Result<(LossOutput<F>, Params<F>), NeuralError> {
        let (logits, cache) = self.forward_train(src, tgt, dropout_rng)?;
        let loss = cross_entropy(&logits, targets, &tgt.segments);
        let grads = self.backward(&cache, &loss.dlogits);
        Ok((loss, grads))
    }

    /// Cross-entropy only, without dropout.
    pub fn loss(&self, src: &SeqBatch, tgt: &SeqBatch, targets: &[usize]) -> Result<f64, NeuralError> {
        let logits = self.forward(src, tgt)?;
        Ok(cross_entropy(&logits, targets, &tgt.segments).mean)
    }

    /// Which ReLU units are active, encoder then decoder, for every token.
    pub(crate) fn relu_pattern(&self, src: &SeqBatch, tgt: &SeqBatch) -> Result<Vec<bool>, NeuralError> {
        let (_, cache) = self.forward_train(src, tgt, None::<&mut rand_chacha::ChaCha8Rng>)?;
        Ok(cache.enc.ff.hidden.iter().chain(cache.dec.ff.hidden.iter()).map(|&h| h > F::zero()).collect())
    }

    #[cfg(test)]
    pub(crate) fn forward_cache(&self, src: &SeqBatch, tgt: &SeqBatch) -> ForwardCache<F> {
        self.forward_train(src, tgt, None::<&mut rand_chacha::ChaCha8Rng>).unwrap().1
    }
}
