//! Autoregressive training with Adam.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decode::{argmax, IncrementalDecoder};
use super::model::{Model, SeqBatch};
use super::params::{cast, Params, Scalar};
use super::posenc::{decoder_positions, encoder_positions};
use super::NeuralError;
use crate::datagen::Example;
use crate::vocab::Vocab;

/// What the decoder sees as its input during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// The model's own greedy tokens are fed back.
    #[default]
    Autoregressive,
    TeacherForced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam; moments are kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Params<f64>,
    pub v: Params<f64>,
}

impl AdamState {
    pub fn new(model: &ModelConfig, config: AdamConfig) -> Self {
        Self { config, t: 0, m: Params::zeros(model), v: Params::zeros(model) }
    }

    pub fn update<F: Scalar>(&mut self, params: &mut Params<F>, grads: &Params<F>) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let grads = grads.tensors();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(self.m.tensors_mut()).zip(self.v.tensors_mut()) {
            for (((p, g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                let g = g.to_f64().unwrap();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = cast(p.to_f64().unwrap() - step);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean token cross-entropy over the batch.
    pub loss: f64,
    pub n_tokens: usize,
}

/// Source and decoder batches plus the flat target ids (target then EOS).
pub(crate) struct Prepared {
    pub src: SeqBatch,
    pub tgt: SeqBatch,
    pub targets: Vec<usize>,
}

pub(crate) fn prepare<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    batch: &[Example],
    regime: Regime,
    rng: &mut R,
) -> Result<Prepared, NeuralError> {
    let cfg = &model.config;
    let mut src = SeqBatch::default();
    let mut target_ids = Vec::with_capacity(batch.len());
    let mut dec_pos = Vec::with_capacity(batch.len());
    for ex in batch {
        let ids = Vocab.encode(&ex.input_text)?;
        src.push(&ids, &encoder_positions(cfg, rng, ids.len())?);
        let tgt = Vocab.encode_bare(&ex.target_text)?;
        if tgt.len() + 1 > cfg.decoder_span() {
            return Err(NeuralError::SequenceTooLong { len: tgt.len() + 1, max: cfg.decoder_span() });
        }
        target_ids.push(tgt);
        dec_pos.push(decoder_positions(cfg, rng));
    }

    let inputs: Vec<Vec<usize>> = match regime {
        Regime::TeacherForced => target_ids.iter().map(|t| [&[Vocab::SOS], t.as_slice()].concat()).collect(),
        Regime::Autoregressive => rollout(model, &src, &dec_pos, &target_ids)?,
    };

    let mut tgt = SeqBatch::default();
    let mut targets = Vec::new();
    for ((input, t), pos) in inputs.iter().zip(&target_ids).zip(&dec_pos) {
        tgt.push(input, &pos[..input.len()]);
        targets.extend_from_slice(t);
        targets.push(Vocab::EOS);
    }
    Ok(Prepared { src, tgt, targets })
}

/// Greedy self-feeding without dropout: row `b` gets `[SOS, g_1 .. g_T]`,
/// where `T` is its target length.
fn rollout<F: Scalar>(
    model: &Model<F>,
    src: &SeqBatch,
    dec_pos: &[Vec<usize>],
    target_ids: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>, NeuralError> {
    let steps = target_ids.iter().map(Vec::len).max().unwrap_or(0);
    let mut inputs: Vec<Vec<usize>> = vec![vec![Vocab::SOS]; target_ids.len()];
    let mut dec = IncrementalDecoder::for_sources(model, src)?;
    for step in 0..steps {
        let tokens: Vec<usize> = inputs.iter().map(|i| *i.last().expect("starts with SOS")).collect();
        let positions: Vec<usize> = dec_pos.iter().map(|p| p[step]).collect();
        let logits = dec.step(&tokens, &positions)?;
        for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
            if inputs[b].len() <= target_ids[b].len() {
                inputs[b].push(argmax(row));
            }
        }
    }
    Ok(inputs)
}

/// One optimizer update on `batch`. The rollout tokens are treated as
/// constants; gradients flow through the forward pass over them.
pub fn training_step<F: Scalar, R: Rng + ?Sized>(
    model: &mut Model<F>,
    adam: &mut AdamState,
    batch: &[Example],
    regime: Regime,
    rng: &mut R,
) -> Result<StepReport, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::ShapeMismatch("empty training batch".into()));
    }
    let prep = prepare(model, batch, regime, rng)?;
    let (loss, grads) = model.loss_and_gradients(&prep.src, &prep.tgt, &prep.targets, Some(rng))?;
    if let Some(index) = loss.per_sequence.iter().position(|l| !l.is_finite()) {
        return Err(NeuralError::NonFiniteLoss { index, input: batch[index].input_text.clone() });
    }
    adam.update(&mut model.params, &grads);
    Ok(StepReport { loss: loss.mean, n_tokens: prep.targets.len() })
}

/// Mean token cross-entropy on `batch` without updating anything.
pub fn batch_loss<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    batch: &[Example],
    regime: Regime,
    rng: &mut R,
) -> Result<f64, NeuralError> {
    let prep = prepare(model, batch, regime, rng)?;
    model.loss(&prep.src, &prep.tgt, &prep.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Split, Task};
    use crate::expr::parse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 32, n_heads: 2, d_ff: 48, ..Default::default() }
    }

    fn batch() -> Vec<Example> {
        ["((1+2)*3)", "(4-(5*6))", "(7+8)", "(((1+1)+1)+1)"]
            .iter()
            .map(|t| Example::new(&parse(t).unwrap(), Task::SubExpr, Split::Train))
            .collect()
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let c = cfg();
        let mut p: Params<f32> = Params::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        let before = p.clone();
        let mut adam = AdamState::new(&c, AdamConfig::default());
        for _ in 0..3 {
            adam.update(&mut p, &Params::zeros(&c));
        }
        assert_eq!(p, before);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let c = cfg();
        let mut p: Params<f64> = Params::zeros(&c);
        let mut g: Params<f64> = Params::zeros(&c);
        g.output.bias[0] = 0.5;
        g.output.bias[1] = -3.0;
        let mut adam = AdamState::new(&c, AdamConfig::default());
        adam.update(&mut p, &g);
        assert!((p.output.bias[0] + 1e-4).abs() < 1e-10);
        assert!((p.output.bias[1] - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn rollout_rows_have_target_length() {
        let m: Model<f32> = Model::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1));
        let b = batch();
        let prep = prepare(&m, &b, Regime::Autoregressive, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (seg, ex) in prep.tgt.segments.iter().zip(&b) {
            assert_eq!(seg.len(), ex.target_text.len() + 1);
            assert_eq!(prep.tgt.ids[seg.start], Vocab::SOS);
        }
        assert_eq!(prep.targets.len(), prep.tgt.n_tokens());
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut m: Model<f32> = Model::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1));
            let mut adam = AdamState::new(&m.config, AdamConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let losses: Vec<f64> =
                (0..2).map(|_| training_step(&mut m, &mut adam, &batch(), Regime::Autoregressive, &mut rng).unwrap().loss).collect();
            (m.params, losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m: Model<f32> = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let loss = batch_loss(&m, &batch(), Regime::Autoregressive, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let uniform = (Vocab::SIZE as f64).ln();
        assert!((loss - uniform).abs() <= 0.2 * uniform, "loss {loss}");
    }

    #[test]
    fn overfits_a_tiny_batch_teacher_forced() {
        let mut m: Model<f32> = Model::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut adam = AdamState::new(&m.config, AdamConfig { lr: 3e-3, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = batch();
        let first = training_step(&mut m, &mut adam, &b, Regime::TeacherForced, &mut rng).unwrap().loss;
        let mut last = first;
        for _ in 0..150 {
            last = training_step(&mut m, &mut adam, &b, Regime::TeacherForced, &mut rng).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
