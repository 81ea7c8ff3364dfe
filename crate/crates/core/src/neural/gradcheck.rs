//! Finite-difference check of the analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::config::ModelConfig;
use super::model::Model;
use super::train::{prepare, Regime};
use super::NeuralError;
use crate::datagen::{sample_expression, Example, GenConfig, Split, Task};

const STEP: f64 = 1e-3;
/// Central differences with this step carry O(1e-7) truncation error, so
/// gradients below the floor are compared in absolute terms.
const FLOOR: f64 = 1e-4;
const ENTRIES_PER_TENSOR: usize = 6;
const BATCH: usize = 2;

/// Fault injection for the negative control.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GradientCorruption {
    #[default]
    None,
    /// Multiply the analytic gradient of one named tensor by `factor`.
    Scale { tensor: String, factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub n_checked: usize,
    /// Sampled entries whose perturbation flipped a ReLU unit.
    pub n_skipped_kinks: usize,
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic and central-difference gradients of the teacher-forced
/// loss on a random batch of two sub-expression examples, in f64.
pub fn gradient_check<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    corruption: &GradientCorruption,
    rng: &mut R,
) -> Result<GradCheckReport, NeuralError> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    cfg.validate().map_err(NeuralError::InvalidConfig)?;
    let mut model: Model<f64> = Model::init(cfg, rng);
    let gen = GenConfig::default().with_nesting(2);
    let batch: Vec<Example> = (0..BATCH)
        .map(|_| {
            let expr = sample_expression(rng, &gen).expect("nesting-2 expressions are plentiful");
            Example::new(&expr, Task::SubExpr, Split::Train)
        })
        .collect();
    let prep = prepare(&model, &batch, Regime::TeacherForced, rng)?;
    let (_, mut grads) = model.loss_and_gradients(&prep.src, &prep.tgt, &prep.targets, None::<&mut rand_chacha::ChaCha8Rng>)?;

    if let GradientCorruption::Scale { tensor, factor } = corruption {
        let t = grads
            .tensors_mut()
            .into_iter()
            .find(|t| &t.name == tensor)
            .ok_or_else(|| NeuralError::ShapeMismatch(format!("no tensor named {tensor}")))?;
        t.data.iter_mut().for_each(|g| *g *= factor);
    }

    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_tensor: String::new(), n_checked: 0, n_skipped_kinks: 0 };
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let picks = sample(rng, grad.len(), ENTRIES_PER_TENSOR.min(grad.len())).into_vec();
        for i in picks {
            let original = model.params.tensors()[ti].data[i];
            let mut probe = |delta: f64| -> Result<(f64, Vec<bool>), NeuralError> {
                model.params.tensors_mut()[ti].data[i] = original + delta;
                let loss = model.loss(&prep.src, &prep.tgt, &prep.targets)?;
                let relu = model.relu_pattern(&prep.src, &prep.tgt)?;
                Ok((loss, relu))
            };
            let (plus, relu_plus) = probe(STEP)?;
            let (minus, relu_minus) = probe(-STEP)?;
            model.params.tensors_mut()[ti].data[i] = original;
            // A ReLU switching inside the stencil makes the difference quotient meaningless.
            if relu_plus != relu_minus {
                report.n_skipped_kinks += 1;
                continue;
            }
            let err = relative_error(grad[i], (plus - minus) / (2.0 * STEP));
            report.n_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = name.clone();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_perturbation_changes_nothing() {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: Model<f64> = Model::init(cfg, &mut rng);
        let ex = Example::new(&crate::expr::parse("((1+2)*3)").unwrap(), Task::SubExpr, Split::Train);
        let prep = prepare(&model, &[ex], Regime::TeacherForced, &mut rng).unwrap();
        let mut copy = model.clone();
        copy.params.tensors_mut()[3].data[0] += 0.0;
        assert_eq!(
            model.loss(&prep.src, &prep.tgt, &prep.targets).unwrap(),
            copy.loss(&prep.src, &prep.tgt, &prep.targets).unwrap()
        );
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 24, ..Default::default() };
        for seed in 0..6 {
            let r = gradient_check(&cfg, &GradientCorruption::None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            eprintln!("seed {seed}: {r:?}");
            assert!(r.max_rel_error <= 1e-3, "{r:?}");
            assert!(r.n_checked > 100);
        }
        let bad = GradientCorruption::Scale { tensor: "output.weight".into(), factor: 2.0 };
        let r = gradient_check(&cfg, &bad, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst_tensor, "output.weight");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert!(relative_error(1e-8, 0.0) < 1e-3);
    }
}
