//! Sinusoidal and label positional encodings.

use ndarray::Array2;
use rand::Rng;

use super::config::{ModelConfig, PeMode};
use super::params::{cast, Scalar};
use super::NeuralError;

/// `m x d_model` table: column `2i` holds `sin(pos / 10000^(2i/d))`, column
/// `2i+1` the matching cosine.
pub fn sinusoidal_table<F: Scalar>(m: usize, d_model: usize) -> Array2<F> {
    assert!(d_model % 2 == 0, "d_model must be even");
    let mut table = Array2::zeros((m, d_model));
    for pos in 0..m {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            table[[pos, 2 * i]] = cast(angle.sin());
            table[[pos, 2 * i + 1]] = cast(angle.cos());
        }
    }
    table
}

/// `k` distinct integers drawn uniformly from `[0, m)`, ascending.
pub fn label_positions<R: Rng + ?Sized>(rng: &mut R, k: usize, m: usize) -> Result<Vec<usize>, NeuralError> {
    if k > m {
        return Err(NeuralError::KTooLarge { k, m });
    }
    let mut positions = rand::seq::index::sample(rng, m, k).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

/// Positions for an encoder input of `len` tokens.
pub fn encoder_positions<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R, len: usize) -> Result<Vec<usize>, NeuralError> {
    if len > cfg.max_positions {
        return Err(NeuralError::SequenceTooLong { len, max: cfg.max_positions });
    }
    match cfg.pe_mode {
        PeMode::Sinusoidal => Ok((0..len).collect()),
        PeMode::Label => label_positions(rng, len, cfg.max_positions),
    }
}

/// Positions for a decoder input; the full generation span is sampled up
/// front so that a sequence of unknown final length gets a consistent prefix.
/// The first `len` entries are used.
pub fn decoder_positions<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Vec<usize> {
    let span = cfg.decoder_span();
    match cfg.pe_mode {
        PeMode::Sinusoidal => (0..span).collect(),
        PeMode::Label => label_positions(rng, span, cfg.max_positions).expect("validated config"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn table_entries() {
        let t: Array2<f64> = sinusoidal_table(5, 8);
        for i in 0..4 {
            assert_eq!(t[[0, 2 * i]], 0.0);
            assert_eq!(t[[0, 2 * i + 1]], 1.0);
        }
        assert!((t[[1, 0]] - 0.841471).abs() < 1e-6);
        assert!((t[[1, 1]] - 0.540302).abs() < 1e-6);
        let expected = (3.0 / 10000f64.powf(4.0 / 8.0)).sin();
        assert!((t[[3, 4]] - expected).abs() < 1e-12);
    }

    #[test]
    fn label_positions_basic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(label_positions(&mut rng, 3, 3).unwrap(), vec![0, 1, 2]);
        let one = label_positions(&mut rng, 1, 100).unwrap();
        assert!(one[0] < 100);
        assert!(matches!(label_positions(&mut rng, 4, 3), Err(NeuralError::KTooLarge { k: 4, m: 3 })));
        for _ in 0..100 {
            let p = label_positions(&mut rng, 20, 150).unwrap();
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert!(p.iter().all(|&x| x < 150));
        }
    }

    #[test]
    fn label_pairs_are_uniform() {
        // Pearson chi-square against 45 equally likely unordered pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for _ in 0..draws {
            let p = label_positions(&mut rng, 2, 10).unwrap();
            *counts.entry((p[0], p[1])).or_default() += 1;
        }
        assert_eq!(counts.len(), 45);
        let expected = draws as f64 / 45.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 44 degrees of freedom is about 78.7.
        assert!(chi2 < 78.7, "chi2 = {chi2}");
    }
}
