use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax;

/// Architecture logits, one vector per searchable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    logits: Vec<Vec<f64>>,
}

impl ArchParams {
    /// All-zero logits (uniform candidate probabilities).
    pub fn uniform(candidate_counts: &[usize]) -> Self {
        ArchParams {
            logits: candidate_counts.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        for (layer, row) in logits.iter().enumerate() {
            if row.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} has {} candidates, need at least 2",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "architecture logits of layer {layer}"
                )));
            }
        }
        Ok(ArchParams { logits })
    }

    pub fn layers(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.logits[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.logits[layer]
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }

    pub fn probs(&self, layer: usize) -> Vec<f64> {
        softmax_probs(&self.logits[layer])
    }

    pub fn all_probs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax_probs(l)).collect()
    }

    /// Flat copy in registry order (layer-major).
    pub fn flatten(&self) -> Vec<f64> {
        self.logits.iter().flatten().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.logits.iter().map(Vec::len).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "{} logits for {total} slots",
                flat.len()
            )));
        }
        let mut offset = 0;
        for row in &mut self.logits {
            let len = row.len();
            row.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|v| v.is_finite())
    }

    /// Per-layer argmax, lowest index on ties.
    pub fn argmax(&self) -> GateSample {
        GateSample {
            choices: self.logits.iter().map(|l| crate::nn::argmax(l)).collect(),
            seed: None,
        }
    }
}

/// Max-shifted softmax over one layer's logits.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// One-hot gate per layer, stored as the index of the active candidate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSample {
    pub choices: Vec<usize>,
    pub seed: Option<u64>,
}

impl GateSample {
    pub fn fixed(choices: Vec<usize>) -> Self {
        GateSample {
            choices,
            seed: None,
        }
    }

    /// Binary gate vector `b` for one layer.
    pub fn one_hot(&self, layer: usize, candidates: usize) -> Vec<u8> {
        (0..candidates)
            .map(|n| u8::from(n == self.choices[layer]))
            .collect()
    }
}

/// Draws one candidate per layer with probability `softmax(alpha)`.
pub fn sample_gates<R: Rng + ?Sized>(arch: &ArchParams, rng: &mut R) -> GateSample {
    let choices = arch
        .logits
        .iter()
        .map(|logits| draw_index(&softmax_probs(logits), rng.gen::<f64>()))
        .collect();
    GateSample {
        choices,
        seed: None,
    }
}

/// [`sample_gates`] driven by a fresh generator; the seed is recorded.
pub fn sample_gates_seeded(arch: &ArchParams, seed: u64) -> GateSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = sample_gates(arch, &mut rng);
    gates.seed = Some(seed);
    gates
}

fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last reachable index.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = softmax_probs(&logits);
            let total: f64 = logits.iter().map(|z| z.exp()).sum();
            for (pi, z) in p.iter().zip(&logits) {
                assert!((pi - z.exp() / total).abs() < 1e-12);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_distribution_always_picks_first() {
        let arch = ArchParams::from_logits(vec![vec![0.0, -1000.0, -1000.0, -1000.0]; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            assert_eq!(sample_gates(&arch, &mut rng).choices, vec![0, 0, 0]);
        }
    }

    #[test]
    fn same_seed_same_gates() {
        let arch = ArchParams::from_logits(vec![vec![0.3, -0.2, 1.0]; 5]).unwrap();
        let a: Vec<_> = (0..20).map(|s| sample_gates_seeded(&arch, s)).collect();
        let b: Vec<_> = (0..20).map(|s| sample_gates_seeded(&arch, s)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_has_single_active_gate() {
        let arch = ArchParams::uniform(&[4, 4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = sample_gates(&arch, &mut rng);
            for (layer, &n) in arch.candidate_counts().iter().enumerate() {
                let b = g.one_hot(layer, n);
                assert_eq!(b.iter().map(|&x| x as usize).sum::<usize>(), 1);
            }
        }
    }

    #[test]
    fn from_logits_validates() {
        assert!(ArchParams::from_logits(vec![vec![0.0]]).is_err());
        assert!(ArchParams::from_logits(vec![vec![0.0, f64::NAN]]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut arch = ArchParams::uniform(&[2, 3]);
        arch.assign_flat(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(arch.layer(1), &[3.0, 4.0, 5.0]);
        assert_eq!(arch.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(arch.assign_flat(&[1.0]).is_err());
    }
}
