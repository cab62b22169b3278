#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub mod oracles;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fdnas::config::ExperimentConfig;

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, absolute when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`. `f` returns the objective and the
/// ReLU sign pattern; `None` means a perturbation crossed a kink and the case
/// should be skipped.
pub fn central_diff<F>(x: &[f64], eps: f64, mut f: F) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<bool>),
{
    let (_, base) = f(x);
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (fp, pp) = f(&probe);
        probe[i] = x[i] - eps;
        let (fm, pm) = f(&probe);
        probe[i] = x[i];
        if pp != base || pm != base {
            return None;
        }
        out.push((fp - fm) / (2.0 * eps));
    }
    Some(out)
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("config loads")
}
