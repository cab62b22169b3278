//! Fast consistency checks behind the `selftest` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::federation::{aggregate, Checkpoint, Normalization, ServerState};
use crate::nn::{cross_entropy, op_backward, op_forward, OpKind};
use crate::supernet::{
    sample_gates, softmax_probs, ArchParams, ModelSpec, SuperNetModel, Topology,
};
use crate::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Input gradient of `<op(x), r>` against central differences.
fn op_gradient_ok(op: &OpKind, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![2, 2, 4, 4];
    let x = Tensor::new(shape.clone(), random(&mut rng, 64)).expect("shape");
    let params = op.init_params(&mut rng);
    let Ok((y, cache)) = op_forward(op, &params, &x) else {
        return false;
    };
    let r = Tensor::new(y.shape().to_vec(), random(&mut rng, y.len())).expect("shape");
    let Ok((gin, _)) = op_backward(op, &params, &cache, &r) else {
        return false;
    };
    let eps = 1e-5;
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = op_forward(op, &params, &plus).map(|(t, _)| t.dot(&r));
        let fm = op_forward(op, &params, &minus).map(|(t, _)| t.dot(&r));
        match (fp, fm) {
            (Ok(a), Ok(b)) => *slot = (a - b) / (2.0 * eps),
            _ => return false,
        }
    }
    rel_err(gin.data(), &numeric) < 1e-4
}

fn cross_entropy_ok() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::new(vec![3, 4], random(&mut rng, 12)).expect("shape");
    let labels = [0, 3, 1];
    let Ok((_, grad)) = cross_entropy(&logits, &labels) else {
        return false;
    };
    let eps = 1e-6;
    let numeric: Vec<f64> = (0..12)
        .map(|i| {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            (cross_entropy(&p, &labels).expect("ce").0 - cross_entropy(&m, &labels).expect("ce").0)
                / (2.0 * eps)
        })
        .collect();
    rel_err(grad.data(), &numeric) < 1e-5
}

fn aggregation_ok() -> bool {
    let a = [0.0, 1.0];
    let b = [4.0, -1.0];
    let p = Normalization::Participants;
    let one = aggregate(&[&a], &[5], &p).map(|v| v == a);
    let weighted = aggregate(&[&a, &b], &[1, 3], &p).map(|v| v == vec![3.0, -0.5]);
    let swapped = aggregate(&[&b, &a], &[3, 1], &p).map(|v| v == vec![3.0, -0.5]);
    matches!((one, weighted, swapped), (Ok(true), Ok(true), Ok(true)))
}

fn gate_frequencies_ok() -> bool {
    let arch = ArchParams::from_logits(vec![vec![0.3, -0.2, 1.0, 0.0]]).expect("logits");
    let p = softmax_probs(arch.layer(0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_gates(&arch, &mut rng).choices[0]] += 1;
    }
    let l1: f64 = counts
        .iter()
        .zip(&p)
        .map(|(&c, q)| (c as f64 / draws as f64 - q).abs())
        .sum();
    l1 < 0.04
}

fn checkpoint_ok() -> bool {
    let spec = ModelSpec {
        input_shape: [1, 4, 4],
        classes: 3,
        width: 2,
        layers: 2,
        candidates: vec!["zero".into(), "identity".into(), "dwsep3e3".into()],
        downsample_after: vec![],
    };
    let Ok(topo) = Topology::build(&spec) else {
        return false;
    };
    let ck = Checkpoint::new(
        "selftest",
        0,
        "selftest",
        ServerState::fresh(SuperNetModel::init(topo, 5)),
    );
    let Ok(text) = ck.to_json() else { return false };
    matches!(Checkpoint::from_json(&text).and_then(|b| b.to_json()), Ok(again) if again == text)
}

/// Name and outcome of every check.
pub fn run_all() -> Vec<(&'static str, bool)> {
    let ops = [
        OpKind::Conv {
            kernel: 3,
            in_channels: 2,
            out_channels: 2,
        },
        OpKind::DepthwiseSepConv {
            kernel: 3,
            channels: 2,
            expansion: 1,
        },
        OpKind::DepthwiseSepConv {
            kernel: 5,
            channels: 2,
            expansion: 3,
        },
        OpKind::AvgPool { kernel: 3 },
    ];
    vec![
        (
            "candidate input gradients",
            ops.iter().all(|op| op_gradient_ok(op, 11)),
        ),
        ("cross-entropy gradient", cross_entropy_ok()),
        ("aggregation arithmetic", aggregation_ok()),
        ("gate sampling frequencies", gate_frequencies_ok()),
        ("checkpoint round trip", checkpoint_ok()),
    ]
}
