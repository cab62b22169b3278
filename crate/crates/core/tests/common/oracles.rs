//! Finite-difference oracles shared by the gradient tests and the acceptance gate.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fdnas::nn::{cross_entropy, op_backward, op_forward, OpKind};
use fdnas::supernet::{
    expected_latency, ArchParams, LatencyTable, ModelSpec, SuperNetModel, Topology,
};
use fdnas::Tensor;

use super::{central_diff, random, rel_err};

/// Number of kink-free cases checked and the worst relative error seen.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sweep {
    pub cases: usize,
    pub max_err: f64,
}

impl Sweep {
    fn record(&mut self, err: f64) {
        self.cases += 1;
        self.max_err = self.max_err.max(err);
    }
}

const OP_KINDS: usize = 9;

fn random_op(rng: &mut ChaCha8Rng, channels: usize) -> (usize, OpKind) {
    let kind = rng.gen_range(0..OP_KINDS);
    let op = match kind {
        0 => OpKind::Identity,
        1 => OpKind::Zero,
        2 => OpKind::Conv {
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            in_channels: channels,
            out_channels: channels,
        },
        3 => OpKind::DepthwiseSepConv {
            kernel: 3,
            channels,
            expansion: 1,
        },
        4 => OpKind::DepthwiseSepConv {
            kernel: 3,
            channels,
            expansion: 3,
        },
        5 => OpKind::DepthwiseSepConv {
            kernel: 5,
            channels,
            expansion: 3,
        },
        6 => OpKind::AvgPool { kernel: 3 },
        7 => OpKind::Relu,
        _ => OpKind::Downsample,
    };
    (kind, op)
}

/// Input and parameter gradient errors of `<op(x), r>`, or `None` when the
/// case straddles a ReLU kink.
fn op_errors(op: &OpKind, x: &Tensor, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    // Larger parameters keep the residual branch visible in the objective.
    let params: Vec<f64> = op.init_params(rng).iter().map(|p| p * 3.0).collect();
    let (y, cache) = op_forward(op, &params, x).unwrap();
    let r = Tensor::new(y.shape().to_vec(), random(rng, y.len())).unwrap();
    let (gin, gparams) = op_backward(op, &params, &cache, &r).unwrap();
    assert_eq!(gparams.len(), params.len(), "{op}");
    let shape = x.shape().to_vec();
    let eps = 1e-6;
    let num_in = central_diff(x.data(), eps, |v| {
        let t = Tensor::new(shape.clone(), v.to_vec()).unwrap();
        let (out, c) = op_forward(op, &params, &t).unwrap();
        (out.dot(&r), c.activation_pattern())
    })?;
    let num_params = central_diff(&params, eps, |p| {
        let (out, c) = op_forward(op, p, x).unwrap();
        (out.dot(&r), c.activation_pattern())
    })?;
    let e_params = if params.is_empty() {
        0.0
    } else {
        rel_err(&gparams, &num_params)
    };
    Some((rel_err(gin.data(), &num_in), e_params))
}

/// Every candidate and fixed convolutional operation on random shapes. Keeps
/// drawing until `min_cases` kink-free cases cover every operation kind.
pub fn operations(min_cases: usize) -> Sweep {
    let mut sweep = Sweep::default();
    let mut seen = HashSet::new();
    for seed in 0..(min_cases as u64) * 4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = rng.gen_range(1..=3);
        let side = [4, 6][rng.gen_range(0..2)];
        let batch = rng.gen_range(1..=2);
        let (kind, op) = random_op(&mut rng, channels);
        let x = Tensor::new(
            vec![batch, channels, side, side],
            random(&mut rng, batch * channels * side * side),
        )
        .unwrap();
        if let Some((a, b)) = op_errors(&op, &x, &mut rng) {
            sweep.record(a.max(b));
            seen.insert(kind);
        }
        if sweep.cases >= min_cases && seen.len() == OP_KINDS {
            return sweep;
        }
    }
    panic!(
        "only {} kink-free cases over {} operation kinds",
        sweep.cases,
        seen.len()
    );
}

/// Fully connected head.
pub fn dense(cases: usize) -> Sweep {
    let mut sweep = Sweep::default();
    for seed in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (n, i, o) = (
            rng.gen_range(1..4),
            rng.gen_range(1..10),
            rng.gen_range(2..7),
        );
        let op = OpKind::Dense {
            in_features: i,
            out_features: o,
        };
        let x = Tensor::new(vec![n, i], random(&mut rng, n * i)).unwrap();
        let (a, b) = op_errors(&op, &x, &mut rng).expect("dense is smooth");
        sweep.record(a.max(b));
    }
    sweep
}

pub fn cross_entropy_sweep(cases: usize) -> Sweep {
    let mut sweep = Sweep::default();
    for seed in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..8));
        let scale = rng.gen_range(0.1..5.0);
        let logits: Vec<f64> = random(&mut rng, n * k).iter().map(|v| v * scale).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let t = Tensor::new(vec![n, k], logits.clone()).unwrap();
        let (_, grad) = cross_entropy(&t, &labels).unwrap();
        let numeric = central_diff(&logits, 1e-6, |v| {
            let t = Tensor::new(vec![n, k], v.to_vec()).unwrap();
            (cross_entropy(&t, &labels).unwrap().0, Vec::new())
        })
        .unwrap();
        sweep.record(rel_err(grad.data(), &numeric));
    }
    sweep
}

pub fn small_model(rng: &mut ChaCha8Rng) -> SuperNetModel {
    let spec = ModelSpec {
        input_shape: [1, 4, 4],
        classes: 3,
        width: 2,
        layers: rng.gen_range(1..=3),
        candidates: [
            "zero", "identity", "dwsep3e1", "dwsep3e3", "dwsep5e3", "conv3", "avgpool3",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        downsample_after: vec![0],
    };
    SuperNetModel::init(Topology::build(&spec).unwrap(), rng.gen())
}

pub fn random_arch(rng: &mut ChaCha8Rng, counts: &[usize]) -> ArchParams {
    ArchParams::from_logits(counts.iter().map(|&c| random(rng, c)).collect()).unwrap()
}

/// Gradient of the mixture cross-entropy with respect to the architecture logits.
pub fn mixture_alpha(cases: usize) -> Sweep {
    let mut sweep = Sweep::default();
    for seed in 0..(cases as u64) * 4 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let model = small_model(&mut rng);
        let arch = random_arch(&mut rng, &model.topology.candidate_counts());
        let n = rng.gen_range(1..4);
        let x = Tensor::new(vec![n, 1, 4, 4], random(&mut rng, n * 16)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let analytic = model.alpha_gradient(&arch, &x, &labels, None, 0.0).unwrap();
        let numeric = central_diff(&arch.flatten(), 1e-6, |v| {
            let mut a = arch.clone();
            a.assign_flat(v).unwrap();
            let (logits, trace) = model.forward_mixture(&a, &x).unwrap();
            (
                cross_entropy(&logits, &labels).unwrap().0,
                trace.activation_pattern(),
            )
        });
        if let Some(numeric) = numeric {
            sweep.record(rel_err(&analytic.grad.concat(), &numeric));
        }
        if sweep.cases == cases {
            return sweep;
        }
    }
    panic!("only {} kink-free mixture cases", sweep.cases);
}

pub fn expected_latency_sweep(cases: usize) -> Sweep {
    let mut sweep = Sweep::default();
    for seed in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let counts: Vec<usize> = (0..rng.gen_range(1..7))
            .map(|_| rng.gen_range(2..7))
            .collect();
        let rows: Vec<Vec<f64>> = counts
            .iter()
            .map(|&c| (0..c).map(|_| rng.gen_range(0.0..20.0)).collect())
            .collect();
        let table = LatencyTable::from_rows("dev", &rows).unwrap();
        let arch = random_arch(&mut rng, &counts);
        let (_, grad) = expected_latency(&arch, &table).unwrap();
        let numeric = central_diff(&arch.flatten(), 1e-5, |v| {
            let mut a = arch.clone();
            a.assign_flat(v).unwrap();
            (expected_latency(&a, &table).unwrap().0, Vec::new())
        })
        .unwrap();
        sweep.record(rel_err(&grad.concat(), &numeric));
    }
    sweep
}
