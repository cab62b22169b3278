//! Binary-gated SuperNet: a chain of fixed layers and searchable layers,
//! each searchable layer holding every candidate operation.
//!
//! Weight training runs one sampled candidate per layer
//! ([`SuperNetModel::forward_sampled`]); architecture training runs the full
//! probability-weighted mixture ([`SuperNetModel::forward_mixture`]) so that
//! the logit gradient is exact.

mod arch;
mod latency;
mod normal;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use arch::{sample_gates, sample_gates_seeded, softmax_probs, ArchParams, GateSample};
pub use latency::{expected_latency, LatencyTable};
pub use normal::{
    count_flops_params, derive_normal_net, FlopsParams, LayerSource, NormalLayer, NormalNet,
};

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, op_backward, op_backward_input, op_forward, Cache, OpKind, ParamSet, ParamSlot,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum Block {
    Fixed { op: OpKind },
    Search { candidates: Vec<OpKind> },
}

impl Block {
    pub fn ops(&self) -> Vec<OpKind> {
        match self {
            Block::Fixed { op } => vec![op.clone()],
            Block::Search { candidates } => candidates.clone(),
        }
    }
}

/// Shape of the desk-scale network built by [`Topology::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Per-example input shape `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Channel count of the searchable layers.
    pub width: usize,
    pub layers: usize,
    pub candidates: Vec<String>,
    /// Searchable-layer indices followed by a fixed 2x2 downsampling.
    #[serde(default)]
    pub downsample_after: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_shape: [1, 8, 8],
            classes: 6,
            width: 4,
            layers: 6,
            candidates: ["zero", "identity", "dwsep3e1", "dwsep3e3", "dwsep5e3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            downsample_after: vec![2],
        }
    }
}

/// Network structure without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub blocks: Vec<Block>,
}

impl Topology {
    /// Validates that every candidate in every block maps the incoming shape
    /// to one common outgoing shape and that the chain ends in class logits.
    pub fn new(input_shape: Vec<usize>, classes: usize, blocks: Vec<Block>) -> Result<Self> {
        let topo = Topology {
            input_shape,
            classes,
            blocks,
        };
        topo.example_shapes()?;
        Ok(topo)
    }

    /// Stem conv + ReLU, searchable layers with optional downsampling, then a
    /// flatten and dense classifier.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        if spec.candidates.len() < 2 {
            return Err(Error::config(
                "model.candidates",
                "need at least two candidates",
            ));
        }
        if spec.layers == 0 || spec.width == 0 || spec.classes < 2 {
            return Err(Error::config(
                "model",
                "layers, width must be positive and classes >= 2",
            ));
        }
        let candidates: Vec<OpKind> = spec
            .candidates
            .iter()
            .map(|name| OpKind::parse_candidate(name, spec.width))
            .collect::<Result<_>>()
            .map_err(|e| Error::config("model.candidates", e.to_string()))?;
        let [c, mut h, mut w] = spec.input_shape;
        let mut blocks = vec![
            Block::Fixed {
                op: OpKind::Conv {
                    kernel: 3,
                    in_channels: c,
                    out_channels: spec.width,
                },
            },
            Block::Fixed { op: OpKind::Relu },
        ];
        for layer in 0..spec.layers {
            blocks.push(Block::Search {
                candidates: candidates.clone(),
            });
            if spec.downsample_after.contains(&layer) {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::config(
                        "model.downsample_after",
                        format!("cannot halve a {h}x{w} map after layer {layer}"),
                    ));
                }
                h /= 2;
                w /= 2;
                blocks.push(Block::Fixed {
                    op: OpKind::Downsample,
                });
            }
        }
        if let Some(&bad) = spec.downsample_after.iter().find(|&&l| l >= spec.layers) {
            return Err(Error::config(
                "model.downsample_after",
                format!("layer {bad} does not exist"),
            ));
        }
        blocks.push(Block::Fixed {
            op: OpKind::Flatten,
        });
        blocks.push(Block::Fixed {
            op: OpKind::Dense {
                in_features: spec.width * h * w,
                out_features: spec.classes,
            },
        });
        Topology::new(spec.input_shape.to_vec(), spec.classes, blocks)
    }

    /// Unbatched input shape of every block plus the final output shape.
    pub fn example_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut batched: Vec<usize> = std::iter::once(1)
            .chain(self.input_shape.iter().copied())
            .collect();
        for (i, block) in self.blocks.iter().enumerate() {
            let ops = block.ops();
            if let Block::Search { candidates } = block {
                if candidates.len() < 2 {
                    return Err(Error::Topology(format!(
                        "searchable block {i} has fewer than 2 candidates"
                    )));
                }
            }
            let mut next: Option<Vec<usize>> = None;
            for op in &ops {
                op.validate()?;
                let out = op.output_shape(&batched)?;
                match &next {
                    Some(prev) if *prev != out => {
                        return Err(Error::Topology(format!(
                            "block {i}: candidate {op} yields {out:?}, others {prev:?}"
                        )))
                    }
                    _ => next = Some(out),
                }
            }
            batched = next.expect("block has at least one op");
            shapes.push(batched[1..].to_vec());
        }
        if batched != [1, self.classes] {
            return Err(Error::Topology(format!(
                "network output {:?} is not [batch, {}]",
                &batched[1..],
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn block_ops(&self) -> Vec<Vec<OpKind>> {
        self.blocks.iter().map(Block::ops).collect()
    }

    /// Block index of every searchable layer, in order.
    pub fn search_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b, Block::Search { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Search { candidates } => Some(candidates.len()),
                Block::Fixed { .. } => None,
            })
            .collect()
    }

    pub fn candidates(&self, layer: usize) -> &[OpKind] {
        let block = self.search_blocks()[layer];
        match &self.blocks[block] {
            Block::Search { candidates } => candidates,
            Block::Fixed { .. } => unreachable!("search_blocks only lists searchable blocks"),
        }
    }

    pub fn check_arch(&self, arch: &ArchParams) -> Result<()> {
        if arch.candidate_counts() != self.candidate_counts() {
            return Err(Error::Topology(format!(
                "architecture has candidate counts {:?}, network has {:?}",
                arch.candidate_counts(),
                self.candidate_counts()
            )));
        }
        Ok(())
    }

    fn check_gates(&self, gates: &GateSample) -> Result<()> {
        let counts = self.candidate_counts();
        if gates.choices.len() != counts.len()
            || gates.choices.iter().zip(&counts).any(|(&c, &n)| c >= n)
        {
            return Err(Error::Topology(format!(
                "gates {:?} do not fit candidate counts {counts:?}",
                gates.choices
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::Shape(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// Per-block record of a sampled forward pass.
#[derive(Clone, Debug)]
pub struct SampledTrace {
    steps: Vec<(usize, usize, Cache)>,
}

impl SampledTrace {
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.steps
            .iter()
            .flat_map(|(_, _, c)| c.activation_pattern())
            .collect()
    }
}

#[derive(Clone, Debug)]
enum MixStep {
    Fixed(Cache),
    Mix {
        layer: usize,
        probs: Vec<f64>,
        outputs: Vec<Tensor>,
        caches: Vec<Cache>,
    },
}

/// Per-block record of a mixture forward pass.
#[derive(Clone, Debug)]
pub struct MixtureTrace {
    steps: Vec<MixStep>,
}

impl MixtureTrace {
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                MixStep::Fixed(c) => out.extend(c.activation_pattern()),
                MixStep::Mix { caches, .. } => caches
                    .iter()
                    .for_each(|c| out.extend(c.activation_pattern())),
            }
        }
        out
    }
}

/// Parameter gradient of a sampled pass together with the slots it touched.
#[derive(Clone, Debug)]
pub struct SampledGrads {
    pub grads: Vec<f64>,
    pub active: Vec<ParamSlot>,
}

/// Objective value and logit gradient of the architecture step.
#[derive(Clone, Debug)]
pub struct AlphaGrad {
    pub loss: f64,
    pub cross_entropy: f64,
    pub latency_ms: f64,
    pub grad: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperNetModel {
    pub topology: Topology,
    pub params: ParamSet,
}

impl SuperNetModel {
    pub fn init(topology: Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init(&topology.block_ops(), &mut rng);
        SuperNetModel { topology, params }
    }

    pub fn with_params(topology: Topology, params: ParamSet) -> Result<Self> {
        let expected = ParamSet::zeros(&topology.block_ops());
        if !expected.same_layout(&params) {
            return Err(Error::Topology(
                "parameter layout does not match the network".into(),
            ));
        }
        Ok(SuperNetModel { topology, params })
    }

    /// Runs exactly one candidate per searchable layer.
    pub fn forward_sampled(
        &self,
        gates: &GateSample,
        batch: &Tensor,
    ) -> Result<(Tensor, SampledTrace)> {
        self.topology.check_gates(gates)?;
        self.topology.check_batch(batch)?;
        let mut x = batch.clone();
        let mut steps = Vec::with_capacity(self.topology.blocks.len());
        let mut layer = 0;
        for (b, block) in self.topology.blocks.iter().enumerate() {
            let (cand, op) = match block {
                Block::Fixed { op } => (0, op),
                Block::Search { candidates } => {
                    let c = gates.choices[layer];
                    layer += 1;
                    (c, &candidates[c])
                }
            };
            let (y, cache) = op_forward(op, self.params.get(b, cand), &x)?;
            steps.push((b, cand, cache));
            x = y;
        }
        Ok((x, SampledTrace { steps }))
    }

    pub fn backward_sampled(
        &self,
        trace: &SampledTrace,
        grad_logits: &Tensor,
    ) -> Result<SampledGrads> {
        let mut grads = vec![0.0; self.params.len()];
        let mut active = Vec::with_capacity(trace.steps.len());
        let mut g = grad_logits.clone();
        for (b, cand, cache) in trace.steps.iter().rev() {
            let slot = self.params.slot(*b, *cand);
            let (gin, gp) = op_backward(cache.op(), self.params.get(*b, *cand), cache, &g)?;
            grads[slot.range()].copy_from_slice(&gp);
            active.push(slot);
            g = gin;
        }
        active.reverse();
        Ok(SampledGrads { grads, active })
    }

    /// Every searchable layer outputs `sum_n p_n * o_n(x)`.
    pub fn forward_mixture(
        &self,
        arch: &ArchParams,
        batch: &Tensor,
    ) -> Result<(Tensor, MixtureTrace)> {
        self.topology.check_arch(arch)?;
        self.topology.check_batch(batch)?;
        let mut x = batch.clone();
        let mut steps = Vec::with_capacity(self.topology.blocks.len());
        let mut layer = 0;
        for (b, block) in self.topology.blocks.iter().enumerate() {
            match block {
                Block::Fixed { op } => {
                    let (y, cache) = op_forward(op, self.params.get(b, 0), &x)?;
                    steps.push(MixStep::Fixed(cache));
                    x = y;
                }
                Block::Search { candidates } => {
                    let probs = arch.probs(layer);
                    let mut outputs = Vec::with_capacity(candidates.len());
                    let mut caches = Vec::with_capacity(candidates.len());
                    let mut mixed: Option<Tensor> = None;
                    for (n, op) in candidates.iter().enumerate() {
                        let (y, cache) = op_forward(op, self.params.get(b, n), &x)?;
                        match &mut mixed {
                            None => mixed = Some(y.scaled(probs[n])),
                            Some(m) => m.add_scaled(&y, probs[n])?,
                        }
                        outputs.push(y);
                        caches.push(cache);
                    }
                    x = mixed.expect("at least two candidates");
                    steps.push(MixStep::Mix {
                        layer,
                        probs,
                        outputs,
                        caches,
                    });
                    layer += 1;
                }
            }
        }
        Ok((x, MixtureTrace { steps }))
    }

    /// Logit gradient of a loss whose gradient at the mixture output is
    /// `grad_logits`, through the softmax Jacobian
    /// `dp_j/dalpha_i = p_j (delta_ij - p_i)`.
    pub fn backward_mixture(
        &self,
        trace: &MixtureTrace,
        grad_logits: &Tensor,
    ) -> Result<Vec<Vec<f64>>> {
        let counts = self.topology.candidate_counts();
        let mut grad_alpha: Vec<Vec<f64>> = counts.iter().map(|&n| vec![0.0; n]).collect();
        let mut g = grad_logits.clone();
        for (b, step) in trace.steps.iter().enumerate().rev() {
            match step {
                MixStep::Fixed(cache) => {
                    g = op_backward_input(cache.op(), self.params.get(b, 0), cache, &g)?;
                }
                MixStep::Mix {
                    layer,
                    probs,
                    outputs,
                    caches,
                } => {
                    let d_probs: Vec<f64> = outputs.iter().map(|o| o.dot(&g)).collect();
                    let mean: f64 = probs.iter().zip(&d_probs).map(|(p, d)| p * d).sum();
                    for (n, slot) in grad_alpha[*layer].iter_mut().enumerate() {
                        *slot = probs[n] * (d_probs[n] - mean);
                    }
                    let mut gin: Option<Tensor> = None;
                    for (n, cache) in caches.iter().enumerate() {
                        if *cache.op() == OpKind::Zero {
                            continue;
                        }
                        let part = op_backward_input(
                            cache.op(),
                            self.params.get(b, n),
                            cache,
                            &g.scaled(probs[n]),
                        )?;
                        match &mut gin {
                            None => gin = Some(part),
                            Some(acc) => acc.add_scaled(&part, 1.0)?,
                        }
                    }
                    g = gin.unwrap_or_else(|| Tensor::zeros(g.shape()));
                }
            }
        }
        Ok(grad_alpha)
    }

    /// Gradient over the logits of
    /// `cross_entropy(forward_mixture) + latency_weight * expected_latency`.
    pub fn alpha_gradient(
        &self,
        arch: &ArchParams,
        batch: &Tensor,
        labels: &[usize],
        latency: Option<&LatencyTable>,
        latency_weight: f64,
    ) -> Result<AlphaGrad> {
        let (logits, trace) = self.forward_mixture(arch, batch)?;
        let (ce, grad_logits) = cross_entropy(&logits, labels)?;
        let mut grad = self.backward_mixture(&trace, &grad_logits)?;
        let mut latency_ms = 0.0;
        if let Some(table) = latency {
            let (ms, lat_grad) = expected_latency(arch, table)?;
            latency_ms = ms;
            for (row, lrow) in grad.iter_mut().zip(&lat_grad) {
                for (g, l) in row.iter_mut().zip(lrow) {
                    *g += latency_weight * l;
                }
            }
        }
        if grad.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("architecture gradient".into()));
        }
        let loss = ce
            + if latency.is_some() {
                latency_weight * latency_ms
            } else {
                0.0
            };
        Ok(AlphaGrad {
            loss,
            cross_entropy: ce,
            latency_ms,
            grad,
        })
    }

    /// Multiply-adds and parameters of the path selected by `gates`.
    pub fn path_flops_params(&self, gates: &GateSample) -> Result<FlopsParams> {
        self.topology.check_gates(gates)?;
        let shapes = self.topology.example_shapes()?;
        let mut acc = FlopsParams::default();
        let mut layer = 0;
        for (b, block) in self.topology.blocks.iter().enumerate() {
            let op = match block {
                Block::Fixed { op } => op,
                Block::Search { candidates } => {
                    layer += 1;
                    &candidates[gates.choices[layer - 1]]
                }
            };
            acc.macs += op.macs(&shapes[b]);
            acc.params += op.param_len() as u64;
        }
        Ok(acc)
    }

    /// Largest path cost: the most expensive candidate in every layer.
    pub fn max_path_flops(&self) -> Result<u64> {
        let shapes = self.topology.example_shapes()?;
        Ok(self
            .topology
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| {
                block
                    .ops()
                    .iter()
                    .map(|op| op.macs(&shapes[b]))
                    .max()
                    .unwrap_or(0)
            })
            .sum())
    }
}
