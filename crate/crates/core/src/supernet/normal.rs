use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchParams, Block, GateSample, SuperNetModel};
use crate::error::{Error, Result};
use crate::nn::{op_backward, op_forward, Cache, OpKind, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSource {
    Fixed { block: usize },
    Searched { layer: usize, candidate: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalLayer {
    pub op: OpKind,
    pub source: LayerSource,
}

/// A discrete network: one operation per layer, no mixture nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalNet {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Chosen candidate per searchable layer, including `Zero` choices.
    pub choices: Vec<usize>,
    pub layers: Vec<NormalLayer>,
    pub params: ParamSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsParams {
    pub macs: u64,
    pub params: u64,
}

/// Per-layer argmax of the logits (lowest index on ties). Layers whose
/// winner is `Zero` are dropped; chosen weights are copied verbatim.
pub fn derive_normal_net(net: &SuperNetModel, arch: &ArchParams) -> Result<NormalNet> {
    if !arch.is_finite() {
        return Err(Error::NonFinite("architecture logits".into()));
    }
    net.topology.check_arch(arch)?;
    NormalNet::from_gates(net, &arch.argmax())
}

/// Analytic multiply-add and parameter counts of a discrete network.
pub fn count_flops_params(net: &NormalNet) -> FlopsParams {
    let mut shape = net.input_shape.clone();
    let mut acc = FlopsParams::default();
    for layer in &net.layers {
        acc.macs += layer.op.macs(&shape);
        acc.params += layer.op.param_len() as u64;
        let batched: Vec<usize> = std::iter::once(1).chain(shape.iter().copied()).collect();
        // Layer chains are validated on construction.
        shape = layer.op.output_shape(&batched).expect("validated chain")[1..].to_vec();
    }
    acc
}

impl NormalNet {
    /// Extracts the path selected by `gates`.
    pub fn from_gates(net: &SuperNetModel, gates: &GateSample) -> Result<Self> {
        let topo = &net.topology;
        let mut layers = Vec::new();
        let mut values = Vec::new();
        let mut layer = 0;
        for (b, block) in topo.blocks.iter().enumerate() {
            match block {
                Block::Fixed { op } => {
                    layers.push(NormalLayer {
                        op: op.clone(),
                        source: LayerSource::Fixed { block: b },
                    });
                    values.extend_from_slice(net.params.get(b, 0));
                }
                Block::Search { candidates } => {
                    let candidate = *gates
                        .choices
                        .get(layer)
                        .filter(|&&c| c < candidates.len())
                        .ok_or_else(|| {
                            Error::Topology(format!("no valid gate for searchable layer {layer}"))
                        })?;
                    if candidates[candidate] != OpKind::Zero {
                        layers.push(NormalLayer {
                            op: candidates[candidate].clone(),
                            source: LayerSource::Searched { layer, candidate },
                        });
                        values.extend_from_slice(net.params.get(b, candidate));
                    }
                    layer += 1;
                }
            }
        }
        if gates.choices.len() != layer {
            return Err(Error::Topology(format!(
                "{} gates for {layer} searchable layers",
                gates.choices.len()
            )));
        }
        let ops: Vec<Vec<OpKind>> = layers.iter().map(|l| vec![l.op.clone()]).collect();
        let params = ParamSet::from_values(&ops, values)?;
        let out = NormalNet {
            input_shape: topo.input_shape.clone(),
            classes: topo.classes,
            choices: gates.choices.clone(),
            layers,
            params,
        };
        out.validate()?;
        Ok(out)
    }

    /// Checks the layer chain and parameter layout; used after loading.
    pub fn validate(&self) -> Result<()> {
        let mut shape: Vec<usize> = std::iter::once(1)
            .chain(self.input_shape.iter().copied())
            .collect();
        for layer in &self.layers {
            layer.op.validate()?;
            shape = layer.op.output_shape(&shape)?;
        }
        if shape != [1, self.classes] {
            return Err(Error::Topology(format!(
                "normal net ends in {:?}, expected [{}]",
                &shape[1..],
                self.classes
            )));
        }
        let expected = ParamSet::zeros(&self.op_blocks());
        if !expected.same_layout(&self.params) {
            return Err(Error::Topology(
                "normal net parameters do not match its layers".into(),
            ));
        }
        Ok(())
    }

    pub fn op_blocks(&self) -> Vec<Vec<OpKind>> {
        self.layers.iter().map(|l| vec![l.op.clone()]).collect()
    }

    /// Same architecture with freshly drawn weights.
    pub fn reinitialized(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.params = ParamSet::init(&self.op_blocks(), &mut rng);
        out
    }

    pub fn searched_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.source, LayerSource::Searched { .. }))
            .count()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = op_forward(&layer.op, self.params.get(i, 0), &x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Full parameter gradient in registry order.
    pub fn backward(&self, caches: &[Cache], grad_logits: &Tensor) -> Result<Vec<f64>> {
        if caches.len() != self.layers.len() {
            return Err(Error::StaleCache {
                expected: format!("{} layer caches", self.layers.len()),
                found: format!("{}", caches.len()),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = grad_logits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (gin, gp) = op_backward(&layer.op, self.params.get(i, 0), cache, &g)?;
            grads[self.params.slot(i, 0).range()].copy_from_slice(&gp);
            g = gin;
        }
        Ok(grads)
    }

    /// Human-readable architecture listing.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        let fp = count_flops_params(self);
        out.push_str(&format!(
            "input {:?} -> {} classes, {} layers, {} MACs, {} params\n",
            self.input_shape,
            self.classes,
            self.layers.len(),
            fp.macs,
            fp.params
        ));
        for (i, layer) in self.layers.iter().enumerate() {
            let origin = match layer.source {
                LayerSource::Fixed { block } => format!("fixed block {block}"),
                LayerSource::Searched { layer, candidate } => {
                    format!("searched layer {layer}, candidate {candidate}")
                }
            };
            out.push_str(&format!("{i:>3}  {:<20} {origin}\n", layer.op.to_string()));
        }
        out.push_str(&format!("choices {:?}\n", self.choices));
        out
    }
}
