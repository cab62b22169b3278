use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::OpKind;
use crate::error::{Error, Result};

/// Location of one candidate's parameters inside the flat value buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub block: usize,
    pub candidate: usize,
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter buffer for a chain of blocks, each holding one or more
/// candidate operations. The registry orders slots by (block, candidate),
/// which fixes the iteration and accumulation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    slots: Vec<ParamSlot>,
    lookup: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(blocks: &[Vec<OpKind>]) -> Self {
        let mut slots = Vec::new();
        let mut lookup = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (block, ops) in blocks.iter().enumerate() {
            let mut ids = Vec::with_capacity(ops.len());
            for (candidate, op) in ops.iter().enumerate() {
                let len = op.param_len();
                ids.push(slots.len());
                slots.push(ParamSlot {
                    block,
                    candidate,
                    offset,
                    len,
                });
                offset += len;
            }
            lookup.push(ids);
        }
        ParamSet {
            slots,
            lookup,
            values: vec![0.0; offset],
        }
    }

    pub fn init<R: Rng + ?Sized>(blocks: &[Vec<OpKind>], rng: &mut R) -> Self {
        let mut set = Self::zeros(blocks);
        for (slot, op) in set.slots.clone().iter().zip(blocks.iter().flatten()) {
            let fresh = op.init_params(rng);
            set.values[slot.range()].copy_from_slice(&fresh);
        }
        set
    }

    /// Rebuilds a set from stored values, checking they fit the layout.
    pub fn from_values(blocks: &[Vec<OpKind>], values: Vec<f64>) -> Result<Self> {
        let mut set = Self::zeros(blocks);
        if values.len() != set.values.len() {
            return Err(Error::Topology(format!(
                "layout needs {} parameters, got {}",
                set.values.len(),
                values.len()
            )));
        }
        set.values = values;
        Ok(set)
    }

    pub fn slot(&self, block: usize, candidate: usize) -> ParamSlot {
        self.slots[self.lookup[block][candidate]]
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn get(&self, block: usize, candidate: usize) -> &[f64] {
        &self.values[self.slot(block, candidate).range()]
    }

    pub fn get_mut(&mut self, block: usize, candidate: usize) -> &mut [f64] {
        let range = self.slot(block, candidate).range();
        &mut self.values[range]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.slots == other.slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_covers_all_candidates() {
        let blocks = vec![
            vec![OpKind::Conv {
                kernel: 3,
                in_channels: 1,
                out_channels: 2,
            }],
            vec![
                OpKind::Zero,
                OpKind::DepthwiseSepConv {
                    kernel: 3,
                    channels: 2,
                    expansion: 3,
                },
            ],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = ParamSet::init(&blocks, &mut rng);
        let expected: usize = blocks.iter().flatten().map(OpKind::param_len).sum();
        assert_eq!(set.len(), expected);
        assert_eq!(set.slots().len(), 3);
        assert_eq!(set.get(1, 0).len(), 0);
        assert_eq!(set.slot(1, 1).offset, 20);
        let again = ParamSet::from_values(&blocks, set.values().to_vec()).unwrap();
        assert_eq!(again, set);
        assert!(ParamSet::from_values(&blocks, vec![0.0; 3]).is_err());
    }
}
