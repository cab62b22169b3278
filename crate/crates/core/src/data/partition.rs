use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShards {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientShards {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Example indices held by every client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub clients: Vec<ClientShards>,
}

impl ShardPlan {
    /// Fails unless the shards are pairwise disjoint, in range, and together
    /// cover exactly `0..dataset_len`.
    pub fn check_disjoint_cover(&self, dataset_len: usize) -> Result<()> {
        let mut owner = vec![false; dataset_len];
        for (k, c) in self.clients.iter().enumerate() {
            for &i in c.train.iter().chain(&c.val).chain(&c.test) {
                if i >= dataset_len {
                    return Err(Error::InvalidArgument(format!(
                        "client {k}: index {i} out of range"
                    )));
                }
                if std::mem::replace(&mut owner[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "client {k}: index {i} assigned twice"
                    )));
                }
            }
        }
        if let Some(i) = owner.iter().position(|&o| !o) {
            return Err(Error::InvalidArgument(format!(
                "index {i} not assigned to any client"
            )));
        }
        Ok(())
    }
}

/// Fractions carved out of each client's data: `test` first from the whole
/// client share, then `val` from what remains; the rest trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test: 0.1,
            val: 0.1,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if ok(self.test) && ok(self.val) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "split fractions {self:?} must lie in [0, 1)"
            )))
        }
    }
}

/// One class group dealt to one client group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardGroup {
    pub classes: Vec<usize>,
    pub clients: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelShardScheme {
    pub groups: Vec<ShardGroup>,
}

impl LabelShardScheme {
    /// Ten classes over ten clients: classes 0-2 to clients 0-2, 3-5 to
    /// 3-5 and 6-9 to 6-9.
    pub fn ten_client_three_groups() -> Self {
        let g = |r: std::ops::Range<usize>| ShardGroup {
            classes: r.clone().collect(),
            clients: r.collect(),
        };
        LabelShardScheme {
            groups: vec![g(0..3), g(3..6), g(6..10)],
        }
    }

    /// Classes and clients cut into `groups` contiguous blocks of
    /// near-equal size (later blocks take the remainder).
    pub fn contiguous(classes: usize, clients: usize, groups: usize) -> Result<Self> {
        if groups == 0 || groups > classes || groups > clients {
            return Err(Error::InvalidArgument(format!(
                "cannot cut {classes} classes and {clients} clients into {groups} groups"
            )));
        }
        let cut = |total: usize, g: usize| -> std::ops::Range<usize> {
            let base = total / groups;
            let extra = total % groups;
            // Remainder goes to the last groups.
            let start = g * base + g.saturating_sub(groups - extra);
            let len = base + usize::from(g >= groups - extra);
            start..start + len
        };
        Ok(LabelShardScheme {
            groups: (0..groups)
                .map(|g| ShardGroup {
                    classes: cut(classes, g).collect(),
                    clients: cut(clients, g).collect(),
                })
                .collect(),
        })
    }

    fn validate(&self, classes: usize, clients: usize) -> Result<()> {
        let mut seen_class = vec![false; classes];
        let mut seen_client = vec![false; clients];
        for (g, group) in self.groups.iter().enumerate() {
            if group.classes.is_empty() || group.clients.is_empty() {
                return Err(Error::InvalidArgument(format!("shard group {g} is empty")));
            }
            for &c in &group.classes {
                if c >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "shard group {g} references unknown class {c}"
                    )));
                }
                if std::mem::replace(&mut seen_class[c], true) {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} appears in more than one group"
                    )));
                }
            }
            for &k in &group.clients {
                if k >= clients {
                    return Err(Error::InvalidArgument(format!(
                        "shard group {g} references unknown client {k}"
                    )));
                }
                if std::mem::replace(&mut seen_client[k], true) {
                    return Err(Error::InvalidArgument(format!(
                        "client {k} appears in more than one group"
                    )));
                }
            }
        }
        if let Some(c) = seen_class.iter().position(|&s| !s) {
            return Err(Error::InvalidArgument(format!(
                "class {c} is not assigned to any group"
            )));
        }
        if let Some(k) = seen_client.iter().position(|&s| !s) {
            return Err(Error::InvalidArgument(format!(
                "client {k} is not assigned to any group"
            )));
        }
        Ok(())
    }
}

fn split_client(
    mut indices: Vec<usize>,
    split: SplitFractions,
    rng: &mut ChaCha8Rng,
) -> ClientShards {
    indices.shuffle(rng);
    let n = indices.len();
    let n_test = (n as f64 * split.test).round() as usize;
    let rest = n - n_test;
    let n_val = (rest as f64 * split.val).round() as usize;
    let test = indices[..n_test].to_vec();
    let val = indices[n_test..n_test + n_val].to_vec();
    let train = indices[n_test + n_val..].to_vec();
    ClientShards { train, val, test }
}

fn deal(indices: &[usize], members: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(indices.len() / members + 1); members];
    for (i, &idx) in indices.iter().enumerate() {
        out[i % members].push(idx);
    }
    out
}

/// Label-shard partition: examples of each class group are shuffled and
/// dealt evenly (within one example) across the group's clients, then each
/// client splits its share into train/val/test.
pub fn partition_noniid(
    dataset: &LabeledDataset,
    clients: usize,
    scheme: &LabelShardScheme,
    split: SplitFractions,
    seed: u64,
) -> Result<ShardPlan> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    split.validate()?;
    scheme.validate(dataset.classes(), clients)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shares = vec![Vec::new(); clients];
    for group in &scheme.groups {
        let mut pool: Vec<usize> = (0..dataset.len())
            .filter(|&i| group.classes.contains(&dataset.labels()[i]))
            .collect();
        pool.shuffle(&mut rng);
        for (k, part) in group.clients.iter().zip(deal(&pool, group.clients.len())) {
            shares[*k] = part;
        }
    }
    Ok(ShardPlan {
        clients: shares
            .into_iter()
            .map(|s| split_client(s, split, &mut rng))
            .collect(),
    })
}

/// Uniformly random even split across `clients`.
pub fn iid_partition(
    dataset: &LabeledDataset,
    clients: usize,
    split: SplitFractions,
    seed: u64,
) -> Result<ShardPlan> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    split.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..dataset.len()).collect();
    pool.shuffle(&mut rng);
    Ok(ShardPlan {
        clients: deal(&pool, clients)
            .into_iter()
            .map(|s| split_client(s, split, &mut rng))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn ten_client_scheme_label_support() {
        let ds = generate_synthetic(10, [1, 2, 2], 50, 0.5, 1).unwrap();
        let plan = partition_noniid(
            &ds,
            10,
            &LabelShardScheme::ten_client_three_groups(),
            SplitFractions::default(),
            3,
        )
        .unwrap();
        plan.check_disjoint_cover(ds.len()).unwrap();
        let support = |k: usize| {
            let c = &plan.clients[k];
            let all: Vec<usize> = c
                .train
                .iter()
                .chain(&c.val)
                .chain(&c.test)
                .copied()
                .collect();
            let hist = ds.class_histogram(&all);
            (0..10).filter(|&c| hist[c] > 0).collect::<Vec<_>>()
        };
        assert_eq!(support(0), vec![0, 1, 2]);
        assert_eq!(support(4), vec![3, 4, 5]);
        assert_eq!(support(9), vec![6, 7, 8, 9]);
    }

    #[test]
    fn single_client_holds_everything() {
        let ds = generate_synthetic(3, [1, 2, 2], 7, 0.5, 1).unwrap();
        let scheme = LabelShardScheme::contiguous(3, 1, 1).unwrap();
        let plan = partition_noniid(&ds, 1, &scheme, SplitFractions::default(), 0).unwrap();
        assert_eq!(plan.clients[0].len(), ds.len());
        plan.check_disjoint_cover(ds.len()).unwrap();
    }

    #[test]
    fn unknown_class_rejected() {
        let ds = generate_synthetic(3, [1, 2, 2], 2, 0.5, 1).unwrap();
        let scheme = LabelShardScheme {
            groups: vec![ShardGroup {
                classes: vec![0, 1, 2, 3],
                clients: vec![0],
            }],
        };
        assert!(partition_noniid(&ds, 1, &scheme, SplitFractions::default(), 0).is_err());
        let partial = LabelShardScheme {
            groups: vec![ShardGroup {
                classes: vec![0, 1],
                clients: vec![0],
            }],
        };
        assert!(partition_noniid(&ds, 1, &partial, SplitFractions::default(), 0).is_err());
    }

    #[test]
    fn contiguous_groups() {
        let s = LabelShardScheme::contiguous(10, 10, 3).unwrap();
        assert_eq!(s, LabelShardScheme::ten_client_three_groups());
        let s = LabelShardScheme::contiguous(6, 6, 3).unwrap();
        assert_eq!(s.groups[1].classes, vec![2, 3]);
        assert_eq!(s.groups[2].clients, vec![4, 5]);
    }

    #[test]
    fn one_example_per_client() {
        let ds = generate_synthetic(2, [1, 1, 1], 5, 0.5, 1).unwrap();
        let plan = iid_partition(&ds, 10, SplitFractions::default(), 4).unwrap();
        assert!(plan.clients.iter().all(|c| c.len() == 1));
        plan.check_disjoint_cover(ds.len()).unwrap();
    }

    #[test]
    fn cover_check_catches_overlap() {
        let plan = ShardPlan {
            clients: vec![
                ClientShards {
                    train: vec![0, 1],
                    val: vec![],
                    test: vec![],
                },
                ClientShards {
                    train: vec![1],
                    val: vec![2],
                    test: vec![],
                },
            ],
        };
        assert!(plan.check_disjoint_cover(3).is_err());
    }
}
