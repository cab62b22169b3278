use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator of the aggregation weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// N = sum of the aggregated clients' sizes, so weights sum to 1.
    Participants,
    /// A fixed N, such as the size of every client in the federation.
    /// Weights then sum to less than 1 when only some clients report.
    Fixed { total: usize },
}

/// Elementwise `sum_k (N_k / N) x_k`, accumulated in the given client order.
pub fn aggregate(updates: &[&[f64]], sizes: &[usize], norm: &Normalization) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    if updates.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} updates but {} sizes",
            updates.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "every client size must be positive".into(),
        ));
    }
    let len = updates[0].len();
    if let Some(bad) = updates.iter().find(|u| u.len() != len) {
        return Err(Error::Shape(format!(
            "update of length {} among updates of length {len}",
            bad.len()
        )));
    }
    let total = match norm {
        Normalization::Participants => sizes.iter().sum::<usize>(),
        Normalization::Fixed { total } => *total,
    };
    if total == 0 {
        return Err(Error::InvalidArgument("zero total size".into()));
    }
    let mut out = vec![0.0; len];
    for (u, &n) in updates.iter().zip(sizes) {
        let weight = n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(u.iter()) {
            *o += weight * v;
        }
    }
    Ok(out)
}

/// Aggregates weights and architecture logits with the same weights.
pub fn aggregate_models(
    models: &[(&[f64], Vec<f64>)],
    sizes: &[usize],
    norm: &Normalization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w: Vec<&[f64]> = models.iter().map(|(w, _)| *w).collect();
    let a: Vec<&[f64]> = models.iter().map(|(_, a)| a.as_slice()).collect();
    Ok((aggregate(&w, sizes, norm)?, aggregate(&a, sizes, norm)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: Normalization = Normalization::Participants;

    #[test]
    fn worked_examples() {
        assert_eq!(
            aggregate(&[&[1.5, -2.0]], &[7], &P).unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(
            aggregate(&[&[0.0], &[2.0]], &[5, 5], &P).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            aggregate(&[&[0.0], &[4.0]], &[1, 3], &P).unwrap(),
            vec![3.0]
        );
    }

    #[test]
    fn fixed_total_shrinks() {
        let out = aggregate(
            &[&[2.0], &[2.0]],
            &[1, 1],
            &Normalization::Fixed { total: 4 },
        )
        .unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(aggregate(&[], &[], &P).is_err());
        assert!(aggregate(&[&[1.0], &[1.0, 2.0]], &[1, 1], &P).is_err());
        assert!(aggregate(&[&[1.0]], &[0], &P).is_err());
        assert!(aggregate(&[&[1.0]], &[1, 2], &P).is_err());
        assert!(aggregate(&[&[1.0]], &[1], &Normalization::Fixed { total: 0 }).is_err());
    }
}
