//! Seeded synthetic datasets and client shard plans.

mod io;
mod partition;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC};
pub use partition::{
    iid_partition, partition_noniid, ClientShards, LabelShardScheme, ShardGroup, ShardPlan,
    SplitFractions,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-shape examples with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    example_shape: Vec<usize>,
    classes: usize,
    examples: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        example_shape: Vec<usize>,
        classes: usize,
        examples: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let width: usize = example_shape.iter().product();
        if example_shape.is_empty() || width == 0 {
            return Err(Error::Shape(format!(
                "degenerate example shape {example_shape:?}"
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if examples.len() != width * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} examples of shape {example_shape:?}",
                examples.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledDataset {
            example_shape,
            classes,
            examples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, index: usize) -> &[f64] {
        let width = self.example_width();
        &self.examples[index * width..(index + 1) * width]
    }

    pub fn example_width(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn raw_examples(&self) -> &[f64] {
        &self.examples
    }

    /// Gathers the given examples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyShard("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.example_width());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("example {i} out of range")));
            }
            data.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        let shape = std::iter::once(indices.len())
            .chain(self.example_shape.iter().copied())
            .collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

/// Class-conditional images: a per-class template drawn uniformly from
/// [-1, 1] per pixel, plus Gaussian noise with standard deviation
/// `difficulty`. Examples are stored class by class.
pub fn generate_synthetic(
    classes: usize,
    shape: [usize; 3],
    per_class: usize,
    difficulty: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("degenerate example shape {shape:?}")));
    }
    if classes < 2 || per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "need classes >= 2 and per_class >= 1, got {classes} and {per_class}"
        )));
    }
    if !difficulty.is_finite() || difficulty < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "difficulty {difficulty} must be >= 0"
        )));
    }
    let width: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut examples = Vec::with_capacity(classes * per_class * width);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            for &t in template {
                let z: f64 = StandardNormal.sample(&mut rng);
                examples.push(t + difficulty * z);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(shape.to_vec(), classes, examples, labels)
}

/// Per-class mean image; the nearest-template baseline classifier uses these.
pub fn class_means(dataset: &LabeledDataset) -> Vec<Vec<f64>> {
    let width = dataset.example_width();
    let mut sums = vec![vec![0.0; width]; dataset.classes()];
    let mut counts = vec![0usize; dataset.classes()];
    for i in 0..dataset.len() {
        let c = dataset.labels()[i];
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(dataset.example(i)) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_is_exact() {
        let ds = generate_synthetic(6, [1, 8, 8], 13, 1.0, 4).unwrap();
        assert_eq!(ds.len(), 78);
        assert_eq!(
            ds.class_histogram(&(0..ds.len()).collect::<Vec<_>>()),
            vec![13; 6]
        );
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_synthetic(4, [2, 4, 4], 5, 0.5, 77).unwrap();
        let b = generate_synthetic(4, [2, 4, 4], 5, 0.5, 77).unwrap();
        let bits = |d: &LabeledDataset| {
            d.raw_examples()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        let c = generate_synthetic(4, [2, 4, 4], 5, 0.5, 78).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn noiseless_is_template_separable() {
        let ds = generate_synthetic(6, [1, 8, 8], 10, 0.0, 9).unwrap();
        let means = class_means(&ds);
        for i in 0..ds.len() {
            let x = ds.example(i);
            let nearest = (0..6)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, ds.labels()[i]);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(generate_synthetic(1, [1, 4, 4], 3, 0.0, 0).is_err());
        assert!(generate_synthetic(3, [1, 0, 4], 3, 0.0, 0).is_err());
        assert!(generate_synthetic(3, [1, 4, 4], 0, 0.0, 0).is_err());
        assert!(LabeledDataset::new(vec![2], 2, vec![0.0; 4], vec![0, 2]).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = generate_synthetic(3, [1, 2, 2], 2, 0.1, 1).unwrap();
        let (t, labels) = ds.batch(&[5, 0]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(labels, vec![2, 0]);
        assert_eq!(&t.data()[..4], ds.example(5));
        assert!(ds.batch(&[]).is_err());
    }
}
