use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{invalid, Result};

/// Labelled samples stored as a `[n, features]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(invalid("label out of range"));
        }
        Ok(Self { inputs, labels, classes, seed })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows at `indices`, in that order. An empty selection is rejected.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(invalid("empty batch"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("row {i} out of range for {} rows", self.len())));
        }
        let d = self.features();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            classes: self.classes,
            seed: self.seed,
        })
    }

    /// Deterministic shuffled split into `(train, eval)` with `train_fraction` of rows in train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(invalid(format!("train fraction {train_fraction} outside (0,1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        if self.len() < 2 {
            return Err(invalid("need at least 2 rows to split"));
        }
        let cut = cut.clamp(1, self.len() - 1);
        Ok((self.subset(&idx[..cut])?, self.subset(&idx[cut..])?))
    }

    /// Split into `m` contiguous minibatches of equal size; trailing rows that
    /// do not fill a batch are dropped.
    pub fn partition(&self, m: usize) -> Result<Vec<Dataset>> {
        if m == 0 || m > self.len() {
            return Err(invalid(format!("cannot partition {} rows into {m} batches", self.len())));
        }
        let size = self.len() / m;
        (0..m).map(|b| self.subset(&(b * size..(b + 1) * size).collect::<Vec<_>>())).collect()
    }

    /// Seeded class-balanced sample with `per_class` rows of every class.
    pub fn class_balanced(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(per_class * self.classes);
        for c in 0..self.classes {
            let mut rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if rows.len() < per_class {
                return Err(invalid(format!("class {c} has {} rows, need {per_class}", rows.len())));
            }
            rows.shuffle(&mut rng);
            picked.extend_from_slice(&rows[..per_class]);
        }
        self.subset(&picked)
    }

    /// SHA-256 over shape, labels and little-endian sample bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.inputs.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for &x in self.inputs.data() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Cluster centers with unit distance between neighbouring classes.
///
/// With `dims >= classes` the centers are `e_c / √2` (pairwise distance 1);
/// otherwise they sit on a circle in the first two coordinates with unit
/// chord between neighbours, or on a line when `dims == 1`.
pub fn blob_centers(classes: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dims];
            if dims >= classes {
                v[c] = std::f64::consts::FRAC_1_SQRT_2;
            } else if dims >= 2 {
                let r = 1.0 / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                v[0] = r * a.cos();
                v[1] = r * a.sin();
            } else {
                v[0] = c as f64;
            }
            v
        })
        .collect()
}

/// Isotropic Gaussian clusters around [`blob_centers`], shuffled by `seed`.
pub fn make_blobs(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    if dims == 0 || per_class == 0 {
        return Err(invalid("dims and samples per class must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(invalid(format!("spread must be nonnegative, got {spread}")));
    }
    let centers = blob_centers(classes, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let n = rows.len();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (x, y) in rows {
        data.extend(x);
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_balanced() {
        let d = make_blobs(3, 4, 10, 0.5, 1).unwrap();
        assert_eq!(d.len(), 30);
        for c in 0..3 {
            assert_eq!(d.labels().iter().filter(|&&y| y == c).count(), 10);
        }
    }

    #[test]
    fn zero_spread_hits_centers() {
        let d = make_blobs(3, 2, 5, 0.0, 9).unwrap();
        let centers = blob_centers(3, 2);
        for (i, &y) in d.labels().iter().enumerate() {
            assert_eq!(&d.inputs().data()[i * 2..i * 2 + 2], centers[y].as_slice());
        }
    }

    #[test]
    fn centers_unit_separated() {
        for (k, dims) in [(3, 5), (4, 2), (2, 1), (5, 2)] {
            let c = blob_centers(k, dims);
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            assert!((dist(&c[0], &c[1]) - 1.0).abs() < 1e-12, "{k} classes in {dims} dims");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_blobs(1, 2, 5, 0.1, 0).is_err());
        assert!(make_blobs(2, 0, 5, 0.1, 0).is_err());
        assert!(make_blobs(2, 2, 0, 0.1, 0).is_err());
        assert!(make_blobs(2, 2, 3, -1.0, 0).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let a = make_blobs(4, 6, 7, 0.3, 42).unwrap();
        let b = make_blobs(4, 6, 7, 0.3, 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = make_blobs(4, 6, 7, 0.3, 43).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn split_and_partition() {
        let d = make_blobs(2, 3, 10, 0.3, 5).unwrap();
        let (tr, ev) = d.split(0.8, 1).unwrap();
        assert_eq!((tr.len(), ev.len()), (16, 4));
        let parts = d.partition(4).unwrap();
        assert!(parts.iter().all(|p| p.len() == 5));
        assert!(d.partition(0).is_err());
        let bal = d.class_balanced(2, 3).unwrap();
        assert_eq!(bal.labels(), &[0, 0, 1, 1]);
    }
}
