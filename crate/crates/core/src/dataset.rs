//! Labeled embedding sets and seeded fold splits.

use crate::audio::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!("{} rows", features.rows()), format!("{} labels", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    /// Labeled table; the class count is `max label + 1` unless given.
    pub fn from_table(table: &EmbeddingTable, num_classes: Option<usize>) -> Result<Self> {
        let labels: Vec<usize> = table
            .labels()
            .ok_or_else(|| Error::Data("embedding table carries no labels".into()))?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let n = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(table.to_matrix(), labels, n)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn classes_present(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// `(train, validation)` for fold `fold` of `k`.
    pub fn split(&self, fold: usize, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let assignment = fold_assignment(self.len(), k, seed)?;
        if fold >= k {
            return Err(Error::param("fold", format!("{fold} outside 0..{k}")));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, &f) in assignment.iter().enumerate() {
            if f == fold {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((self.subset(&train), self.subset(&val)))
    }
}

/// Fold id per sample: round-robin by position after a seeded shuffle.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::param("fold_count", format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(0xf01d).shuffle(&mut order);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_evenly() {
        let f = fold_assignment(103, 5, 9).unwrap();
        let mut counts = [0; 5];
        for &x in &f {
            counts[x] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20 || c == 21));
        assert_eq!(f, fold_assignment(103, 5, 9).unwrap());
        assert_ne!(f, fold_assignment(103, 5, 10).unwrap());
        assert!(fold_assignment(3, 5, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let n = 40;
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|v| v as f32).collect()).unwrap();
        let y = (0..n).map(|i| i % 4).collect();
        let d = Dataset::new(x, y, 4).unwrap();
        let mut seen = Vec::new();
        for fold in 0..5 {
            let (tr, va) = d.split(fold, 5, 3).unwrap();
            assert_eq!(tr.len() + va.len(), n);
            seen.extend(va.features().as_slice().chunks(2).map(|r| r[0] as usize / 2));
        }
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn labels_are_checked() {
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0, 3], 3).is_err());
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0], 3).is_err());
    }
}
