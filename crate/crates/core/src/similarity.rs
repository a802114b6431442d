//! Pairwise similarity matrices over generated texts.
//!
//! A matrix stores both judgment directions: `forward[[i, j]]` is the score
//! for direction i → j, and `backward[[i, j]]` for j → i, so
//! `forward[[i, j]] == backward[[j, i]]`. Each unordered pair costs one
//! backend call; the diagonal is fixed at 1.

use ndarray::Array2;

use crate::backend::Backend;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    NliEntailment,
    ContinuousSimilarity,
}

#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub forward: Array2<f64>,
    pub backward: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.forward.nrows()
    }

    /// Symmetric score: mean of the two directions.
    pub fn mean(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.forward[[i, j]] + self.backward[[i, j]])
    }

    /// Bidirectional entailment: the weaker direction decides.
    pub fn bidirectional(&self, i: usize, j: usize) -> f64 {
        self.forward[[i, j]].min(self.backward[[i, j]])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.forward.nrows();
        if self.forward.ncols() != m || self.backward.nrows() != m || self.backward.ncols() != m {
            return Err(Error::InvalidInput("similarity matrix is not square".into()));
        }
        for i in 0..m {
            for j in 0..m {
                for (name, v) in [("forward", self.forward[[i, j]]), ("backward", self.backward[[i, j]])] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidInput(format!(
                            "{name}[{i}][{j}] = {v} outside [0, 1]"
                        )));
                    }
                }
            }
            if self.forward[[i, i]] != 1.0 || self.backward[[i, i]] != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "similarity diagonal at {i} must be 1"
                )));
            }
        }
        Ok(())
    }
}

/// Query every unordered pair once and fill both directions.
pub fn build_similarity_matrix(
    backend: &dyn Backend,
    texts: &[String],
    kind: SimilarityKind,
) -> Result<SimilarityMatrix> {
    let m = texts.len();
    if m == 0 {
        return Err(Error::InvalidInput(
            "similarity matrix needs at least one text".into(),
        ));
    }
    let mut forward = Array2::from_elem((m, m), 1.0);
    let mut backward = Array2::from_elem((m, m), 1.0);
    for i in 0..m {
        for j in (i + 1)..m {
            let judgment = backend.similarity(&texts[i], &texts[j])?;
            judgment.validate()?;
            forward[[i, j]] = judgment.forward;
            backward[[i, j]] = judgment.backward;
            forward[[j, i]] = judgment.backward;
            backward[[j, i]] = judgment.forward;
        }
    }
    let matrix = SimilarityMatrix {
        kind,
        forward,
        backward,
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Greedy clustering: scan items in order and join the first cluster whose
/// representative (its first member) entails bidirectionally above the
/// threshold; otherwise open a new cluster. Returns the cluster id per item;
/// ids are dense and ordered by cluster creation.
pub fn greedy_cluster_indices(sim: &SimilarityMatrix, threshold: f64) -> Vec<usize> {
    let m = sim.size();
    let mut assignment = vec![0usize; m];
    let mut representatives: Vec<usize> = Vec::new();
    for i in 0..m {
        let joined = representatives
            .iter()
            .position(|&rep| sim.bidirectional(rep, i) > threshold);
        match joined {
            Some(cluster) => assignment[i] = cluster,
            None => {
                assignment[i] = representatives.len();
                representatives.push(i);
            }
        }
    }
    assignment
}

/// Cluster sizes indexed by cluster id.
pub fn cluster_sizes(assignment: &[usize]) -> Vec<usize> {
    let clusters = assignment.iter().copied().max().map_or(0, |mx| mx + 1);
    let mut sizes = vec![0usize; clusters];
    for &c in assignment {
        sizes[c] += 1;
    }
    sizes
}
