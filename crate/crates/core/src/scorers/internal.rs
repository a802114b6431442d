//! Scorers over ingested internal model state: hidden-state eigenscore and
//! attention-diagonal score. Tensors arrive on the trace; nothing here talks
//! to a backend.

use ndarray::Array2;

use crate::eigen::jacobi_eigh;
use crate::error::{Error, Result};
use crate::trace::{Generation, UncertaintyTrace};

/// Hidden states of the sampled generations, one column per sample.
#[derive(Debug, Clone)]
pub struct HiddenMatrix {
    /// d x B: column b is the hidden state of sample b.
    pub z: Array2<f64>,
    /// Regularizer added to every covariance eigenvalue, > 0.
    pub alpha: f64,
}

impl HiddenMatrix {
    pub fn new(z: Array2<f64>, alpha: f64) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "hidden matrix needs d >= 1 and B >= 1, got {}x{}",
                z.nrows(),
                z.ncols()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!(
                "eigenscore regularizer {alpha} must be positive"
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "hidden matrix contains non-finite entries".into(),
            ));
        }
        Ok(HiddenMatrix { z, alpha })
    }

    pub fn from_trace(trace: &UncertaintyTrace, alpha: f64) -> Result<Self> {
        let states: Vec<&Vec<f64>> = trace
            .samples
            .iter()
            .enumerate()
            .map(|(b, s)| {
                s.hidden_state
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("sample {b} lacks hidden_state")))
            })
            .collect::<Result<_>>()?;
        if states.is_empty() {
            return Err(Error::InvalidInput("no sampled generations".into()));
        }
        let d = states[0].len();
        if states.iter().any(|h| h.len() != d) {
            return Err(Error::InvalidInput(
                "hidden states have inconsistent dimensions".into(),
            ));
        }
        let mut z = Array2::zeros((d, states.len()));
        for (b, h) in states.iter().enumerate() {
            for (r, &v) in h.iter().enumerate() {
                z[[r, b]] = v;
            }
        }
        HiddenMatrix::new(z, alpha)
    }

    pub fn num_samples(&self) -> usize {
        self.z.ncols()
    }
}

/// Mean log-determinant of the regularized covariance of the centered
/// hidden states: (1/B) Σ ln(λ_i + α) over the eigenvalues of Zᵀ J Z with
/// J the centering projection. Low values mean the samples collapsed onto
/// a low-dimensional subspace, i.e. high self-consistency.
pub fn inside_eigenscore(h: &HiddenMatrix) -> Result<f64> {
    let (d, b) = (h.z.nrows(), h.z.ncols());
    // J = I - (1/d) 11ᵀ is idempotent, so Zᵀ J Z = (JZ)ᵀ(JZ); centering the
    // columns first keeps the Gram matrix PSD under roundoff.
    let mut centered = h.z.clone();
    for mut col in centered.columns_mut() {
        let mean = col.sum() / d as f64;
        col.mapv_inplace(|v| v - mean);
    }
    let sigma = centered.t().dot(&centered);
    let (vals, _) = jacobi_eigh(&sigma)?;
    let mut total = 0.0;
    for l in vals {
        total += (l.max(0.0) + h.alpha).ln();
    }
    Ok(total / b as f64)
}

/// Sum over heads of the negative log of each recorded attention diagonal
/// entry. The engine applies the configured sign convention on top.
pub fn attention_score_raw(g: &Generation) -> Result<f64> {
    let heads = g
        .attention_diagonals
        .as_ref()
        .filter(|h| !h.is_empty())
        .ok_or_else(|| Error::InvalidInput("attention diagonals missing".into()))?;
    let mut total = 0.0;
    for (h, diag) in heads.iter().enumerate() {
        for (j, &v) in diag.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "attention diagonal entry [{h}][{j}] = {v} must be positive"
                )));
            }
            total -= v.ln();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Query, SamplingParams};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn score(z: Array2<f64>, alpha: f64) -> f64 {
        inside_eigenscore(&HiddenMatrix::new(z, alpha).unwrap()).unwrap()
    }

    #[test]
    fn zero_hidden_states_score_log_alpha() {
        let v = score(Array2::zeros((4, 3)), 0.001);
        assert_abs_diff_eq!(v, 0.001f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_sample_scores_log_centered_norm() {
        let z = arr2(&[[1.0], [2.0], [3.0], [4.0]]);
        // Centered column (-1.5, -0.5, 0.5, 1.5), squared norm 5.
        assert_abs_diff_eq!(score(z, 0.001), 5.001f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_columns_score_below_distinct_columns() {
        let alpha = 0.001f64;
        let dup = arr2(&[[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        let distinct = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        // Hand Gram matrices of the centered columns, eigenvalues by the
        // 2x2 closed form: duplicates give {0, 4/3}, distinct {1/3, 1}.
        let dup_expected = (alpha.ln() + (4.0 / 3.0 + alpha).ln()) / 2.0;
        let distinct_expected = ((1.0 / 3.0 + alpha).ln() + (1.0 + alpha).ln()) / 2.0;
        assert_abs_diff_eq!(score(dup.clone(), alpha), dup_expected, epsilon = 1e-9);
        assert_abs_diff_eq!(
            score(distinct.clone(), alpha),
            distinct_expected,
            epsilon = 1e-9
        );
        assert!(score(dup, alpha) < score(distinct, alpha));
    }

    #[test]
    fn rejects_bad_shapes_and_alpha() {
        assert!(HiddenMatrix::new(Array2::zeros((0, 2)), 0.001).is_err());
        assert!(HiddenMatrix::new(Array2::zeros((2, 0)), 0.001).is_err());
        assert!(HiddenMatrix::new(Array2::zeros((2, 2)), 0.0).is_err());
        assert!(HiddenMatrix::new(Array2::zeros((2, 2)), -1.0).is_err());
        let mut z = Array2::zeros((2, 2));
        z[[0, 0]] = f64::NAN;
        assert!(HiddenMatrix::new(z, 0.001).is_err());
    }

    #[test]
    fn from_trace_collects_and_validates_hidden_states() {
        let mut trace = UncertaintyTrace {
            query: Query {
                id: "q".into(),
                prompt: "p".into(),
                ground_truths: vec![],
                dataset_tag: "toy".into(),
                transform_tag: None,
            },
            greedy: Generation::from_text("g"),
            samples: vec![Generation::from_text("a"), Generation::from_text("b")],
            sampling: SamplingParams {
                temperature: 1.0,
                num_samples: 2,
            },
            paraphrases: vec![],
            external_scores: BTreeMap::new(),
            extra: BTreeMap::new(),
        };
        assert!(HiddenMatrix::from_trace(&trace, 0.001).is_err());
        trace.samples[0].hidden_state = Some(vec![1.0, 2.0]);
        trace.samples[1].hidden_state = Some(vec![3.0, 4.0]);
        let h = HiddenMatrix::from_trace(&trace, 0.001).unwrap();
        assert_eq!(h.num_samples(), 2);
        assert_eq!(h.z[[0, 1]], 3.0);
        assert_eq!(h.z[[1, 0]], 2.0);
        trace.samples[1].hidden_state = Some(vec![3.0]);
        assert!(HiddenMatrix::from_trace(&trace, 0.001).is_err());
    }

    fn attn_gen(heads: Vec<Vec<f64>>) -> Generation {
        Generation {
            attention_diagonals: Some(heads),
            ..Generation::from_text("t")
        }
    }

    #[test]
    fn attention_score_hand_values() {
        let g = attn_gen(vec![vec![1.0, 1.0, 1.0]]);
        assert_eq!(attention_score_raw(&g).unwrap(), 0.0);
        let g = attn_gen(vec![vec![(-1.0f64).exp(), (-2.0f64).exp()]]);
        assert_abs_diff_eq!(attention_score_raw(&g).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn attention_score_rejects_missing_or_nonpositive_diagonals() {
        assert!(attention_score_raw(&Generation::from_text("t")).is_err());
        assert!(attention_score_raw(&attn_gen(vec![])).is_err());
        assert!(attention_score_raw(&attn_gen(vec![vec![0.5, 0.0]])).is_err());
        assert!(attention_score_raw(&attn_gen(vec![vec![-0.1]])).is_err());
    }

    #[test]
    fn attention_score_is_additive_over_heads() {
        let a = vec![0.3, 0.9];
        let b = vec![0.5, 0.7, 0.2];
        let separate = attention_score_raw(&attn_gen(vec![a.clone()])).unwrap()
            + attention_score_raw(&attn_gen(vec![b.clone()])).unwrap();
        let joint = attention_score_raw(&attn_gen(vec![a, b])).unwrap();
        assert_abs_diff_eq!(joint, separate, epsilon = 1e-12);
    }

    fn z_strategy(d: usize, b: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-2.0f64..2.0, d * b).prop_map(move |flat| {
            Array2::from_shape_vec((d, b), flat).unwrap()
        })
    }

    proptest! {
        #[test]
        fn eigenscore_invariant_to_column_permutation(z in z_strategy(3, 4), seed in 0u64..32) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut zp = Array2::zeros((3, 4));
            for (dst, &src) in perm.iter().enumerate() {
                for r in 0..3 {
                    zp[[r, dst]] = z[[r, src]];
                }
            }
            let a = score(z, 0.001);
            let b = score(zp, 0.001);
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        #[test]
        fn centered_gram_is_psd(z in z_strategy(4, 3)) {
            let h = HiddenMatrix::new(z, 0.001).unwrap();
            let mut centered = h.z.clone();
            for mut col in centered.columns_mut() {
                let mean = col.sum() / 4.0;
                col.mapv_inplace(|v| v - mean);
            }
            let sigma = centered.t().dot(&centered);
            let (vals, _) = jacobi_eigh(&sigma).unwrap();
            for l in vals {
                prop_assert!(l >= -1e-10, "eigenvalue {l} below PSD tolerance");
            }
            // The score itself is bounded below by ln(alpha).
            prop_assert!(inside_eigenscore(&h).unwrap() >= 0.001f64.ln() - 1e-12);
        }
    }
}
