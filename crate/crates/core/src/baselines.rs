//! Comparison detectors: length-normalized entropy, discrete semantic
//! entropy, max-probability confidence, EigenScore, and effective rank.
//!
//! All scores are oriented so higher = more hallucinated. The entropy and
//! spectral estimators are reconstructed from the methods' standard
//! definitions (the cited works), with semantic clustering degenerating to
//! exact token-sequence match on the synthetic task.

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::model::Model;
use crate::rng;
use crate::taskgen::{Example, END_TOKEN};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// k stochastic generations for one example, with model log-likelihoods and
/// mean last-layer hidden states over the answer span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSet {
    pub example_id: usize,
    pub sequences: Vec<Vec<usize>>,
    pub loglikelihoods: Vec<f64>,
    pub lengths: Vec<usize>,
    pub hidden_summaries: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.sequences.len()
    }

    /// Size of the largest exact-match cluster divided by k.
    pub fn max_cluster_fraction(&self) -> f64 {
        let mut clusters: BTreeMap<&[usize], usize> = BTreeMap::new();
        for s in &self.sequences {
            *clusters.entry(s.as_slice()).or_insert(0) += 1;
        }
        let max = clusters.values().copied().max().unwrap_or(0);
        max as f64 / self.k().max(1) as f64
    }

    /// The sequence of the largest cluster (ties broken by token order).
    pub fn majority_sequence(&self) -> Option<&Vec<usize>> {
        let mut clusters: BTreeMap<&Vec<usize>, usize> = BTreeMap::new();
        for s in &self.sequences {
            *clusters.entry(s).or_insert(0) += 1;
        }
        clusters.into_iter().max_by_key(|(_, c)| *c).map(|(s, _)| s)
    }
}

/// Draw k seeded samples at the given temperature. A generation that stops
/// on the end token immediately is recorded as the bare end token (length 1),
/// so every downstream estimator sees non-empty sequences.
pub fn collect_samples(
    model: &Model,
    example_id: usize,
    example: &Example,
    k: usize,
    temperature: f64,
    seed: u64,
    max_new: usize,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::Contract("collect_samples requires k >= 1".into()));
    }
    let mut sequences = Vec::with_capacity(k);
    let mut loglikelihoods = Vec::with_capacity(k);
    let mut lengths = Vec::with_capacity(k);
    let mut hidden_summaries = Vec::with_capacity(k);
    let d = model.config().d_model;
    let n_layers = model.config().n_layers;
    for i in 0..k {
        let per_example = rng::derive_indexed(seed, "sampling", example_id as u64);
        let sample_seed = rng::derive_indexed(per_example, "sample", i as u64);
        let out = model.sample_decode(&example.prompt_ids, temperature, sample_seed, max_new, Some(END_TOKEN))?;
        let (seq, loglik) = if out.ids.is_empty() {
            // Immediate stop: record the bare end token with its logprob.
            let probs = model.next_token_probs(&example.prompt_ids)?;
            (vec![END_TOKEN], probs[END_TOKEN].ln())
        } else {
            (out.ids.clone(), out.logprobs.iter().sum())
        };

        // Mean last-layer hidden state over the answer positions.
        let mut forced = example.prompt_ids.clone();
        forced.extend_from_slice(&seq);
        let trace = model.forward_ids(&forced)?;
        let hs = &trace.hidden_states[n_layers];
        let prompt_len = example.prompt_ids.len();
        let mut summary = vec![0.0; d];
        for row in prompt_len..forced.len() {
            for j in 0..d {
                summary[j] += hs.data[row * d + j];
            }
        }
        for v in &mut summary {
            *v /= seq.len() as f64;
        }

        lengths.push(seq.len());
        sequences.push(seq);
        loglikelihoods.push(loglik);
        hidden_summaries.push(summary);
    }
    Ok(SampleSet { example_id, sequences, loglikelihoods, lengths, hidden_summaries })
}

/// Mean length-normalized negative log-likelihood over the k samples.
pub fn ln_entropy(s: &SampleSet) -> Result<f64> {
    if s.k() == 0 {
        return Err(Error::Contract("ln_entropy requires k >= 1".into()));
    }
    let mut total = 0.0;
    for (ll, &len) in s.loglikelihoods.iter().zip(&s.lengths) {
        if len == 0 {
            return Err(Error::Contract("ln_entropy: zero-length sequence".into()));
        }
        total += -ll / len as f64;
    }
    Ok(total / s.k() as f64)
}

/// Entropy over exact-match clusters: -sum p_j ln p_j with p_j = count_j / k.
pub fn discrete_semantic_entropy(s: &SampleSet) -> Result<f64> {
    if s.k() == 0 {
        return Err(Error::Contract("discrete_semantic_entropy requires k >= 1".into()));
    }
    let mut clusters: BTreeMap<&[usize], usize> = BTreeMap::new();
    for seq in &s.sequences {
        *clusters.entry(seq.as_slice()).or_insert(0) += 1;
    }
    let k = s.k() as f64;
    Ok(clusters
        .values()
        .map(|&c| {
            let p = c as f64 / k;
            -p * p.ln()
        })
        .sum())
}

/// One minus the pseudo-answer's sequence probability.
pub fn max_prob_confidence(greedy_probs: &[f64]) -> Result<f64> {
    if greedy_probs.is_empty() {
        return Err(Error::Contract("max_prob_confidence requires a non-empty answer".into()));
    }
    Ok(1.0 - greedy_probs.iter().product::<f64>())
}

/// Center the k summaries (subtract the mean summary) and return the
/// eigenvalues of (1/k) Z Z^T with the structural zero mode of centering
/// dropped (top k-1 eigenvalues, clamped at zero).
fn centered_gram_spectrum(s: &SampleSet) -> Vec<f64> {
    let k = s.k();
    let d = s.hidden_summaries[0].len();
    let mut mean = vec![0.0; d];
    for row in &s.hidden_summaries {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let centered: Vec<Vec<f64>> = s
        .hidden_summaries
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = crate::oracle::dot(&centered[i], &centered[j]) / k as f64;
        }
    }
    let mut eigs = symmetric_eigenvalues(&gram, k);
    eigs.truncate(k - 1);
    for e in &mut eigs {
        *e = e.max(0.0);
    }
    eigs
}

/// Mean log regularized eigenvalue of the covariance spectrum of the k
/// hidden summaries. Higher = more diverse = more hallucinated.
pub fn eigenscore(s: &SampleSet, reg: f64) -> Result<f64> {
    if s.k() < 2 {
        return Err(Error::Contract("eigenscore requires k >= 2".into()));
    }
    if reg <= 0.0 {
        return Err(Error::Contract("eigenscore requires reg > 0".into()));
    }
    let eigs = centered_gram_spectrum(s);
    Ok(eigs.iter().map(|&l| (l + reg).ln()).sum::<f64>() / eigs.len() as f64)
}

/// Exponentiated entropy of the normalized singular values of the centered
/// summary matrix (zeros dropped). All-identical summaries define rank 1.
pub fn effective_rank(s: &SampleSet) -> Result<f64> {
    if s.k() < 2 {
        return Err(Error::Contract("effective_rank requires k >= 2".into()));
    }
    let eigs = centered_gram_spectrum(s);
    // Singular values of Z/sqrt(k); the normalization cancels below.
    let singulars: Vec<f64> = eigs.iter().map(|&l| l.sqrt()).collect();
    let max = singulars.iter().copied().fold(0.0, f64::max);
    // Centering identical summaries leaves rounding residue, so the zero
    // cutoff is taken relative to the raw summary scale as well.
    let raw_scale = {
        let total: f64 =
            s.hidden_summaries.iter().flat_map(|r| r.iter()).map(|v| v * v).sum();
        let n: usize = s.hidden_summaries.iter().map(Vec::len).sum();
        (total / n.max(1) as f64).sqrt()
    };
    let cutoff = max.max(raw_scale) * 1e-9;
    if max <= cutoff {
        return Ok(1.0);
    }
    let kept: Vec<f64> = singulars.into_iter().filter(|&v| v > cutoff).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(sequences: Vec<Vec<usize>>, loglik: Vec<f64>, summaries: Vec<Vec<f64>>) -> SampleSet {
        let lengths = sequences.iter().map(Vec::len).collect();
        SampleSet {
            example_id: 0,
            sequences,
            loglikelihoods: loglik,
            lengths,
            hidden_summaries: summaries,
        }
    }

    #[test]
    fn ln_entropy_examples() {
        // All tokens probability one -> zero NLL.
        let s = set(vec![vec![1, 2], vec![1, 2]], vec![0.0, 0.0], vec![vec![0.0], vec![0.0]]);
        assert_eq!(ln_entropy(&s).unwrap(), 0.0);

        // Normalized logliks (-0.5, -1.0) -> mean 0.75.
        let s = set(vec![vec![1], vec![2]], vec![-0.5, -1.0], vec![vec![0.0], vec![0.0]]);
        assert!((ln_entropy(&s).unwrap() - 0.75).abs() < 1e-12);

        // Permutation invariance.
        let s2 = set(vec![vec![2], vec![1]], vec![-1.0, -0.5], vec![vec![0.0], vec![0.0]]);
        assert_eq!(ln_entropy(&s).unwrap(), ln_entropy(&s2).unwrap());
    }

    #[test]
    fn dse_examples() {
        let identical = set(
            vec![vec![5, 6]; 4],
            vec![0.0; 4],
            vec![vec![0.0]; 4],
        );
        assert_eq!(discrete_semantic_entropy(&identical).unwrap(), 0.0);

        // Clusters {2,1,1} of k=4: -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.0397.
        let mixed = set(
            vec![vec![1], vec![1], vec![2], vec![3]],
            vec![0.0; 4],
            vec![vec![0.0]; 4],
        );
        let v = discrete_semantic_entropy(&mixed).unwrap();
        assert!((v - 1.0397).abs() < 1e-4, "got {v}");

        let distinct = set(
            vec![vec![1], vec![2], vec![3], vec![4]],
            vec![0.0; 4],
            vec![vec![0.0]; 4],
        );
        let v = discrete_semantic_entropy(&distinct).unwrap();
        assert!((v - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn max_prob_examples() {
        assert_eq!(max_prob_confidence(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((max_prob_confidence(&[0.5, 0.5]).unwrap() - 0.75).abs() < 1e-12);
        let a = max_prob_confidence(&[0.5, 0.5]).unwrap();
        let b = max_prob_confidence(&[0.5, 0.5, 1.0]).unwrap();
        assert_eq!(a, b, "probability-1 token must not change the score");
        assert!(max_prob_confidence(&[]).is_err());
    }

    #[test]
    fn eigenscore_degenerate_and_orthogonal() {
        // Identical summaries: all spectrum mass vanishes -> ln(reg).
        let identical = set(
            vec![vec![1], vec![1]],
            vec![0.0; 2],
            vec![vec![0.3, -0.2, 0.5], vec![0.3, -0.2, 0.5]],
        );
        let reg = 1e-3;
        assert!((eigenscore(&identical, reg).unwrap() - reg.ln()).abs() < 1e-9);

        // Two orthogonal unit summaries: surviving eigenvalue 0.5 -> ln(0.5 + reg).
        let inv = 1.0 / 2.0f64.sqrt();
        let ortho = set(
            vec![vec![1], vec![2]],
            vec![0.0; 2],
            vec![vec![inv, -inv, 0.0, 0.0], vec![0.0, 0.0, inv, -inv]],
        );
        let reg = 1e-9;
        let v = eigenscore(&ortho, reg).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-6, "got {v}, expected ln 0.5");

        let single = set(vec![vec![1]], vec![0.0], vec![vec![1.0]]);
        assert!(eigenscore(&single, 1e-3).is_err());
    }

    #[test]
    fn eigenscore_permutation_invariant() {
        let a = set(
            vec![vec![1], vec![2], vec![3]],
            vec![0.0; 3],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
        );
        let b = set(
            vec![vec![3], vec![1], vec![2]],
            vec![0.0; 3],
            vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let va = eigenscore(&a, 1e-3).unwrap();
        let vb = eigenscore(&b, 1e-3).unwrap();
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn effective_rank_examples() {
        // Two distinct summaries: centered matrix has rank 1 -> exactly 1.
        let two = set(
            vec![vec![1], vec![2]],
            vec![0.0; 2],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        );
        assert!((effective_rank(&two).unwrap() - 1.0).abs() < 1e-9);

        // Rows of the 4x4 identity: three equal nonzero singular values -> 3.
        let mut rows = Vec::new();
        for i in 0..4 {
            let mut r = vec![0.0; 4];
            r[i] = 1.0;
            rows.push(r);
        }
        let simplex = set(vec![vec![1], vec![2], vec![3], vec![4]], vec![0.0; 4], rows);
        let v = effective_rank(&simplex).unwrap();
        assert!((v - 3.0).abs() < 1e-6, "got {v}");

        // All identical -> defined as 1.
        let identical = set(
            vec![vec![1], vec![1], vec![1]],
            vec![0.0; 3],
            vec![vec![0.2, 0.8]; 3],
        );
        assert_eq!(effective_rank(&identical).unwrap(), 1.0);
    }

    #[test]
    fn effective_rank_m_equal_singulars() {
        // Construct summaries whose centered Gram has 2 equal nonzero
        // eigenvalues: three points forming an equilateral triangle.
        let r = 1.0;
        let pts: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
                vec![r * angle.cos(), r * angle.sin()]
            })
            .collect();
        let s = set(vec![vec![1], vec![2], vec![3]], vec![0.0; 3], pts);
        let v = effective_rank(&s).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "got {v}");
    }
}
