//! Embedding-Perturbed Gradient Sensitivity.
//!
//! Three phases per example: greedy pseudo-answer + answer-span masking,
//! Gaussian perturbation of the full teacher-forced input embedding matrix,
//! and two last-block gradient passes combined into
//! `S = ||g_clean|| * (1 - CosSim(g_clean, g_perturbed))`.
//!
//! Also here: a Monte-Carlo estimate of output-space stability under
//! uniform-ball embedding noise (the KL criterion that *cannot* separate
//! memorized errors from facts — both are stable), and the rank-1
//! input-parameter weight-update construction with its residual probe.

use crate::error::{Error, Result};
use crate::model::{ForwardInput, GradientVector, Model, ParamLocation, ParamScope};
use crate::oracle::{dot, l2_norm};
use crate::rng;
use crate::tape::{softmax_row, Tape, Tensor};
use crate::taskgen::{Example, END_TOKEN};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpgsConfig {
    /// Gaussian noise std per embedding coordinate.
    pub sigma: f64,
    /// Parameter group the gradients are taken at.
    pub location: ParamLocation,
    /// Stabilization constant in the cosine denominator.
    pub stabilization_eps: f64,
    pub noise_seed: u64,
    /// Restrict the perturbation to prompt rows (sensitivity probe; the
    /// default perturbs the entire teacher-forced embedding matrix).
    pub perturb_prompt_only: bool,
    /// Cap on greedy pseudo-answer length.
    pub max_new: usize,
}

impl Default for EpgsConfig {
    fn default() -> Self {
        EpgsConfig {
            sigma: 0.1,
            location: ParamLocation::LastBlock,
            stabilization_eps: 1e-8,
            noise_seed: 0,
            perturb_prompt_only: false,
            max_new: 6,
        }
    }
}

/// Binary target mask over the positions of a teacher-forced sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn last_kept(&self) -> Option<usize> {
        self.keep.iter().rposition(|&k| k)
    }
}

/// Per-example detector outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: usize,
    pub epgs: f64,
    pub grad_norm_clean: f64,
    pub cos_sim: f64,
    pub pseudo_answer: Vec<usize>,
    /// 1 = hallucination.
    pub label: u8,
    /// Set when the model emitted the end token immediately; the score
    /// degrades to the clean gradient norm.
    pub degenerate: bool,
    pub baselines: BTreeMap<String, f64>,
}

/// Keep exactly the answer-token positions of `full_target` (everything after
/// the prompt except the trailing end-of-answer token).
pub fn build_answer_mask(prompt_len: usize, full_target: &[usize]) -> Result<Mask> {
    if prompt_len >= full_target.len() {
        return Err(Error::Contract(format!(
            "prompt length {} must be shorter than the target ({} tokens)",
            prompt_len,
            full_target.len()
        )));
    }
    if prompt_len + 1 >= full_target.len() {
        return Err(Error::Contract("empty answer span".into()));
    }
    let keep: Vec<bool> =
        (0..full_target.len()).map(|i| i >= prompt_len && i + 1 < full_target.len()).collect();
    Ok(Mask { keep })
}

/// Next-token targets for the masked loss: row r predicts position r+1, kept
/// only where the mask keeps that position.
pub fn masked_targets(full: &[usize], mask: &Mask) -> Vec<i64> {
    let l = full.len();
    (0..l)
        .map(|r| if r + 1 < l && mask.keep[r + 1] { full[r + 1] as i64 } else { -1 })
        .collect()
}

/// Sum over kept positions of -log P(target | prefix), evaluated from an
/// embedding matrix (the teacher-forced prompt ++ target input).
pub fn masked_loss(model: &Model, embeddings: &Tensor, target: &[usize], mask: &Mask) -> Result<f64> {
    check_alignment(embeddings, target, mask)?;
    let mut tape = Tape::inference();
    let (_, fwd) = model.forward_on_tape(
        &mut tape,
        ForwardInput::Embeddings(embeddings),
        ParamScope::NoParams,
        false,
    )?;
    let loss = tape.cross_entropy_masked(fwd.logits, &masked_targets(target, mask));
    Ok(tape.scalar_value(loss))
}

/// Masked loss plus its gradient at one parameter location.
pub fn masked_loss_grad(
    model: &Model,
    embeddings: &Tensor,
    target: &[usize],
    mask: &Mask,
    location: &ParamLocation,
) -> Result<(f64, GradientVector)> {
    check_alignment(embeddings, target, mask)?;
    let mut tape = Tape::new();
    let (params, fwd) = model.forward_on_tape(
        &mut tape,
        ForwardInput::Embeddings(embeddings),
        ParamScope::Only(*location),
        false,
    )?;
    let loss = tape.cross_entropy_masked(fwd.logits, &masked_targets(target, mask));
    tape.backward(loss)?;
    let g = model.gradient_vector(&tape, &params, location)?;
    Ok((tape.scalar_value(loss), g))
}

/// Masked loss plus its gradient w.r.t. the input embedding matrix.
pub fn masked_loss_embedding_grad(
    model: &Model,
    embeddings: &Tensor,
    target: &[usize],
    mask: &Mask,
) -> Result<(f64, Tensor)> {
    check_alignment(embeddings, target, mask)?;
    let mut tape = Tape::new();
    let (_, fwd) = model.forward_on_tape(
        &mut tape,
        ForwardInput::Embeddings(embeddings),
        ParamScope::NoParams,
        true,
    )?;
    let loss = tape.cross_entropy_masked(fwd.logits, &masked_targets(target, mask));
    tape.backward(loss)?;
    let grad = tape
        .grad(fwd.input_embeddings)
        .ok_or_else(|| Error::Contract("embedding gradient was not tracked".into()))?;
    Ok((
        tape.scalar_value(loss),
        Tensor::new(embeddings.shape.clone(), grad.to_vec())?,
    ))
}

fn check_alignment(embeddings: &Tensor, target: &[usize], mask: &Mask) -> Result<()> {
    if embeddings.shape.len() != 2 || embeddings.shape[0] != target.len() {
        return Err(Error::Contract(format!(
            "embeddings cover {} positions but the target has {}",
            embeddings.shape.first().copied().unwrap_or(0),
            target.len()
        )));
    }
    if mask.keep.len() != target.len() {
        return Err(Error::Contract(format!(
            "mask covers {} positions but the target has {}",
            mask.keep.len(),
            target.len()
        )));
    }
    if mask.kept_count() == 0 {
        return Err(Error::Contract("mask keeps no positions".into()));
    }
    Ok(())
}

/// Add i.i.d. N(0, sigma^2) noise per coordinate from a seeded stream;
/// sigma = 0 returns the input bit-identically.
pub fn perturb_embeddings(e: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return e.clone();
    }
    let mut r = rng::stream(seed, "perturb");
    let mut out = e.clone();
    for v in &mut out.data {
        *v += sigma * r.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Stabilized cosine: u.v / (max(||u||, eps) * max(||v||, eps)).
pub fn cosine_sim_stabilized(u: &[f64], v: &[f64], eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(dot(u, v) / (l2_norm(u).max(eps) * l2_norm(v).max(eps)))
}

/// Stabilized cosine between two gradient vectors at the same location.
pub fn cosine_similarity(u: &GradientVector, v: &GradientVector, eps: f64) -> Result<f64> {
    cosine_sim_stabilized(&u.values, &v.values, eps)
}

/// Assemble the score from a clean/perturbed gradient pair. The cosine is
/// clamped to [-1, 1] after the stabilized formula, so S is never negative.
/// Returns (epgs, grad_norm_clean, cos_sim).
pub fn epgs_from_gradients(g_clean: &[f64], g_perturbed: &[f64], eps: f64) -> Result<(f64, f64, f64)> {
    let norm = l2_norm(g_clean);
    // Bit-identical gradients (the zero-perturbation case) have cosine
    // exactly 1; the formula only reproduces that up to rounding.
    let cos = if g_clean == g_perturbed && norm > 0.0 {
        1.0
    } else {
        cosine_sim_stabilized(g_clean, g_perturbed, eps)?.clamp(-1.0, 1.0)
    };
    Ok((norm * (1.0 - cos), norm, cos))
}

/// Greedy pseudo-label plus the teacher-forced sequence and answer mask
/// shared by the detector and the curvature oracle.
pub struct PseudoTarget {
    pub full: Vec<usize>,
    pub mask: Mask,
    pub pseudo: Vec<usize>,
    pub pseudo_probs: Vec<f64>,
    pub degenerate: bool,
}

pub fn pseudo_target(model: &Model, example: &Example, max_new: usize) -> Result<PseudoTarget> {
    let prompt_len = example.prompt_ids.len();
    let budget = model
        .config()
        .max_seq_len
        .saturating_sub(prompt_len + 1)
        .min(max_new)
        .max(1);
    let out = model.greedy_decode(&example.prompt_ids, budget, Some(END_TOKEN))?;
    let mut full = example.prompt_ids.clone();
    full.extend_from_slice(&out.ids);
    full.push(END_TOKEN);
    if out.ids.is_empty() {
        // The model emitted the end token immediately. Score the end-token
        // prediction alone and flag the record; pseudo_probs carries the
        // end-token probability so confidence baselines stay total.
        let mut keep = vec![false; full.len()];
        keep[prompt_len] = true;
        return Ok(PseudoTarget {
            full,
            mask: Mask { keep },
            pseudo: Vec::new(),
            pseudo_probs: vec![out.stop_prob.unwrap_or(1.0)],
            degenerate: true,
        });
    }
    let mask = build_answer_mask(prompt_len, &full)?;
    Ok(PseudoTarget { full, mask, pseudo: out.ids, pseudo_probs: out.probs, degenerate: false })
}

/// Run all three phases on one example. The label is computed downstream.
pub fn epgs_score(model: &Model, example_id: usize, example: &Example, cfg: &EpgsConfig) -> Result<ScoreRecord> {
    let pt = pseudo_target(model, example, cfg.max_new)?;
    let (epgs, norm, cos, degenerate) = epgs_score_for_target(model, example_id, &pt, cfg)?;
    Ok(ScoreRecord {
        id: example_id,
        epgs,
        grad_norm_clean: norm,
        cos_sim: cos,
        pseudo_answer: pt.pseudo,
        label: 0,
        degenerate,
        baselines: BTreeMap::new(),
    })
}

/// Phases 2-3 against a fixed pseudo-target (seam for the temperature
/// ablation, which scores sampled pseudo-labels instead of greedy ones).
pub fn epgs_score_for_target(
    model: &Model,
    example_id: usize,
    pt: &PseudoTarget,
    cfg: &EpgsConfig,
) -> Result<(f64, f64, f64, bool)> {
    let prompt_len = pt.full.len() - pt.pseudo.len() - 1;
    let e = model.embed(&pt.full)?;
    let seed = rng::derive_indexed(cfg.noise_seed, "noise", example_id as u64);
    let mut e_pert = perturb_embeddings(&e, cfg.sigma, seed);
    if cfg.perturb_prompt_only {
        let d = e.shape[1];
        e_pert.data[prompt_len * d..].copy_from_slice(&e.data[prompt_len * d..]);
    }

    // Two backward passes with independent tapes; the clean pass runs first.
    let (_, g_clean) = masked_loss_grad(model, &e, &pt.full, &pt.mask, &cfg.location)?;
    let (_, g_pert) = masked_loss_grad(model, &e_pert, &pt.full, &pt.mask, &cfg.location)?;

    if pt.degenerate {
        return Ok((g_clean.norm_l2, g_clean.norm_l2, 0.0, true));
    }
    let (epgs, norm, cos) =
        epgs_from_gradients(&g_clean.values, &g_pert.values, cfg.stabilization_eps)?;
    Ok((epgs, norm, cos, false))
}

/// Measured ||delta||_2 / ||E||_2 for one example at one sigma (the noise
/// calibration diagnostic).
pub fn noise_ratio(model: &Model, example: &Example, sigma: f64, noise_seed: u64, example_id: usize, max_new: usize) -> Result<f64> {
    let pt = pseudo_target(model, example, max_new)?;
    let e = model.embed(&pt.full)?;
    let seed = rng::derive_indexed(noise_seed, "noise", example_id as u64);
    let e_pert = perturb_embeddings(&e, sigma, seed);
    let delta: Vec<f64> = e_pert.data.iter().zip(&e.data).map(|(a, b)| a - b).collect();
    let denom = l2_norm(&e.data);
    if denom == 0.0 {
        return Err(Error::Numerical("zero-norm embedding matrix".into()));
    }
    Ok(l2_norm(&delta) / denom)
}

/// KL(p || q) in nats over two discrete distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
        .sum()
}

fn next_probs_from_embeddings(model: &Model, e: &Tensor) -> Result<Vec<f64>> {
    let trace = model.forward_embeddings(e)?;
    let c = trace.logits.cols();
    let last = trace.logits.rows() - 1;
    let mut probs = vec![0.0; c];
    softmax_row(&trace.logits.data[last * c..(last + 1) * c], &mut probs);
    Ok(probs)
}

/// Monte-Carlo mean KL between the clean and perturbed next-token
/// distributions at the first answer position, with the perturbation drawn
/// uniformly from the radius-rho Euclidean ball over the flattened prompt
/// embedding.
pub fn kl_stability(model: &Model, example: &Example, rho: f64, n_samples: usize, seed: u64) -> Result<f64> {
    if rho < 0.0 {
        return Err(Error::Contract(format!("rho must be >= 0, got {rho}")));
    }
    if n_samples == 0 {
        return Err(Error::Contract("kl_stability requires n_samples >= 1".into()));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let e = model.embed(&example.prompt_ids)?;
    let p_clean = next_probs_from_embeddings(model, &e)?;
    let n = e.data.len();
    let mut total = 0.0;
    for s in 0..n_samples {
        let mut r = rng::stream_indexed(seed, "kl-ball", s as u64);
        let mut dir: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let norm = l2_norm(&dir).max(1e-300);
        // Exact uniform-in-ball: unit direction scaled by rho * U^(1/n).
        let u: f64 = r.random();
        let radius = rho * u.powf(1.0 / n as f64);
        for d in &mut dir {
            *d *= radius / norm;
        }
        let mut e_pert = e.clone();
        for (v, d) in e_pert.data.iter_mut().zip(&dir) {
            *v += d;
        }
        let p_pert = next_probs_from_embeddings(model, &e_pert)?;
        total += kl_divergence(&p_clean, &p_pert);
    }
    Ok(total / n_samples as f64)
}

/// Rank-1 update replicating an input-side activation shift through a linear
/// map: for z = W h (W row-major [out_dim, in_dim]), returns
/// dW = (W dh) h^T / ||h||^2, which satisfies (W + dW) h = W (h + dh).
pub fn rank1_weight_update(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    h: &[f64],
    dh: &[f64],
) -> Result<Vec<f64>> {
    if w.len() != out_dim * in_dim || h.len() != in_dim || dh.len() != in_dim {
        return Err(Error::Contract("rank1_weight_update dimension mismatch".into()));
    }
    let h_sq = dot(h, h);
    if h_sq < 1e-18 {
        return Err(Error::Numerical("rank-1 update against a near-zero activation".into()));
    }
    let mut w_dh = vec![0.0; out_dim];
    for i in 0..out_dim {
        w_dh[i] = dot(&w[i * in_dim..(i + 1) * in_dim], dh);
    }
    let mut out = vec![0.0; out_dim * in_dim];
    for i in 0..out_dim {
        for j in 0..in_dim {
            out[i * in_dim + j] = w_dh[i] * h[j] / h_sq;
        }
    }
    Ok(out)
}

/// Both sides of the input-parameter equivalence and their gap.
#[derive(Debug, Clone, Copy)]
pub struct IsoResidual {
    pub residual: f64,
    pub loss_input_side: f64,
    pub loss_param_side: f64,
}

/// Evaluate the masked loss with the input perturbed (E + delta) and with the
/// equivalent rank-1 update applied to the last block's MLP output projection
/// instead, and return both values with their absolute difference.
///
/// The per-position rank-1 updates are built from the projection's input
/// activations (clean vs perturbed forward) and summed over positions. The
/// model is cloned for the parameter-side evaluation, so the op is pure.
pub fn isomorphism_residual(
    model: &Model,
    example: &Example,
    delta: &Tensor,
    max_new: usize,
) -> Result<IsoResidual> {
    let pt = pseudo_target(model, example, max_new)?;
    if pt.degenerate {
        return Err(Error::Contract("empty pseudo-answer; nothing to evaluate".into()));
    }
    let e = model.embed(&pt.full)?;
    if delta.shape != e.shape {
        return Err(Error::Contract(format!(
            "delta shape {:?} does not match embedding shape {:?}",
            delta.shape, e.shape
        )));
    }
    let mut e_pert = e.clone();
    for (v, d) in e_pert.data.iter_mut().zip(&delta.data) {
        *v += d;
    }

    let targets = masked_targets(&pt.full, &pt.mask);
    let clean_trace = model.forward_embeddings(&e)?;
    let pert_trace = model.forward_embeddings(&e_pert)?;
    let loss_input_side = masked_loss(model, &e_pert, &pt.full, &pt.mask)?;

    // Sum of per-position rank-1 updates on the last block's MLP output
    // projection, from the activations feeding it.
    let cfg = model.config();
    let (d_ff, d_model) = (cfg.d_ff, cfg.d_model);
    let w2_name = format!("block{}.mlp.w2", cfg.n_layers - 1);
    let w2 = model
        .tensor_data(&w2_name)
        .ok_or_else(|| Error::Contract("missing MLP output projection".into()))?
        .to_vec();
    let a_clean = &clean_trace.last_mlp_act;
    let a_pert = &pert_trace.last_mlp_act;
    let l = a_clean.rows();
    let mut dw = vec![0.0; d_ff * d_model];
    for t in 0..l {
        let at = &a_clean.data[t * d_ff..(t + 1) * d_ff];
        let apt = &a_pert.data[t * d_ff..(t + 1) * d_ff];
        let a_sq = dot(at, at);
        if a_sq < 1e-18 {
            if targets[t] >= 0 {
                return Err(Error::Numerical(format!(
                    "near-zero MLP activation at kept position {t}"
                )));
            }
            continue;
        }
        // da row-vector through W2: (da W2) is a d_model row.
        let mut da_w2 = vec![0.0; d_model];
        for p in 0..d_ff {
            let da = apt[p] - at[p];
            if da != 0.0 {
                let w_row = &w2[p * d_model..(p + 1) * d_model];
                for j in 0..d_model {
                    da_w2[j] += da * w_row[j];
                }
            }
        }
        // dW2 += a^T (da W2) / ||a||^2  so that a dW2 = da W2.
        for p in 0..d_ff {
            let coeff = at[p] / a_sq;
            if coeff != 0.0 {
                for j in 0..d_model {
                    dw[p * d_model + j] += coeff * da_w2[j];
                }
            }
        }
    }

    let mut shifted = model.clone();
    {
        let w2_mut = shifted.tensor_data_mut(&w2_name).expect("tensor exists");
        for (w, d) in w2_mut.iter_mut().zip(&dw) {
            *w += d;
        }
    }
    let loss_param_side = masked_loss(&shifted, &e, &pt.full, &pt.mask)?;

    Ok(IsoResidual {
        residual: (loss_input_side - loss_param_side).abs(),
        loss_input_side,
        loss_param_side,
    })
}
