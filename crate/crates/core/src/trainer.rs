//! Adam training loop for the tiny transformer.
//!
//! The loss is next-token cross-entropy over the answer span and end token
//! (template, key and query-marker positions are ignored), averaged per kept
//! position. Deterministic in (model seed, cfg.seed); single-threaded by
//! design — determinism outranks parallel speed here.

use crate::error::{Error, Result};
use crate::model::{ForwardInput, Model, ParamScope};
use crate::oracle::l2_norm;
use crate::rng;
use crate::tape::Tape;
use crate::taskgen::{Corpus, ExampleCategory, END_TOKEN};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 32,
            learning_rate: 3e-4,
            adam_betas: (0.9, 0.999),
            weight_decay: 0.0,
            grad_clip_norm: Some(1.0),
            seed: 0,
            log_every: 50,
        }
    }
}

/// Training outcome: loss curve, stationarity audit, and the greedy-decode
/// convergence check that decides whether the three regimes actually formed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// (step, mean loss per kept position) at every `log_every` steps.
    pub loss_curve: Vec<(usize, f64)>,
    /// Mean masked loss over the full training corpus after the final step.
    pub final_train_loss: f64,
    /// L2 norm of the full-parameter gradient of that loss (stationarity audit).
    pub final_grad_norm: f64,
    pub fact_accuracy: f64,
    pub stubborn_accuracy: f64,
    /// Fraction of stubborn seeds whose greedy answer equals the corrupted
    /// training value — what makes them hallucinations that are stubborn.
    pub stubborn_match_corrupted: f64,
    pub converged: bool,
}

impl TrainReport {
    pub fn write_loss_curve_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss")?;
        for (step, loss) in &self.loss_curve {
            writeln!(f, "{step},{loss}")?;
        }
        Ok(())
    }
}

/// Targets for one training sequence: predictions are kept from the first
/// answer position through the end token.
fn targets_for(seq: &[usize], prompt_len: usize) -> Vec<i64> {
    let l = seq.len();
    (0..l)
        .map(|r| if r + 1 < l && r + 1 >= prompt_len { seq[r + 1] as i64 } else { -1 })
        .collect()
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, grads: &[f64], cfg: &TrainConfig, out: &mut [f64]) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let (b1, b2) = cfg.adam_betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..grads.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            out[i] = -cfg.learning_rate * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Mean masked loss of a set of sequences, with or without gradients.
fn corpus_loss(model: &Model, seqs: &[&Vec<usize>], prompt_len: usize, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = if with_grad { Tape::new() } else { Tape::inference() };
    let scope = if with_grad { ParamScope::All } else { ParamScope::NoParams };
    let params = model.register_params(&mut tape, scope)?;
    let mut total = None;
    let mut kept = 0usize;
    for seq in seqs {
        let fwd = model.forward_with_params(&mut tape, &params, ForwardInput::Ids(seq), false)?;
        let targets = targets_for(seq, prompt_len);
        kept += targets.iter().filter(|&&t| t >= 0).count();
        let loss = tape.cross_entropy_masked(fwd.logits, &targets);
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss),
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / kept.max(1) as f64);
    let value = tape.scalar_value(mean);
    if with_grad {
        tape.backward(mean)?;
        Ok((value, Some(model.full_gradient(&tape, &params))))
    } else {
        Ok((value, None))
    }
}

/// Train to convergence. Returns the trained model and a report; aborts with
/// a diagnostic if the loss goes non-finite.
pub fn train(mut model: Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if cfg.steps == 0 {
        return Err(Error::Contract("train requires steps >= 1".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Contract("learning_rate must be > 0".into()));
    }
    if corpus.train_sequences.is_empty() {
        return Err(Error::Contract("empty training corpus".into()));
    }
    if corpus.max_train_len() > model.config().max_seq_len {
        return Err(Error::Contract(format!(
            "corpus sequences of length {} exceed max_seq_len {}",
            corpus.max_train_len(),
            model.config().max_seq_len
        )));
    }

    let prompt_len = corpus.prompt_len();
    let n_seq = corpus.train_sequences.len();
    let batch = cfg.batch_size.max(1).min(n_seq);
    let mut adam = Adam::new(model.total_params());
    let mut delta = vec![0.0; model.total_params()];
    let mut order: Vec<usize> = (0..n_seq).collect();
    let mut cursor = n_seq; // force shuffle on first step
    let mut epoch = 0u64;
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        if cursor + batch > n_seq {
            let mut r = rng::stream_indexed(cfg.seed, "shuffle", epoch);
            order.shuffle(&mut r);
            epoch += 1;
            cursor = 0;
        }
        let batch_ids = &order[cursor..cursor + batch];
        cursor += batch;

        let seqs: Vec<&Vec<usize>> =
            batch_ids.iter().map(|&i| &corpus.train_sequences[i]).collect();
        let (loss, grads) = corpus_loss(&model, &seqs, prompt_len, true)?;
        let mut grads = grads.expect("gradients requested");

        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss/gradient at step {step} (batch {:?})",
                batch_ids
            )));
        }
        if let Some(max_norm) = cfg.grad_clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        adam.step(&grads, cfg, &mut delta);
        if cfg.weight_decay > 0.0 {
            let wd = cfg.learning_rate * cfg.weight_decay;
            let current: Vec<f64> = {
                let mut flat = Vec::with_capacity(model.total_params());
                for (_, _, d) in model.tensors() {
                    flat.extend_from_slice(d);
                }
                flat
            };
            for (d, p) in delta.iter_mut().zip(&current) {
                *d -= wd * p;
            }
        }
        model.apply_update(&delta);

        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            curve.push((step, loss));
        }
    }

    // Stationarity audit over the whole corpus.
    let all: Vec<&Vec<usize>> = corpus.train_sequences.iter().collect();
    let (final_train_loss, grads) = corpus_loss(&model, &all, prompt_len, true)?;
    let final_grad_norm = l2_norm(&grads.expect("gradients requested"));

    let report = convergence_report(&model, corpus, curve, final_train_loss, final_grad_norm)?;
    Ok((model, report))
}

fn convergence_report(
    model: &Model,
    corpus: &Corpus,
    loss_curve: Vec<(usize, f64)>,
    final_train_loss: f64,
    final_grad_norm: f64,
) -> Result<TrainReport> {
    let max_new = crate::taskgen::ANSWER_LEN + 2;
    let mut fact_total = 0usize;
    let mut fact_right = 0usize;
    let mut stub_total = 0usize;
    let mut stub_right = 0usize;
    let mut stub_corrupted = 0usize;
    for e in &corpus.eval_examples {
        match e.category {
            ExampleCategory::Fact => {
                fact_total += 1;
                let out = model.greedy_decode(&e.prompt_ids, max_new, Some(END_TOKEN))?;
                if out.ids == e.reference_ids {
                    fact_right += 1;
                }
            }
            ExampleCategory::StubbornSeed => {
                stub_total += 1;
                let out = model.greedy_decode(&e.prompt_ids, max_new, Some(END_TOKEN))?;
                if out.ids == e.reference_ids {
                    stub_right += 1;
                }
                if Some(&out.ids) == corpus.corrupted_answer(e.fact_id) {
                    stub_corrupted += 1;
                }
            }
            ExampleCategory::Transient => {}
        }
    }
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let fact_accuracy = frac(fact_right, fact_total);
    let stubborn_accuracy = frac(stub_right, stub_total);
    let stubborn_match_corrupted = frac(stub_corrupted, stub_total);
    let converged = fact_accuracy >= 0.9
        && (stub_total == 0 || (stubborn_accuracy <= 0.1 && stubborn_match_corrupted >= 0.8));
    Ok(TrainReport {
        loss_curve,
        final_train_loss,
        final_grad_norm,
        fact_accuracy,
        stubborn_accuracy,
        stubborn_match_corrupted,
        converged,
    })
}

/// Mean masked loss of the full training corpus (no gradients).
pub fn mean_corpus_loss(model: &Model, corpus: &Corpus) -> Result<f64> {
    let all: Vec<&Vec<usize>> = corpus.train_sequences.iter().collect();
    Ok(corpus_loss(model, &all, corpus.prompt_len(), false)?.0)
}

/// Full-parameter gradient norm of the mean corpus loss (stationarity audit
/// for an arbitrary checkpoint).
pub fn corpus_grad_norm(model: &Model, corpus: &Corpus) -> Result<f64> {
    let all: Vec<&Vec<usize>> = corpus.train_sequences.iter().collect();
    let (_, g) = corpus_loss(model, &all, corpus.prompt_len(), true)?;
    Ok(l2_norm(&g.expect("gradients requested")))
}
