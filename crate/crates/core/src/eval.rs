//! Labeling, AUROC, stubborn-subset filtering, the end-to-end benchmark, and
//! ablation sweeps.
//!
//! Hallucination is the positive class (label 1) and every detector is
//! oriented so higher = more hallucinated; each report states this in its
//! header. AUROC ships in two independent implementations (average-rank
//! formula and brute-force pair counting) that must agree.

use crate::baselines::{
    collect_samples, discrete_semantic_entropy, effective_rank, eigenscore, ln_entropy,
    max_prob_confidence, SampleSet,
};
use crate::curvature::{correlation, lambda_max_at, CurvatureReport};
use crate::epgs::{epgs_score_for_target, noise_ratio, pseudo_target, EpgsConfig, Mask, PseudoTarget, ScoreRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ParamLocation};
use crate::rng;
use crate::taskgen::{Corpus, Example, ExampleCategory, END_TOKEN};
use crate::trainer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const SCHEMA_VERSION: &str = "1";

pub const ALL_METHODS: [&str; 6] = [
    "epgs",
    "ln_entropy",
    "discrete_semantic_entropy",
    "max_prob",
    "eigenscore",
    "effective_rank",
];

/// 0 when the pseudo answer matches the reference exactly, 1 otherwise.
pub fn label_example(pseudo_answer: &[usize], reference: &[usize]) -> Result<u8> {
    if reference.is_empty() {
        return Err(Error::Contract("label_example requires a non-empty reference".into()));
    }
    Ok(if pseudo_answer == reference { 0 } else { 1 })
}

fn check_auroc_input(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("auroc length mismatch".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("auroc undefined with a single class".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC via the average-rank formula.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_auroc_input(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Brute-force AUROC: P(score+ > score-) + 0.5 P(tie) over all pairs.
pub fn auroc_pair_count(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_auroc_input(scores, labels)?;
    let mut wins = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        if li != 1 {
            continue;
        }
        for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
            if i == j || lj != 0 {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos * neg) as f64)
}

/// Indices of examples whose largest exact-match cluster among the k samples
/// reaches the consistency threshold.
pub fn stubborn_subset_from_samples(samples: &[SampleSet], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Contract(format!(
            "consistency threshold must be in (0, 1], got {threshold}"
        )));
    }
    Ok(samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.max_cluster_fraction() >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Stand-alone stubborn-subset filter (collects its own samples).
pub fn stubborn_subset(
    model: &Model,
    examples: &[Example],
    k: usize,
    temperature: f64,
    consistency_threshold: f64,
    seed: u64,
    max_new: usize,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Contract("stubborn_subset requires k >= 2".into()));
    }
    let samples: Vec<SampleSet> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| collect_samples(model, i, e, k, temperature, seed, max_new))
        .collect::<Result<_>>()?;
    stubborn_subset_from_samples(&samples, consistency_threshold)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub epgs: EpgsConfig,
    pub methods: Vec<String>,
    pub k: usize,
    pub temperature: f64,
    pub consistency_threshold: f64,
    pub curvature_iters: usize,
    pub curvature_tol: f64,
    /// Cap on curvature probes over the stubborn subset; `None` probes every
    /// member, `Some(0)` disables curvature entirely.
    pub curvature_max_examples: Option<usize>,
    pub eigenscore_reg: f64,
    pub seed: u64,
    pub max_new: usize,
    /// Digest of the resolved run configuration, echoed into the report.
    pub config_digest: String,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            epgs: EpgsConfig::default(),
            methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
            k: 5,
            temperature: 1.0,
            consistency_threshold: 0.8,
            curvature_iters: 15,
            curvature_tol: 1e-4,
            curvature_max_examples: None,
            eigenscore_reg: 1e-3,
            seed: 42,
            max_new: 6,
            config_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AurocFamily {
    pub full: Option<f64>,
    pub stubborn_subset: Option<f64>,
    pub transient_vs_fact: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureBlock {
    pub location: String,
    pub n: usize,
    pub pearson_epgs_lambda: Option<f64>,
    pub spearman_epgs_lambda: Option<f64>,
    pub mean_lambda_fact: Option<f64>,
    pub mean_lambda_stubborn: Option<f64>,
    /// mean lambda_max(stubborn) / mean lambda_max(fact).
    pub sharpness_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceAudit {
    pub final_train_loss: f64,
    pub full_grad_norm: f64,
}

/// Wall-clock seconds per phase. Written to a separate timings file, never
/// into the report itself, so reports stay byte-reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub labeling_s: f64,
    pub scoring_s: f64,
    pub sampling_s: f64,
    pub curvature_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: String,
    /// Orientation statement, repeated in every report to prevent sign confusion.
    pub positive_class: String,
    pub config_digest: String,
    pub n_examples: usize,
    pub n_stubborn_subset: usize,
    pub label_counts: BTreeMap<String, usize>,
    pub category_counts: BTreeMap<String, usize>,
    /// True when labeling produced a single class; AUROC fields are null then.
    pub degenerate_labels: bool,
    pub auroc: BTreeMap<String, AurocFamily>,
    pub curvature: Option<CurvatureBlock>,
    pub convergence_audit: ConvergenceAudit,
}

pub struct BenchmarkOutput {
    pub report: BenchmarkReport,
    pub records: Vec<ScoreRecord>,
    pub samples: Vec<SampleSet>,
    pub curvature: Vec<CurvatureReport>,
    pub stubborn_indices: Vec<usize>,
    pub timings: PhaseTimings,
}

fn method_requested(cfg: &BenchmarkConfig, name: &str) -> bool {
    cfg.methods.iter().any(|m| m == name)
}

/// Score every example with every requested method, label against the
/// references, filter the stubborn subset, probe curvature on it, and
/// aggregate AUROCs. Deterministic given the seeds; examples fan out over
/// the ambient rayon pool with a fixed aggregation order.
pub fn run_benchmark(model: &Model, corpus: &Corpus, cfg: &BenchmarkConfig) -> Result<BenchmarkOutput> {
    for m in &cfg.methods {
        if !ALL_METHODS.contains(&m.as_str()) {
            return Err(Error::Config(format!("unknown method '{m}'")));
        }
    }
    if cfg.k < 2 {
        return Err(Error::Contract("benchmark requires k >= 2 samples".into()));
    }
    let examples = &corpus.eval_examples;
    if examples.len() < 2 {
        return Err(Error::Contract("benchmark requires at least 2 examples".into()));
    }
    let t_start = Instant::now();
    let mut timings = PhaseTimings::default();

    // Phase 1: pseudo-labels.
    let t = Instant::now();
    let targets: Vec<PseudoTarget> = examples
        .par_iter()
        .map(|e| pseudo_target(model, e, cfg.max_new))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = targets
        .iter()
        .zip(examples)
        .map(|(pt, e)| label_example(&pt.pseudo, &e.reference_ids))
        .collect::<Result<_>>()?;
    timings.labeling_s = t.elapsed().as_secs_f64();

    // Phase 2: sampling (shared by the black/white-box baselines and the
    // stubborn subset, which use the same k and temperature).
    let t = Instant::now();
    let samples: Vec<SampleSet> = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| collect_samples(model, i, e, cfg.k, cfg.temperature, cfg.seed, cfg.max_new))
        .collect::<Result<_>>()?;
    timings.sampling_s = t.elapsed().as_secs_f64();

    // Phase 3: detector scores.
    let t = Instant::now();
    let epgs_on = method_requested(cfg, "epgs");
    let mut records: Vec<ScoreRecord> = targets
        .par_iter()
        .enumerate()
        .map(|(i, pt)| -> Result<ScoreRecord> {
            let (epgs, norm, cos, degenerate) = if epgs_on {
                epgs_score_for_target(model, i, pt, &cfg.epgs)?
            } else {
                (0.0, 0.0, 1.0, pt.degenerate)
            };
            let mut baselines = BTreeMap::new();
            if method_requested(cfg, "ln_entropy") {
                baselines.insert("ln_entropy".to_string(), ln_entropy(&samples[i])?);
            }
            if method_requested(cfg, "discrete_semantic_entropy") {
                baselines.insert(
                    "discrete_semantic_entropy".to_string(),
                    discrete_semantic_entropy(&samples[i])?,
                );
            }
            if method_requested(cfg, "max_prob") {
                baselines.insert("max_prob".to_string(), max_prob_confidence(&pt.pseudo_probs)?);
            }
            if method_requested(cfg, "eigenscore") {
                baselines.insert("eigenscore".to_string(), eigenscore(&samples[i], cfg.eigenscore_reg)?);
            }
            if method_requested(cfg, "effective_rank") {
                baselines.insert("effective_rank".to_string(), effective_rank(&samples[i])?);
            }
            Ok(ScoreRecord {
                id: i,
                epgs,
                grad_norm_clean: norm,
                cos_sim: cos,
                pseudo_answer: pt.pseudo.clone(),
                label: labels[i],
                degenerate,
                baselines,
            })
        })
        .collect::<Result<_>>()?;
    for (r, &l) in records.iter_mut().zip(&labels) {
        r.label = l;
    }
    timings.scoring_s = t.elapsed().as_secs_f64();

    let stubborn_indices = stubborn_subset_from_samples(&samples, cfg.consistency_threshold)?;

    // Phase 4: curvature on the stubborn subset.
    let t = Instant::now();
    let curvature_ids: Vec<usize> = match cfg.curvature_max_examples {
        None => stubborn_indices.clone(),
        Some(cap) => stubborn_indices.iter().copied().take(cap).collect(),
    };
    let curvature: Vec<CurvatureReport> = curvature_ids
        .par_iter()
        .map(|&i| {
            lambda_max_at(
                model,
                i,
                &examples[i],
                &cfg.epgs.location,
                cfg.curvature_iters,
                cfg.curvature_tol,
                rng::derive_indexed(cfg.seed, "power", i as u64),
                cfg.max_new,
            )
        })
        .collect::<Result<_>>()?;
    timings.curvature_s = t.elapsed().as_secs_f64();

    // Aggregation.
    let degenerate_labels = {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        pos == 0 || pos == labels.len()
    };

    let score_of = |method: &str, r: &ScoreRecord| -> f64 {
        if method == "epgs" {
            r.epgs
        } else {
            r.baselines[method]
        }
    };
    let try_auroc = |ids: &[usize], method: &str, lbls: &dyn Fn(usize) -> u8| -> Option<f64> {
        let scores: Vec<f64> = ids.iter().map(|&i| score_of(method, &records[i])).collect();
        let labels: Vec<u8> = ids.iter().map(|&i| lbls(i)).collect();
        auroc(&scores, &labels).ok()
    };

    let all_ids: Vec<usize> = (0..examples.len()).collect();
    let tf_ids: Vec<usize> = all_ids
        .iter()
        .copied()
        .filter(|&i| {
            matches!(examples[i].category, ExampleCategory::Transient | ExampleCategory::Fact)
        })
        .collect();
    let mut auroc_map = BTreeMap::new();
    for method in &cfg.methods {
        auroc_map.insert(
            method.clone(),
            AurocFamily {
                full: try_auroc(&all_ids, method, &|i| labels[i]),
                stubborn_subset: try_auroc(&stubborn_indices, method, &|i| labels[i]),
                transient_vs_fact: try_auroc(&tf_ids, method, &|i| {
                    u8::from(examples[i].category == ExampleCategory::Transient)
                }),
            },
        );
    }

    // Curvature correlation block (within this single checkpoint).
    let curvature_block = if curvature.is_empty() {
        None
    } else {
        let xs: Vec<f64> = curvature.iter().map(|c| records[c.example_id].epgs).collect();
        let ys: Vec<f64> = curvature.iter().map(|c| c.lambda_max).collect();
        let corr = correlation(&xs, &ys).ok();
        let mean_for = |cat: ExampleCategory| -> Option<f64> {
            let vals: Vec<f64> = curvature
                .iter()
                .filter(|c| examples[c.example_id].category == cat)
                .map(|c| c.lambda_max)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let mean_fact = mean_for(ExampleCategory::Fact);
        let mean_stub = mean_for(ExampleCategory::StubbornSeed);
        let ratio = match (mean_fact, mean_stub) {
            (Some(f), Some(s)) if f > 0.0 => Some(s / f),
            _ => None,
        };
        Some(CurvatureBlock {
            location: cfg.epgs.location.name(),
            n: curvature.len(),
            pearson_epgs_lambda: corr.map(|c| c.0),
            spearman_epgs_lambda: corr.map(|c| c.1),
            mean_lambda_fact: mean_fact,
            mean_lambda_stubborn: mean_stub,
            sharpness_ratio: ratio,
        })
    };

    let convergence_audit = ConvergenceAudit {
        final_train_loss: trainer::mean_corpus_loss(model, corpus)?,
        full_grad_norm: trainer::corpus_grad_norm(model, corpus)?,
    };

    let mut label_counts = BTreeMap::new();
    label_counts.insert("correct".to_string(), labels.iter().filter(|&&l| l == 0).count());
    label_counts.insert("hallucination".to_string(), labels.iter().filter(|&&l| l == 1).count());
    let mut category_counts = BTreeMap::new();
    for e in examples {
        *category_counts.entry(e.category.name().to_string()).or_insert(0) += 1;
    }

    timings.total_s = t_start.elapsed().as_secs_f64();
    let report = BenchmarkReport {
        schema_version: SCHEMA_VERSION.to_string(),
        positive_class: "hallucination (label 1); higher score = more hallucinated".to_string(),
        config_digest: cfg.config_digest.clone(),
        n_examples: examples.len(),
        n_stubborn_subset: stubborn_indices.len(),
        label_counts,
        category_counts,
        degenerate_labels,
        auroc: auroc_map,
        curvature: curvature_block,
        convergence_audit,
    };
    validate_report(&report)?;
    Ok(BenchmarkOutput { report, records, samples, curvature, stubborn_indices, timings })
}

/// Invariants every emitted report must satisfy (see docs/report-schema.md).
pub fn validate_report(report: &BenchmarkReport) -> Result<()> {
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Contract(format!(
            "report schema version {} does not match {}",
            report.schema_version, SCHEMA_VERSION
        )));
    }
    for (method, fam) in &report.auroc {
        for v in [fam.full, fam.stubborn_subset, fam.transient_vs_fact].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("auroc out of range for {method}: {v}")));
            }
        }
    }
    if let Some(c) = &report.curvature {
        if let Some(r) = c.sharpness_ratio {
            if r <= 0.0 {
                return Err(Error::Contract(format!("sharpness ratio must be positive: {r}")));
            }
        }
    }
    Ok(())
}

// ── Ablations ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    Sigma(Vec<f64>),
    Location(Vec<ParamLocation>),
    Temperature(Vec<f64>),
}

impl AblationGrid {
    pub fn axis_name(&self) -> &'static str {
        match self {
            AblationGrid::Sigma(_) => "sigma",
            AblationGrid::Location(_) => "location",
            AblationGrid::Temperature(_) => "temperature",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub auroc: Option<f64>,
    /// Measured ||delta|| / ||E||, sigma axis only.
    pub noise_ratio: Option<f64>,
    /// Marks grid points beyond the standard four gradient locations.
    pub extension: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

/// One AUROC per grid point with all other settings fixed. The sigma axis
/// also reports the measured noise-ratio column; the location axis flags
/// locations beyond the standard four as extensions.
pub fn run_ablation(
    model: &Model,
    corpus: &Corpus,
    grid: &AblationGrid,
    cfg: &BenchmarkConfig,
) -> Result<AblationTable> {
    let examples = &corpus.eval_examples;
    if examples.is_empty() {
        return Err(Error::Contract("ablation requires examples".into()));
    }
    let empty = match grid {
        AblationGrid::Sigma(v) => v.is_empty(),
        AblationGrid::Location(v) => v.is_empty(),
        AblationGrid::Temperature(v) => v.is_empty(),
    };
    if empty {
        return Err(Error::Contract("ablation grid must be non-empty".into()));
    }

    let targets: Vec<PseudoTarget> = examples
        .par_iter()
        .map(|e| pseudo_target(model, e, cfg.max_new))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = targets
        .iter()
        .zip(examples)
        .map(|(pt, e)| label_example(&pt.pseudo, &e.reference_ids))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    match grid {
        AblationGrid::Sigma(sigmas) => {
            for &sigma in sigmas {
                if sigma < 0.0 {
                    return Err(Error::Contract(format!("sigma must be >= 0, got {sigma}")));
                }
                let epgs_cfg = EpgsConfig { sigma, ..cfg.epgs.clone() };
                let scores: Vec<f64> = targets
                    .par_iter()
                    .enumerate()
                    .map(|(i, pt)| Ok(epgs_score_for_target(model, i, pt, &epgs_cfg)?.0))
                    .collect::<Result<_>>()?;
                let ratios: Vec<f64> = examples
                    .par_iter()
                    .enumerate()
                    .map(|(i, e)| noise_ratio(model, e, sigma, epgs_cfg.noise_seed, i, cfg.max_new))
                    .collect::<Result<_>>()?;
                let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
                rows.push(AblationRow {
                    value: format!("{sigma}"),
                    auroc: auroc(&scores, &labels).ok(),
                    noise_ratio: Some(mean_ratio),
                    extension: false,
                });
            }
        }
        AblationGrid::Location(locations) => {
            for loc in locations {
                // Validate against this model.
                model.group_len(loc)?;
                let epgs_cfg = EpgsConfig { location: *loc, ..cfg.epgs.clone() };
                let scores: Vec<f64> = targets
                    .par_iter()
                    .enumerate()
                    .map(|(i, pt)| Ok(epgs_score_for_target(model, i, pt, &epgs_cfg)?.0))
                    .collect::<Result<_>>()?;
                let standard = matches!(
                    loc,
                    ParamLocation::MidBlock
                        | ParamLocation::LastBlock
                        | ParamLocation::FinalNorm
                        | ParamLocation::Head
                );
                rows.push(AblationRow {
                    value: loc.name(),
                    auroc: auroc(&scores, &labels).ok(),
                    noise_ratio: None,
                    extension: !standard,
                });
            }
        }
        AblationGrid::Temperature(temps) => {
            for &temp in temps {
                if temp <= 0.0 {
                    return Err(Error::Contract(format!(
                        "decoding temperature must be > 0, got {temp}"
                    )));
                }
                // Pseudo-labels regenerated by sampling at this temperature.
                let scored: Vec<(f64, u8)> = examples
                    .par_iter()
                    .enumerate()
                    .map(|(i, e)| -> Result<(f64, u8)> {
                        let seed = rng::derive_indexed(cfg.seed, "ablate-temperature", i as u64);
                        let budget = model
                            .config()
                            .max_seq_len
                            .saturating_sub(e.prompt_ids.len() + 1)
                            .min(cfg.max_new)
                            .max(1);
                        let out = model.sample_decode(&e.prompt_ids, temp, seed, budget, Some(END_TOKEN))?;
                        let pt = target_for_answer(e, &out.ids);
                        let label = label_example(&pt.pseudo, &e.reference_ids)?;
                        let (s, _, _, _) = epgs_score_for_target(model, i, &pt, &cfg.epgs)?;
                        Ok((s, label))
                    })
                    .collect::<Result<_>>()?;
                let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
                let lbls: Vec<u8> = scored.iter().map(|(_, l)| *l).collect();
                rows.push(AblationRow {
                    value: format!("{temp}"),
                    auroc: auroc(&scores, &lbls).ok(),
                    noise_ratio: None,
                    extension: false,
                });
            }
        }
    }
    Ok(AblationTable { axis: grid.axis_name().to_string(), rows })
}

/// Teacher-forced target for an externally decoded answer.
fn target_for_answer(example: &Example, answer: &[usize]) -> PseudoTarget {
    let mut full = example.prompt_ids.clone();
    full.extend_from_slice(answer);
    full.push(END_TOKEN);
    if answer.is_empty() {
        let mut keep = vec![false; full.len()];
        keep[example.prompt_ids.len()] = true;
        return PseudoTarget {
            full,
            mask: Mask { keep },
            pseudo: Vec::new(),
            pseudo_probs: vec![1.0],
            degenerate: true,
        };
    }
    let mask = crate::epgs::build_answer_mask(example.prompt_ids.len(), &full)
        .expect("non-empty answer span");
    PseudoTarget { full, mask, pseudo: answer.to_vec(), pseudo_probs: vec![], degenerate: false }
}

// ── File writers ────────────────────────────────────────────────────

pub fn write_scores_jsonl(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn write_samples_jsonl(samples: &[SampleSet], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}

pub fn write_curvature_jsonl(reports: &[CurvatureReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn write_auroc_csv(report: &BenchmarkReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,scope,auroc")?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "".to_string());
    for (method, fam) in &report.auroc {
        writeln!(f, "{method},full,{}", fmt(fam.full))?;
        writeln!(f, "{method},stubborn_subset,{}", fmt(fam.stubborn_subset))?;
        writeln!(f, "{method},transient_vs_fact,{}", fmt(fam.transient_vs_fact))?;
    }
    Ok(())
}

/// Scatter data behind the curvature correlation: one row per probed example.
pub fn write_curvature_scatter_csv(
    records: &[ScoreRecord],
    curvature: &[CurvatureReport],
    examples: &[Example],
    path: &Path,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epgs,lambda_max,category")?;
    for c in curvature {
        writeln!(
            f,
            "{},{},{}",
            records[c.example_id].epgs,
            c.lambda_max,
            examples[c.example_id].category.name()
        )?;
    }
    Ok(())
}

pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match table.axis.as_str() {
        "sigma" => {
            writeln!(f, "sigma,auroc,noise_ratio")?;
            for r in &table.rows {
                writeln!(
                    f,
                    "{},{},{}",
                    r.value,
                    r.auroc.map(|v| v.to_string()).unwrap_or_default(),
                    r.noise_ratio.map(|v| v.to_string()).unwrap_or_default()
                )?;
            }
        }
        "location" => {
            writeln!(f, "location,auroc,extension")?;
            for r in &table.rows {
                writeln!(
                    f,
                    "{},{},{}",
                    r.value,
                    r.auroc.map(|v| v.to_string()).unwrap_or_default(),
                    r.extension
                )?;
            }
        }
        _ => {
            writeln!(f, "temperature,auroc")?;
            for r in &table.rows {
                writeln!(f, "{},{}", r.value, r.auroc.map(|v| v.to_string()).unwrap_or_default())?;
            }
        }
    }
    Ok(())
}

pub fn write_report_json(report: &BenchmarkReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn write_timings_json(timings: &PhaseTimings, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(timings)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn label_examples() {
        assert_eq!(label_example(&[1, 2], &[1, 2]).unwrap(), 0);
        assert_eq!(label_example(&[1, 3], &[1, 2]).unwrap(), 1);
        assert_eq!(label_example(&[], &[1, 2]).unwrap(), 1);
        assert!(label_example(&[1], &[]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let v = auroc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(v, 1.0);
        // Brute-force oracle: pairs (0.8 vs 0.6, 0.8 vs 0.2, 0.3 vs 0.6, 0.3 vs 0.2)
        // give 3 wins, 1 loss -> 0.75.
        let v = auroc(&[0.8, 0.3, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        let v = auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rank_and_pair_count_agree_with_ties() {
        let mut r = rng::stream(3, "auroc-test");
        for _ in 0..100 {
            let n = r.random_range(4..40);
            // Coarse grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc_pair_count(&scores, &labels).unwrap();
            assert!((a - b).abs() <= 1e-12, "rank {a} vs pairs {b}");
        }
    }

    #[test]
    fn subset_threshold_semantics() {
        let mk = |seqs: Vec<Vec<usize>>| SampleSet {
            example_id: 0,
            lengths: seqs.iter().map(Vec::len).collect(),
            loglikelihoods: vec![0.0; seqs.len()],
            hidden_summaries: vec![vec![0.0]; seqs.len()],
            sequences: seqs,
        };
        let unanimous = mk(vec![vec![7, 8]; 5]);
        let split = mk(vec![vec![1], vec![2], vec![3], vec![4], vec![5]]);
        let subset = stubborn_subset_from_samples(&[unanimous, split], 1.0).unwrap();
        assert_eq!(subset, vec![0]);
        let subset = stubborn_subset_from_samples(
            &[mk(vec![vec![1], vec![2], vec![3], vec![4], vec![5]])],
            0.21,
        )
        .unwrap();
        assert!(subset.is_empty(), "5 distinct samples exceed no threshold > 0.2");
        assert!(stubborn_subset_from_samples(&[], 0.0).is_err());
        assert!(stubborn_subset_from_samples(&[], 1.5).is_err());
    }

    #[test]
    fn injected_records_recover_known_auroc() {
        // Synthetic scores with known pair counts, checked through both routes.
        let scores = vec![0.1, 0.9, 0.4, 0.6, 0.6];
        let labels = vec![0, 1, 0, 1, 0];
        let by_rank = auroc(&scores, &labels).unwrap();
        let by_pairs = auroc_pair_count(&scores, &labels).unwrap();
        assert_eq!(by_rank, by_pairs);
        // Hand count: positives {0.9, 0.6}, negatives {0.1, 0.4, 0.6}.
        // 0.9 beats all three; 0.6 beats two, ties one -> (3 + 2.5) / 6.
        assert!((by_rank - 5.5 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn report_validation_rejects_bad_auroc() {
        let mut auroc_map = BTreeMap::new();
        auroc_map.insert(
            "epgs".to_string(),
            AurocFamily { full: Some(1.4), stubborn_subset: None, transient_vs_fact: None },
        );
        let report = BenchmarkReport {
            schema_version: SCHEMA_VERSION.to_string(),
            positive_class: "hallucination".into(),
            config_digest: String::new(),
            n_examples: 2,
            n_stubborn_subset: 0,
            label_counts: BTreeMap::new(),
            category_counts: BTreeMap::new(),
            degenerate_labels: false,
            auroc: auroc_map,
            curvature: None,
            convergence_audit: ConvergenceAudit { final_train_loss: 0.0, full_grad_norm: 0.0 },
        };
        assert!(validate_report(&report).is_err());
    }
}
