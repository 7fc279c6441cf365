//! Deterministic generator of the synthetic fact-recall world.
//!
//! The corpus is engineered so that, after training, three regimes exist by
//! construction: facts (each key seen with its true value under `redundancy`
//! distinct template prefixes), stubborn-hallucination seeds (each key seen
//! exactly once, paired with a corrupted value), and transient queries (keys
//! never seen in training). References always carry the true value; the
//! corruption lives only in the training sequences.
//!
//! Sequence format: `template(3) ++ key ++ QUERY ++ value(2) ++ END`.
//! Symbol pools (templates, keys, values) are pairwise disjoint and disjoint
//! from the reserved tokens.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Reserved token: end of answer.
pub const END_TOKEN: usize = 1;
/// Reserved token: query marker between key and answer.
pub const QUERY_TOKEN: usize = 2;
/// Tokens per template prefix.
pub const TEMPLATE_LEN: usize = 3;
/// Tokens per answer value.
pub const ANSWER_LEN: usize = 2;
/// Size of the shared value-symbol pool.
const VALUE_POOL: usize = 48;

const FIRST_FREE_TOKEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Singleton keys train against a random value different from their true value.
    WrongValue,
    /// Singleton keys train against the next singleton's true value.
    SwappedValue,
}

impl CorruptionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wrong_value" => Ok(CorruptionMode::WrongValue),
            "swapped_value" => Ok(CorruptionMode::SwappedValue),
            other => Err(Error::Config(format!("unknown corruption_mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_facts: usize,
    pub n_singletons: usize,
    pub n_transient: usize,
    /// Distinct templates per fact (>= 4).
    pub redundancy: usize,
    /// Total template pool size.
    pub n_templates: usize,
    pub corruption_mode: CorruptionMode,
    pub seed: u64,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.n_facts == 0 {
            return Err(Error::Config("n_facts must be >= 1".into()));
        }
        if self.redundancy < 4 {
            return Err(Error::Config(format!(
                "redundancy must be >= 4, got {}",
                self.redundancy
            )));
        }
        if self.n_templates < self.redundancy {
            return Err(Error::Config(format!(
                "n_templates {} cannot cover redundancy {}",
                self.n_templates, self.redundancy
            )));
        }
        Ok(())
    }

    fn n_keys(&self) -> usize {
        self.n_facts + self.n_singletons + self.n_transient
    }

    /// Smallest vocab that fits all symbol pools.
    pub fn required_vocab(&self) -> usize {
        FIRST_FREE_TOKEN + TEMPLATE_LEN * self.n_templates + self.n_keys() + VALUE_POOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleCategory {
    Fact,
    StubbornSeed,
    Transient,
}

impl ExampleCategory {
    pub fn name(&self) -> &'static str {
        match self {
            ExampleCategory::Fact => "fact",
            ExampleCategory::StubbornSeed => "stubborn_seed",
            ExampleCategory::Transient => "transient",
        }
    }
}

/// One evaluation instance. `reference_ids` is always the uncorrupted truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example {
    pub prompt_ids: Vec<usize>,
    pub reference_ids: Vec<usize>,
    pub category: ExampleCategory,
    pub fact_id: usize,
    pub template_id: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_sequences: Vec<Vec<usize>>,
    pub eval_examples: Vec<Example>,
    pub spec: TaskSpec,
    /// Corrupted training answer per stubborn-seed fact id.
    corrupted: BTreeMap<usize, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    seq: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct EvalRecord {
    prompt: Vec<usize>,
    reference: Vec<usize>,
    category: String,
    fact_id: usize,
    template_id: usize,
}

/// Generate the corpus. Deterministic in `spec.seed`; fails if the symbol
/// pools do not fit in `vocab_limit`.
pub fn generate_corpus(spec: &TaskSpec, vocab_limit: usize) -> Result<Corpus> {
    spec.validate()?;
    let required = spec.required_vocab();
    if required > vocab_limit {
        return Err(Error::Config(format!(
            "task needs a vocab of at least {required} symbols, model provides {vocab_limit}"
        )));
    }

    let mut r = rng::stream(spec.seed, "task");
    let key_base = FIRST_FREE_TOKEN + TEMPLATE_LEN * spec.n_templates;
    let val_base = key_base + spec.n_keys();
    let template = |t: usize| -> Vec<usize> {
        (0..TEMPLATE_LEN).map(|i| FIRST_FREE_TOKEN + t * TEMPLATE_LEN + i).collect()
    };
    let draw_value = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        (0..ANSWER_LEN).map(|_| val_base + r.random_range(0..VALUE_POOL)).collect()
    };

    // Per-key template assignments and true values, in fact-id order.
    let all_templates: Vec<usize> = (0..spec.n_templates).collect();
    let mut fact_templates = Vec::with_capacity(spec.n_facts);
    let mut true_values: Vec<Vec<usize>> = Vec::with_capacity(spec.n_keys());
    for _ in 0..spec.n_facts {
        let mut pool = all_templates.clone();
        pool.shuffle(&mut r);
        pool.truncate(spec.redundancy);
        fact_templates.push(pool);
        true_values.push(draw_value(&mut r));
    }
    let mut singleton_templates = Vec::with_capacity(spec.n_singletons);
    for _ in 0..spec.n_singletons {
        singleton_templates.push(r.random_range(0..spec.n_templates));
        true_values.push(draw_value(&mut r));
    }
    let mut transient_templates = Vec::with_capacity(spec.n_transient);
    for _ in 0..spec.n_transient {
        transient_templates.push(r.random_range(0..spec.n_templates));
        true_values.push(draw_value(&mut r));
    }

    // Corrupted training answers for singletons.
    let mut corrupted = BTreeMap::new();
    for s in 0..spec.n_singletons {
        let fact_id = spec.n_facts + s;
        let truth = &true_values[fact_id];
        let bad = match spec.corruption_mode {
            CorruptionMode::SwappedValue if spec.n_singletons > 1 => {
                let neighbor = spec.n_facts + (s + 1) % spec.n_singletons;
                if true_values[neighbor] != *truth {
                    true_values[neighbor].clone()
                } else {
                    resample_distinct(&mut r, truth, val_base)
                }
            }
            _ => resample_distinct(&mut r, truth, val_base),
        };
        corrupted.insert(fact_id, bad);
    }

    let seq = |t: usize, key: usize, value: &[usize]| -> Vec<usize> {
        let mut s = template(t);
        s.push(key_base + key);
        s.push(QUERY_TOKEN);
        s.extend_from_slice(value);
        s.push(END_TOKEN);
        s
    };
    let prompt = |t: usize, key: usize| -> Vec<usize> {
        let mut s = template(t);
        s.push(key_base + key);
        s.push(QUERY_TOKEN);
        s
    };

    let mut train_sequences = Vec::new();
    let mut eval_examples = Vec::new();
    for f in 0..spec.n_facts {
        for &t in &fact_templates[f] {
            train_sequences.push(seq(t, f, &true_values[f]));
        }
        eval_examples.push(Example {
            prompt_ids: prompt(fact_templates[f][0], f),
            reference_ids: true_values[f].clone(),
            category: ExampleCategory::Fact,
            fact_id: f,
            template_id: fact_templates[f][0],
        });
    }
    for s in 0..spec.n_singletons {
        let fact_id = spec.n_facts + s;
        let t = singleton_templates[s];
        train_sequences.push(seq(t, fact_id, &corrupted[&fact_id]));
        eval_examples.push(Example {
            prompt_ids: prompt(t, fact_id),
            reference_ids: true_values[fact_id].clone(),
            category: ExampleCategory::StubbornSeed,
            fact_id,
            template_id: t,
        });
    }
    for tr in 0..spec.n_transient {
        let fact_id = spec.n_facts + spec.n_singletons + tr;
        let t = transient_templates[tr];
        eval_examples.push(Example {
            prompt_ids: prompt(t, fact_id),
            reference_ids: true_values[fact_id].clone(),
            category: ExampleCategory::Transient,
            fact_id,
            template_id: t,
        });
    }

    Ok(Corpus { train_sequences, eval_examples, spec: spec.clone(), corrupted })
}

fn resample_distinct(
    r: &mut rand_chacha::ChaCha8Rng,
    truth: &[usize],
    val_base: usize,
) -> Vec<usize> {
    loop {
        let cand: Vec<usize> =
            (0..ANSWER_LEN).map(|_| val_base + r.random_range(0..VALUE_POOL)).collect();
        if cand != truth {
            return cand;
        }
    }
}

impl Corpus {
    /// Prompt length shared by every example (template + key + query marker).
    pub fn prompt_len(&self) -> usize {
        TEMPLATE_LEN + 2
    }

    /// Longest training sequence.
    pub fn max_train_len(&self) -> usize {
        self.train_sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// The corrupted training answer of a stubborn-seed fact id.
    pub fn corrupted_answer(&self, fact_id: usize) -> Option<&Vec<usize>> {
        self.corrupted.get(&fact_id)
    }

    pub fn save_train_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for seq in &self.train_sequences {
            let rec = TrainRecord { seq: seq.clone() };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn save_eval_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.eval_examples {
            let rec = EvalRecord {
                prompt: e.prompt_ids.clone(),
                reference: e.reference_ids.clone(),
                category: e.category.name().to_string(),
                fact_id: e.fact_id,
                template_id: e.template_id,
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    /// Rebuild a corpus from its JSONL files. The corrupted-answer map is
    /// recovered by matching stubborn-seed prompts against training sequences.
    pub fn load_jsonl(train_path: &Path, eval_path: &Path, spec: TaskSpec) -> Result<Corpus> {
        let mut train_sequences = Vec::new();
        for line in BufReader::new(std::fs::File::open(train_path)?).lines() {
            let rec: TrainRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Corruption(format!("bad train record: {e}")))?;
            train_sequences.push(rec.seq);
        }
        let mut eval_examples = Vec::new();
        for line in BufReader::new(std::fs::File::open(eval_path)?).lines() {
            let rec: EvalRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Corruption(format!("bad eval record: {e}")))?;
            let category = match rec.category.as_str() {
                "fact" => ExampleCategory::Fact,
                "stubborn_seed" => ExampleCategory::StubbornSeed,
                "transient" => ExampleCategory::Transient,
                other => return Err(Error::Corruption(format!("unknown category '{other}'"))),
            };
            eval_examples.push(Example {
                prompt_ids: rec.prompt,
                reference_ids: rec.reference,
                category,
                fact_id: rec.fact_id,
                template_id: rec.template_id,
            });
        }
        let mut corrupted = BTreeMap::new();
        for e in &eval_examples {
            if e.category == ExampleCategory::StubbornSeed {
                let found = train_sequences.iter().find(|s| s.starts_with(&e.prompt_ids));
                let seq = found.ok_or_else(|| {
                    Error::Corruption(format!(
                        "stubborn seed fact {} has no training sequence",
                        e.fact_id
                    ))
                })?;
                corrupted.insert(e.fact_id, seq[e.prompt_ids.len()..seq.len() - 1].to_vec());
            }
        }
        Ok(Corpus { train_sequences, eval_examples, spec, corrupted })
    }
}
