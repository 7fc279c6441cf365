//! Minimal decoder-only transformer with addressable parameter groups.
//!
//! Pre-norm blocks (norm -> attention -> residual, norm -> MLP -> residual)
//! with a final norm before an untied output head. The forward pass runs
//! from token ids or from an externally supplied embedding matrix (the
//! perturbation path), on any [`Tape`], so the same code serves inference,
//! training, and gradient probes.
//!
//! Parameters are held in a fixed canonical tensor order (embedding tables,
//! then each block's tensors in declaration order, then final norm, then
//! head), which makes flattened parameter groups and gradient vectors
//! comparable across calls.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{softmax_row, NodeId, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const CAUSAL_MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Addressable parameter group of the model.
///
/// `MidBlock` and `LastBlock` are aliases resolving to block indices
/// floor(n_layers/2) and n_layers-1; together with `Embedding`, every
/// `Block(i)`, `FinalNorm` and `Head`, the resolved locations partition the
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamLocation {
    Embedding,
    MidBlock,
    LastBlock,
    Block(usize),
    FinalNorm,
    Head,
}

impl ParamLocation {
    /// Resolve block aliases against a layer count.
    pub fn resolve(&self, n_layers: usize) -> ResolvedLocation {
        match self {
            ParamLocation::Embedding => ResolvedLocation { kind: *self, block_index: None },
            ParamLocation::MidBlock => {
                ResolvedLocation { kind: *self, block_index: Some(n_layers / 2) }
            }
            ParamLocation::LastBlock => {
                ResolvedLocation { kind: *self, block_index: Some(n_layers - 1) }
            }
            ParamLocation::Block(i) => ResolvedLocation { kind: *self, block_index: Some(*i) },
            ParamLocation::FinalNorm | ParamLocation::Head => {
                ResolvedLocation { kind: *self, block_index: None }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(ParamLocation::Embedding),
            "mid_block" => Ok(ParamLocation::MidBlock),
            "last_block" => Ok(ParamLocation::LastBlock),
            "final_norm" => Ok(ParamLocation::FinalNorm),
            "head" => Ok(ParamLocation::Head),
            other => {
                if let Some(i) = other.strip_prefix("block:") {
                    let idx: usize = i
                        .parse()
                        .map_err(|_| Error::Config(format!("bad block index in '{other}'")))?;
                    Ok(ParamLocation::Block(idx))
                } else {
                    Err(Error::Config(format!("unknown parameter location '{other}'")))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            ParamLocation::Embedding => "embedding".into(),
            ParamLocation::MidBlock => "mid_block".into(),
            ParamLocation::LastBlock => "last_block".into(),
            ParamLocation::Block(i) => format!("block:{i}"),
            ParamLocation::FinalNorm => "final_norm".into(),
            ParamLocation::Head => "head".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedLocation {
    pub kind: ParamLocation,
    pub block_index: Option<usize>,
}

/// Flattened gradients of one parameter group, in canonical parameter order.
#[derive(Debug, Clone)]
pub struct GradientVector {
    pub location: ParamLocation,
    pub values: Vec<f64>,
    pub norm_l2: f64,
}

impl GradientVector {
    pub fn new(location: ParamLocation, values: Vec<f64>) -> Self {
        let norm_l2 = crate::oracle::l2_norm(&values);
        GradientVector { location, values, norm_l2 }
    }
}

struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Which parameters a taped forward should track gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    NoParams,
    Only(ParamLocation),
    All,
}

/// Forward input: token ids, or a pre-built (possibly perturbed) embedding
/// matrix that bypasses the embedding tables entirely.
pub enum ForwardInput<'a> {
    Ids(&'a [usize]),
    Embeddings(&'a Tensor),
}

/// Parameter leaves registered on a tape, one per model tensor.
pub struct TapedParams {
    nodes: Vec<NodeId>,
    grad_flags: Vec<bool>,
}

/// Node handles produced by one taped forward pass.
pub struct TapedForward {
    pub logits: NodeId,
    pub input_embeddings: NodeId,
    /// Post-embedding state plus the state after each block (n_layers + 1).
    pub hidden_states: Vec<NodeId>,
    /// Per layer, per head attention weight matrices [L, L].
    pub attn_weights: Vec<Vec<NodeId>>,
    /// GELU activations feeding the last block's MLP output projection [L, d_ff].
    pub last_mlp_act: NodeId,
}

/// Value snapshot of a forward pass.
pub struct ForwardTrace {
    pub logits: Tensor,
    pub hidden_states: Vec<Tensor>,
    pub input_embeddings: Tensor,
    pub attn_weights: Vec<Vec<Tensor>>,
    pub last_mlp_act: Tensor,
}

/// Greedy decode output. `stop_prob` is the probability of the stop token
/// when decoding terminated on it.
#[derive(Debug, Clone)]
pub struct GreedyDecode {
    pub ids: Vec<usize>,
    pub probs: Vec<f64>,
    pub stop_prob: Option<f64>,
}

/// Sampled decode output; log-probabilities are under the untempered model
/// distribution.
#[derive(Debug, Clone)]
pub struct SampleDecode {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
}

pub struct Model {
    config: ModelConfig,
    tensors: Vec<ParamTensor>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        }
    }
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut v = vec![
        ("tok_embedding".to_string(), vec![config.vocab_size, d]),
        ("pos_embedding".to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 0..config.n_layers {
        let p = format!("block{i}");
        v.push((format!("{p}.ln1.gain"), vec![d]));
        v.push((format!("{p}.ln1.bias"), vec![d]));
        v.push((format!("{p}.attn.wq"), vec![d, d]));
        v.push((format!("{p}.attn.bq"), vec![d]));
        v.push((format!("{p}.attn.wk"), vec![d, d]));
        v.push((format!("{p}.attn.bk"), vec![d]));
        v.push((format!("{p}.attn.wv"), vec![d, d]));
        v.push((format!("{p}.attn.bv"), vec![d]));
        v.push((format!("{p}.attn.wo"), vec![d, d]));
        v.push((format!("{p}.attn.bo"), vec![d]));
        v.push((format!("{p}.ln2.gain"), vec![d]));
        v.push((format!("{p}.ln2.bias"), vec![d]));
        v.push((format!("{p}.mlp.w1"), vec![d, config.d_ff]));
        v.push((format!("{p}.mlp.b1"), vec![config.d_ff]));
        v.push((format!("{p}.mlp.w2"), vec![config.d_ff, d]));
        v.push((format!("{p}.mlp.b2"), vec![d]));
    }
    v.push(("final_norm.gain".to_string(), vec![d]));
    v.push(("final_norm.bias".to_string(), vec![d]));
    v.push(("head.weight".to_string(), vec![d, config.vocab_size]));
    v.push(("head.bias".to_string(), vec![config.vocab_size]));
    v
}

const TENSORS_PER_BLOCK: usize = 16;

impl Model {
    /// Initialize deterministically from `config.seed`: weights N(0, 0.02),
    /// biases zero, norm gains one, one counter-derived stream per tensor.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let tensors = layout(&config)
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape))| {
                let numel: usize = shape.iter().product();
                let data = if shape.len() >= 2 {
                    let mut r = rng::stream_indexed(config.seed, "init", idx as u64);
                    (0..numel).map(|_| 0.02 * r.sample::<f64, _>(StandardNormal)).collect()
                } else if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else {
                    vec![0.0; numel]
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(Model { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Iterate (name, shape, data) in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice()))
    }

    /// Rebuild a model from named tensors; layout and shapes must match the
    /// canonical layout for `config` exactly.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Model> {
        config.validate()?;
        let expected = layout(&config);
        if named.len() != expected.len() {
            return Err(Error::Corruption(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, data), (ename, eshape)) in named.into_iter().zip(expected) {
            if name != ename || shape != eshape {
                return Err(Error::Corruption(format!(
                    "tensor mismatch: got {name} {shape:?}, expected {ename} {eshape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            if data.len() != numel {
                return Err(Error::Corruption(format!("tensor {name} has wrong element count")));
            }
            tensors.push(ParamTensor { name, shape, data });
        }
        Ok(Model { config, tensors })
    }

    // ── Parameter groups ────────────────────────────────────────────

    /// Canonical tensor indices of a location.
    pub fn tensor_indices(&self, loc: &ParamLocation) -> Result<Vec<usize>> {
        let n = self.config.n_layers;
        let resolved = loc.resolve(n);
        match resolved.kind {
            ParamLocation::Embedding => Ok(vec![0, 1]),
            ParamLocation::FinalNorm => {
                let base = 2 + n * TENSORS_PER_BLOCK;
                Ok(vec![base, base + 1])
            }
            ParamLocation::Head => {
                let base = 2 + n * TENSORS_PER_BLOCK + 2;
                Ok(vec![base, base + 1])
            }
            _ => {
                let i = resolved.block_index.expect("block location resolves to an index");
                if i >= n {
                    return Err(Error::Contract(format!(
                        "block index {i} out of range for {n} layers"
                    )));
                }
                let base = 2 + i * TENSORS_PER_BLOCK;
                Ok((base..base + TENSORS_PER_BLOCK).collect())
            }
        }
    }

    /// Flattened parameter values of a group, canonical order.
    pub fn flatten_params(&self, loc: &ParamLocation) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for i in self.tensor_indices(loc)? {
            out.extend_from_slice(&self.tensors[i].data);
        }
        Ok(out)
    }

    pub fn group_len(&self, loc: &ParamLocation) -> Result<usize> {
        Ok(self.tensor_indices(loc)?.iter().map(|&i| self.tensors[i].data.len()).sum())
    }

    /// Overwrite a group from a flat vector (canonical order).
    pub fn write_params(&mut self, loc: &ParamLocation, flat: &[f64]) -> Result<()> {
        let indices = self.tensor_indices(loc)?;
        let total: usize = indices.iter().map(|&i| self.tensors[i].data.len()).sum();
        if flat.len() != total {
            return Err(Error::Contract(format!(
                "group {} expects {} values, got {}",
                loc.name(),
                total,
                flat.len()
            )));
        }
        let mut off = 0;
        for i in indices {
            let len = self.tensors[i].data.len();
            self.tensors[i].data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Mutable access to one named tensor (test and probe seam).
    pub fn tensor_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.data)
    }

    pub fn tensor_data(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| t.data.as_slice())
    }

    // ── Forward ─────────────────────────────────────────────────────

    /// Register all parameter tensors as tape leaves; gradients are tracked
    /// for the tensors selected by `scope`.
    pub fn register_params(&self, tape: &mut Tape, scope: ParamScope) -> Result<TapedParams> {
        let grad_set: Vec<bool> = match scope {
            ParamScope::NoParams => vec![false; self.tensors.len()],
            ParamScope::All => vec![true; self.tensors.len()],
            ParamScope::Only(loc) => {
                let mut v = vec![false; self.tensors.len()];
                for i in self.tensor_indices(&loc)? {
                    v[i] = true;
                }
                v
            }
        };
        let nodes = self
            .tensors
            .iter()
            .zip(&grad_set)
            .map(|(t, &g)| tape.leaf(t.data.clone(), t.shape.clone(), g))
            .collect();
        Ok(TapedParams { nodes, grad_flags: grad_set })
    }

    /// Run the forward pass on a tape with previously registered parameters.
    ///
    /// With `ForwardInput::Ids`, input embeddings are the token-table gather
    /// plus positional rows. With `ForwardInput::Embeddings`, the tables are
    /// bypassed and the override is used verbatim (`embed_grad` requests
    /// gradients w.r.t. the override).
    pub fn forward_with_params(
        &self,
        tape: &mut Tape,
        params: &TapedParams,
        input: ForwardInput,
        embed_grad: bool,
    ) -> Result<TapedForward> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let emb = match input {
            ForwardInput::Ids(ids) => {
                if ids.is_empty() {
                    return Err(Error::Contract("empty input sequence".into()));
                }
                if ids.len() > cfg.max_seq_len {
                    return Err(Error::Contract(format!(
                        "sequence length {} exceeds max_seq_len {}",
                        ids.len(),
                        cfg.max_seq_len
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
                    return Err(Error::Contract(format!("token id {bad} out of vocab range")));
                }
                let positions: Vec<usize> = (0..ids.len()).collect();
                let tok = tape.embed_gather(params.nodes[0], ids);
                let pos = tape.embed_gather(params.nodes[1], &positions);
                tape.add(tok, pos)
            }
            ForwardInput::Embeddings(t) => {
                if t.shape.len() != 2 || t.shape[1] != d {
                    return Err(Error::Contract(format!(
                        "embedding override must be [L, {d}], got {:?}",
                        t.shape
                    )));
                }
                if t.shape[0] == 0 || t.shape[0] > cfg.max_seq_len {
                    return Err(Error::Contract(format!(
                        "embedding override length {} out of range",
                        t.shape[0]
                    )));
                }
                tape.leaf_tensor(t, embed_grad)
            }
        };

        let seq_len = tape.shape(emb)[0];
        let mask = causal_mask(tape, seq_len);
        let dh = cfg.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        let mut hidden_states = Vec::with_capacity(cfg.n_layers + 1);
        let mut attn_weights = Vec::with_capacity(cfg.n_layers);
        let mut last_mlp_act = emb; // overwritten in every block
        let mut x = emb;
        hidden_states.push(x);

        for i in 0..cfg.n_layers {
            let b = 2 + i * TENSORS_PER_BLOCK;
            let t = |off: usize| params.nodes[b + off];

            // Attention sublayer.
            let ln1 = tape.layer_norm(x, t(0), t(1));
            let q0 = tape.matmul(ln1, t(2));
            let q = tape.add_row(q0, t(3));
            let k0 = tape.matmul(ln1, t(4));
            let k = tape.add_row(k0, t(5));
            let v0 = tape.matmul(ln1, t(6));
            let v = tape.add_row(v0, t(7));

            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            let mut head_weights = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (from, to) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(k, from, to);
                let vh = tape.slice_cols(v, from, to);
                let scores0 = tape.matmul_nt(qh, kh);
                let scores1 = tape.scale(scores0, inv_sqrt_dh);
                let scores = tape.add(scores1, mask);
                let aw = tape.row_softmax(scores);
                head_weights.push(aw);
                head_outs.push(tape.matmul(aw, vh));
            }
            attn_weights.push(head_weights);
            let merged = tape.concat_cols(&head_outs);
            let proj0 = tape.matmul(merged, t(8));
            let proj = tape.add_row(proj0, t(9));
            x = tape.add(x, proj);

            // MLP sublayer.
            let ln2 = tape.layer_norm(x, t(10), t(11));
            let h0 = tape.matmul(ln2, t(12));
            let h1 = tape.add_row(h0, t(13));
            let act = tape.gelu(h1);
            last_mlp_act = act;
            let m0 = tape.matmul(act, t(14));
            let m1 = tape.add_row(m0, t(15));
            x = tape.add(x, m1);

            hidden_states.push(x);
        }

        let base = 2 + cfg.n_layers * TENSORS_PER_BLOCK;
        let fin = tape.layer_norm(x, params.nodes[base], params.nodes[base + 1]);
        let logits0 = tape.matmul(fin, params.nodes[base + 2]);
        let logits = tape.add_row(logits0, params.nodes[base + 3]);

        Ok(TapedForward { logits, input_embeddings: emb, hidden_states, attn_weights, last_mlp_act })
    }

    /// Register-and-forward convenience.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: ForwardInput,
        scope: ParamScope,
        embed_grad: bool,
    ) -> Result<(TapedParams, TapedForward)> {
        let params = self.register_params(tape, scope)?;
        let fwd = self.forward_with_params(tape, &params, input, embed_grad)?;
        Ok((params, fwd))
    }

    /// Inference forward from token ids.
    pub fn forward_ids(&self, ids: &[usize]) -> Result<ForwardTrace> {
        let mut tape = Tape::inference();
        let (_, fwd) = self.forward_on_tape(&mut tape, ForwardInput::Ids(ids), ParamScope::NoParams, false)?;
        Ok(self.trace_from(&tape, &fwd))
    }

    /// Inference forward from an embedding override.
    pub fn forward_embeddings(&self, emb: &Tensor) -> Result<ForwardTrace> {
        let mut tape = Tape::inference();
        let (_, fwd) =
            self.forward_on_tape(&mut tape, ForwardInput::Embeddings(emb), ParamScope::NoParams, false)?;
        Ok(self.trace_from(&tape, &fwd))
    }

    fn trace_from(&self, tape: &Tape, fwd: &TapedForward) -> ForwardTrace {
        ForwardTrace {
            logits: tape.to_tensor(fwd.logits),
            hidden_states: fwd.hidden_states.iter().map(|&h| tape.to_tensor(h)).collect(),
            input_embeddings: tape.to_tensor(fwd.input_embeddings),
            attn_weights: fwd
                .attn_weights
                .iter()
                .map(|layer| layer.iter().map(|&a| tape.to_tensor(a)).collect())
                .collect(),
            last_mlp_act: tape.to_tensor(fwd.last_mlp_act),
        }
    }

    /// Token embedding plus positional encoding, shape [L, d_model] — the
    /// matrix the perturbation phase adds noise to. Feeding this back through
    /// the override path reproduces `forward_ids` bit for bit.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        if ids.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} out of vocab range")));
        }
        let tok_table = tape.leaf(self.tensors[0].data.clone(), self.tensors[0].shape.clone(), false);
        let pos_table = tape.leaf(self.tensors[1].data.clone(), self.tensors[1].shape.clone(), false);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.embed_gather(tok_table, ids);
        let pos = tape.embed_gather(pos_table, &positions);
        let e = tape.add(tok, pos);
        Ok(tape.to_tensor(e))
    }

    /// Next-token probability distribution after the given context.
    pub fn next_token_probs(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let trace = self.forward_ids(ids)?;
        let c = trace.logits.cols();
        let last = trace.logits.rows() - 1;
        let mut probs = vec![0.0; c];
        softmax_row(&trace.logits.data[last * c..(last + 1) * c], &mut probs);
        Ok(probs)
    }

    // ── Decoding ────────────────────────────────────────────────────

    /// Greedy decoding: append argmax tokens (lowest index wins exact ties)
    /// until the stop token, `max_new` tokens, or the context limit.
    /// The stop token terminates decoding and is not part of `ids`.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop_token: Option<usize>,
    ) -> Result<GreedyDecode> {
        if prompt.is_empty() {
            return Err(Error::Contract("greedy_decode requires a non-empty prompt".into()));
        }
        if max_new == 0 {
            return Err(Error::Contract("greedy_decode requires max_new >= 1".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = GreedyDecode { ids: Vec::new(), probs: Vec::new(), stop_prob: None };
        while out.ids.len() < max_new && seq.len() < self.config.max_seq_len {
            let probs = self.next_token_probs(&seq)?;
            let (tok, p) = argmax(&probs);
            if Some(tok) == stop_token {
                out.stop_prob = Some(p);
                break;
            }
            out.ids.push(tok);
            out.probs.push(p);
            seq.push(tok);
        }
        Ok(out)
    }

    /// Temperature sampling from softmax(logits / temperature), seeded.
    /// Log-probabilities are under the untempered (T=1) model distribution.
    pub fn sample_decode(
        &self,
        prompt: &[usize],
        temperature: f64,
        seed: u64,
        max_new: usize,
        stop_token: Option<usize>,
    ) -> Result<SampleDecode> {
        if temperature <= 0.0 {
            return Err(Error::Contract(format!(
                "sample_decode requires temperature > 0, got {temperature}"
            )));
        }
        if prompt.is_empty() {
            return Err(Error::Contract("sample_decode requires a non-empty prompt".into()));
        }
        let mut rng = rng::stream(seed, "sample-decode");
        let mut seq = prompt.to_vec();
        let mut out = SampleDecode { ids: Vec::new(), logprobs: Vec::new() };
        while out.ids.len() < max_new && seq.len() < self.config.max_seq_len {
            let trace = self.forward_ids(&seq)?;
            let c = trace.logits.cols();
            let last = trace.logits.rows() - 1;
            let row = &trace.logits.data[last * c..(last + 1) * c];
            let tempered: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
            let mut probs = vec![0.0; c];
            softmax_row(&tempered, &mut probs);
            let u: f64 = rng.random();
            let tok = sample_categorical(&probs, u);
            let mut model_probs = vec![0.0; c];
            softmax_row(row, &mut model_probs);
            if Some(tok) == stop_token {
                break;
            }
            out.ids.push(tok);
            out.logprobs.push(model_probs[tok].ln());
            seq.push(tok);
        }
        Ok(out)
    }

    // ── Gradients ───────────────────────────────────────────────────

    /// Collect a location's flattened gradients from registered parameter
    /// leaves after a backward pass (zeros where no gradient flowed).
    pub fn gradient_vector(
        &self,
        tape: &Tape,
        params: &TapedParams,
        loc: &ParamLocation,
    ) -> Result<GradientVector> {
        let mut values = Vec::with_capacity(self.group_len(loc)?);
        for i in self.tensor_indices(loc)? {
            if !params.grad_flags[i] {
                return Err(Error::Contract(format!(
                    "gradients for tensor {} were not tracked in this forward",
                    self.tensors[i].name
                )));
            }
            match tape.grad(params.nodes[i]) {
                Some(g) => values.extend_from_slice(g),
                None => values.extend(std::iter::repeat(0.0).take(self.tensors[i].data.len())),
            }
        }
        Ok(GradientVector::new(*loc, values))
    }

    /// Flattened gradient over every parameter tensor (training order).
    pub fn full_gradient(&self, tape: &Tape, params: &TapedParams) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.total_params());
        for (i, t) in self.tensors.iter().enumerate() {
            match tape.grad(params.nodes[i]) {
                Some(g) => values.extend_from_slice(g),
                None => values.extend(std::iter::repeat(0.0).take(t.data.len())),
            }
        }
        values
    }

    /// Apply a flat delta to every parameter tensor (training order).
    pub fn apply_update(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.total_params());
        let mut off = 0;
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v += delta[off];
                off += 1;
            }
        }
    }
}

impl TapedParams {
    pub fn node(&self, tensor_index: usize) -> NodeId {
        self.nodes[tensor_index]
    }
}

fn causal_mask(tape: &mut Tape, len: usize) -> NodeId {
    let mut m = vec![0.0; len * len];
    for t in 0..len {
        for j in (t + 1)..len {
            m[t * len + j] = CAUSAL_MASK_NEG;
        }
    }
    tape.leaf(m, vec![len, len], false)
}

fn argmax(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs[best])
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
