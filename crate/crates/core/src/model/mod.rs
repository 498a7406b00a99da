//! Minimal decoder-only transformer with exact input-embedding gradients.
//!
//! The model is deliberately small enough that full-vocabulary sums and
//! dense D×D Fisher matrices stay tractable on a CPU. All math is `f64`.
//! Forward passes and gradients are pure functions of `(params, input)`;
//! parameters are immutable once trained, so concurrent use needs no locks.
//!
//! The forward pass consumes an [`EmbeddedInput`] — a matrix of per-token
//! embedding rows — rather than token ids, because the susceptibility
//! machinery differentiates through the input embeddings themselves.
//! Token-id sequences are embedded by the `reparam` module (scoring paths)
//! or by the training loop.

pub mod checkpoint;
pub mod train;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tape::{NodeId, Tape};
use crate::vocab::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input must contain at least one position")]
    EmptyInput,
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("input width {got} does not match embedding width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("final position must not be padding")]
    PadAtFinalPosition,
    #[error("answer id {answer} outside vocabulary of size {vocab}")]
    AnswerOutOfRange { answer: TokenId, vocab: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block (pre-LN attention + MLP).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array2<f64>,
    pub ln1_beta: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_gamma: Array2<f64>,
    pub ln2_beta: Array2<f64>,
    pub w_up: Array2<f64>,
    pub b_up: Array2<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array2<f64>,
}

/// Full parameter set, including embedding tables and the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Array2<f64>,
    pub lnf_beta: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Seeded Gaussian initialization; the PAD embedding row is frozen
    /// at zero so padded slots contribute nothing to a lifted layout.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng))
        };

        let d = config.embed_dim;
        let m = config.mlp_dim();
        let mut token_embed = gauss(config.vocab_size, d);
        token_embed.row_mut(crate::vocab::Vocabulary::PAD as usize).fill(0.0);
        let pos_embed = gauss(config.max_seq_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: Array2::ones((1, d)),
                ln1_beta: Array2::zeros((1, d)),
                wq: gauss(d, d),
                bq: Array2::zeros((1, d)),
                wk: gauss(d, d),
                bk: Array2::zeros((1, d)),
                wv: gauss(d, d),
                bv: Array2::zeros((1, d)),
                wo: gauss(d, d),
                bo: Array2::zeros((1, d)),
                ln2_gamma: Array2::ones((1, d)),
                ln2_beta: Array2::zeros((1, d)),
                w_up: gauss(d, m),
                b_up: Array2::zeros((1, m)),
                w_down: gauss(m, d),
                b_down: Array2::zeros((1, d)),
            })
            .collect();
        let w_out = gauss(d, config.vocab_size);
        Ok(Self {
            config,
            token_embed,
            pos_embed,
            layers,
            lnf_gamma: Array2::ones((1, d)),
            lnf_beta: Array2::zeros((1, d)),
            w_out,
            b_out: Array2::zeros((1, config.vocab_size)),
        })
    }

    /// All tensors in a fixed order; the order is the contract shared by
    /// checkpointing and the optimizer state.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ];
            out.extend(named.map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf_gamma".to_string(), &self.lnf_gamma));
        out.push(("lnf_beta".to_string(), &self.lnf_beta));
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.token_embed, &mut self.pos_embed];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.w_up,
                &mut l.b_up,
                &mut l.w_down,
                &mut l.b_down,
            ]);
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Next-token distribution after the final position of `input`.
    pub fn forward(&self, input: &EmbeddedInput) -> Result<NextTokenDistribution, ModelError> {
        let eval = self.eval_input_internal(input, false)?;
        Ok(eval.dist)
    }

    /// Raw output-layer logits after the final position.
    pub fn final_logits(&self, input: &EmbeddedInput) -> Result<Vec<f64>, ModelError> {
        let eval = self.eval_input_internal(input, false)?;
        let row = eval.tape.value(eval.logits_node).row(0);
        Ok(row.to_vec())
    }

    /// Log-probability of `answer` after the final position, in nats.
    pub fn log_prob(&self, input: &EmbeddedInput, answer: TokenId) -> Result<f64, ModelError> {
        self.check_answer(answer)?;
        Ok(self.forward(input)?.log_probs()[answer as usize])
    }

    /// Exact reverse-mode gradient of `log_prob(input, answer)` with respect
    /// to every entry of the input embedding matrix. Model weights are
    /// treated as constants; gradient rows at PAD positions are zero.
    pub fn grad_logprob_wrt_inputs(
        &self,
        input: &EmbeddedInput,
        answer: TokenId,
    ) -> Result<Array2<f64>, ModelError> {
        let mut eval = self.eval_input(input)?;
        eval.grad_log_prob(answer)
    }

    /// Records one forward pass and keeps the tape so that gradients for
    /// many answers can be taken without recomputing the forward.
    pub fn eval_input(&self, input: &EmbeddedInput) -> Result<InputEval, ModelError> {
        self.eval_input_internal(input, true)
    }

    fn eval_input_internal(
        &self,
        input: &EmbeddedInput,
        track: bool,
    ) -> Result<InputEval, ModelError> {
        self.validate_input(input)?;
        let len = input.len();
        let mut tape = Tape::new();
        let x = tape.leaf(input.rows.clone(), track);
        let nodes = self.insert_leaves(&mut tape, false);
        let hidden = transformer_hidden(&mut tape, &self.config, &nodes, x, &input.pad);
        let last = tape.slice_rows(hidden, len - 1, 1);
        let proj = tape.matmul(last, nodes.w_out);
        let logits = tape.add_row(proj, nodes.b_out);
        let dist = NextTokenDistribution::from_logits(tape.value(logits).row(0).as_slice().unwrap());
        Ok(InputEval {
            tape,
            input_node: x,
            logits_node: logits,
            dist,
            pad: input.pad.clone(),
        })
    }

    fn validate_input(&self, input: &EmbeddedInput) -> Result<(), ModelError> {
        let len = input.len();
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        if input.rows.ncols() != self.config.embed_dim {
            return Err(ModelError::WidthMismatch {
                got: input.rows.ncols(),
                expected: self.config.embed_dim,
            });
        }
        if input.rows.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        if input.pad[len - 1] {
            return Err(ModelError::PadAtFinalPosition);
        }
        Ok(())
    }

    fn check_answer(&self, answer: TokenId) -> Result<(), ModelError> {
        if (answer as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(ModelError::AnswerOutOfRange {
                answer,
                vocab: self.config.vocab_size,
            })
        }
    }

    /// Token + positional embedding for a token sequence starting at
    /// position `offset`; PAD tokens keep a zero row and a PAD mask entry.
    pub fn embed_tokens(&self, tokens: &[TokenId], offset: usize) -> Result<EmbeddedInput, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if offset + tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: offset + tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let d = self.config.embed_dim;
        let mut rows = Array2::zeros((tokens.len(), d));
        let mut pad = vec![false; tokens.len()];
        for (i, &t) in tokens.iter().enumerate() {
            self.check_answer(t)?;
            if t == crate::vocab::Vocabulary::PAD {
                pad[i] = true; // row stays zero
                continue;
            }
            let mut row = rows.row_mut(i);
            row.assign(&self.token_embed.row(t as usize));
            row += &self.pos_embed.row(offset + i);
        }
        EmbeddedInput::new(rows, pad)
    }

    pub(crate) fn insert_leaves(&self, tape: &mut Tape, requires_grad: bool) -> ParamNodes {
        let mut layers = Vec::with_capacity(self.layers.len());
        let token_embed = tape.leaf(self.token_embed.clone(), requires_grad);
        let pos_embed = tape.leaf(self.pos_embed.clone(), requires_grad);
        for l in &self.layers {
            layers.push(LayerNodes {
                ln1_gamma: tape.leaf(l.ln1_gamma.clone(), requires_grad),
                ln1_beta: tape.leaf(l.ln1_beta.clone(), requires_grad),
                wq: tape.leaf(l.wq.clone(), requires_grad),
                bq: tape.leaf(l.bq.clone(), requires_grad),
                wk: tape.leaf(l.wk.clone(), requires_grad),
                bk: tape.leaf(l.bk.clone(), requires_grad),
                wv: tape.leaf(l.wv.clone(), requires_grad),
                bv: tape.leaf(l.bv.clone(), requires_grad),
                wo: tape.leaf(l.wo.clone(), requires_grad),
                bo: tape.leaf(l.bo.clone(), requires_grad),
                ln2_gamma: tape.leaf(l.ln2_gamma.clone(), requires_grad),
                ln2_beta: tape.leaf(l.ln2_beta.clone(), requires_grad),
                w_up: tape.leaf(l.w_up.clone(), requires_grad),
                b_up: tape.leaf(l.b_up.clone(), requires_grad),
                w_down: tape.leaf(l.w_down.clone(), requires_grad),
                b_down: tape.leaf(l.b_down.clone(), requires_grad),
            });
        }
        ParamNodes {
            token_embed,
            pos_embed,
            layers,
            lnf_gamma: tape.leaf(self.lnf_gamma.clone(), requires_grad),
            lnf_beta: tape.leaf(self.lnf_beta.clone(), requires_grad),
            w_out: tape.leaf(self.w_out.clone(), requires_grad),
            b_out: tape.leaf(self.b_out.clone(), requires_grad),
        }
    }
}

pub(crate) struct LayerNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub w_down: NodeId,
    pub b_down: NodeId,
}

pub(crate) struct ParamNodes {
    pub token_embed: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub lnf_gamma: NodeId,
    pub lnf_beta: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl ParamNodes {
    /// Same fixed order as [`ModelParams::tensors`].
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embed, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma, l.ln1_beta, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gamma, l.ln2_beta, l.w_up, l.b_up, l.w_down, l.b_down,
            ]);
        }
        out.extend([self.lnf_gamma, self.lnf_beta, self.w_out, self.b_out]);
        out
    }
}

/// Transformer body: pre-LN blocks plus the final layer norm. Returns the
/// normalized hidden states (L×d). PAD positions are excluded as attention
/// keys; a position whose causal window is entirely PAD gets a zero
/// attention output.
pub(crate) fn transformer_hidden(
    tape: &mut Tape,
    config: &ModelConfig,
    nodes: &ParamNodes,
    x: NodeId,
    pad: &[bool],
) -> NodeId {
    let len = pad.len();
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            allowed[i * len + j] = !pad[j];
        }
    }

    let mut h = x;
    for layer in &nodes.layers {
        let normed = tape.layer_norm(h, layer.ln1_gamma, layer.ln1_beta, LN_EPS);
        let q = tape.matmul(normed, layer.wq);
        let q = tape.add_row(q, layer.bq);
        let k = tape.matmul(normed, layer.wk);
        let k = tape.add_row(k, layer.bk);
        let v = tape.matmul(normed, layer.wv);
        let v = tape.add_row(v, layer.bv);

        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, allowed.clone());
            heads.push(tape.matmul(weights, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn = tape.matmul(ctx, layer.wo);
        let attn = tape.add_row(attn, layer.bo);
        h = tape.add(h, attn);

        let normed2 = tape.layer_norm(h, layer.ln2_gamma, layer.ln2_beta, LN_EPS);
        let up = tape.matmul(normed2, layer.w_up);
        let up = tape.add_row(up, layer.b_up);
        let act = tape.gelu(up);
        let down = tape.matmul(act, layer.w_down);
        let down = tape.add_row(down, layer.b_down);
        h = tape.add(h, down);
    }
    tape.layer_norm(h, nodes.lnf_gamma, nodes.lnf_beta, LN_EPS)
}

/// A matrix of per-token embedding rows plus a PAD mask. PAD positions are
/// excluded from attention as keys and get zero gradient rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInput {
    pub rows: Array2<f64>,
    pub pad: Vec<bool>,
}

impl EmbeddedInput {
    pub fn new(rows: Array2<f64>, pad: Vec<bool>) -> Result<Self, ModelError> {
        if pad.len() != rows.nrows() {
            return Err(ModelError::InvalidConfig(format!(
                "pad mask length {} does not match {} positions",
                pad.len(),
                rows.nrows()
            )));
        }
        Ok(Self { rows, pad })
    }

    /// Input with every position live (no PAD masking).
    pub fn dense(rows: Array2<f64>) -> Self {
        let pad = vec![false; rows.nrows()];
        Self { rows, pad }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Softmax distribution over the token following the final input position.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let exps: Vec<f64> = logits
            .iter()
            .map(|&v| {
                let e = (v - max).exp();
                sum += e;
                e
            })
            .collect();
        let log_z = sum.ln() + max;
        let log_probs: Vec<f64> = logits.iter().map(|&v| v - log_z).collect();
        let probs = exps.iter().map(|&e| e / sum).collect();
        Self { probs, log_probs }
    }

    /// Builds a distribution from explicit probabilities (test tables and
    /// hand-constructed cases). Zero entries get `-inf` log-probability.
    pub fn from_probs(probs: &[f64]) -> Self {
        let log_probs = probs.iter().map(|&p| p.ln()).collect();
        Self {
            probs: probs.to_vec(),
            log_probs,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, a: TokenId) -> f64 {
        self.probs[a as usize]
    }

    /// Token ids ordered by descending probability; exact probability ties
    /// break by ascending token id for determinism.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .partial_cmp(&self.probs[a as usize])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        ids.truncate(k);
        ids
    }
}

/// One recorded forward pass: the distribution plus a reusable tape for
/// per-answer input gradients.
pub struct InputEval {
    tape: Tape,
    input_node: NodeId,
    logits_node: NodeId,
    dist: NextTokenDistribution,
    pad: Vec<bool>,
}

impl InputEval {
    pub fn dist(&self) -> &NextTokenDistribution {
        &self.dist
    }

    /// One backward sweep for `∂ log p(answer) / ∂ input`, seeded with
    /// `e_answer − p` at the logits.
    pub fn grad_log_prob(&mut self, answer: TokenId) -> Result<Array2<f64>, ModelError> {
        let vocab = self.dist.len();
        if answer as usize >= vocab {
            return Err(ModelError::AnswerOutOfRange { answer, vocab });
        }
        let mut seed = Array2::zeros((1, vocab));
        for (j, &p) in self.dist.probs().iter().enumerate() {
            seed[[0, j]] = -p;
        }
        seed[[0, answer as usize]] += 1.0;
        let grads = self.tape.backward(self.logits_node, seed);
        let mut g = grads
            .wrt(self.input_node)
            .expect("input leaf is tracked")
            .clone();
        for (i, &is_pad) in self.pad.iter().enumerate() {
            if is_pad {
                g.row_mut(i).fill(0.0);
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests;
