//! Seeded Adam training on next-token cross-entropy.
//!
//! Every sentence is placed at a random (seeded) start offset inside the
//! positional table so that all positions up to `max_seq_len` receive
//! gradient signal, not just the first few. Determinism contract: the same
//! seed, corpus, and schedule produce bit-identical parameters.

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use super::{ModelParams, ParamNodes};
use crate::tape::{NodeId, Tape};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("corpus token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("corpus sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("corpus has no sequence with at least two tokens")]
    NoPredictableTokens,
    #[error("non-finite loss at optimization step {step}")]
    NumericFailure { step: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub heldout_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            heldout_fraction: 0.1,
        }
    }
}

impl TrainSchedule {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidSchedule(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidSchedule("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(TrainError::InvalidSchedule(
                "heldout_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub train_sentences: usize,
    pub heldout_sentences: usize,
    pub initial_heldout_ce: f64,
    pub final_heldout_ce: f64,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|(_, t)| t.dim()).collect();
        Self {
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array2<f64>>], s: &TrainSchedule) {
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = grad else { continue };
            for i in 0..tensor.nrows() {
                for j in 0..tensor.ncols() {
                    let gij = g[[i, j]];
                    m[[i, j]] = s.beta1 * m[[i, j]] + (1.0 - s.beta1) * gij;
                    v[[i, j]] = s.beta2 * v[[i, j]] + (1.0 - s.beta2) * gij * gij;
                    let mhat = m[[i, j]] / bc1;
                    let vhat = v[[i, j]] / bc2;
                    tensor[[i, j]] -= s.learning_rate * mhat / (vhat.sqrt() + s.adam_eps);
                }
            }
        }
    }
}

/// Builds the full-sequence loss graph for one sentence placed at `offset`:
/// position `i` predicts token `i+1`. Returns the 1×1 loss node.
fn sentence_loss(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    tokens: &[TokenId],
    offset: usize,
) -> NodeId {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.embed_rows(nodes.token_embed, &ids);
    let pos = tape.slice_rows(nodes.pos_embed, offset, tokens.len());
    let x = tape.add(tok, pos);
    let pad: Vec<bool> = tokens.iter().map(|&t| t == Vocabulary::PAD).collect();
    let hidden = super::transformer_hidden(tape, &params.config, nodes, x, &pad);
    let proj = tape.matmul(hidden, nodes.w_out);
    let logits = tape.add_row(proj, nodes.b_out);
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|i| {
            if i + 1 < tokens.len() {
                Some(tokens[i + 1] as usize)
            } else {
                None
            }
        })
        .collect();
    tape.cross_entropy_mean(logits, targets)
}

/// Average next-token cross-entropy (nats per predicted token) over
/// `sentences`, with every sentence placed at offset 0.
pub fn evaluate_cross_entropy(params: &ModelParams, sentences: &[Vec<TokenId>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for tokens in sentences {
        if tokens.len() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let nodes = params.insert_leaves(&mut tape, false);
        let loss = sentence_loss(&mut tape, &nodes, params, tokens, 0);
        let n = tokens.len() - 1;
        total += tape.value(loss)[[0, 0]] * n as f64;
        count += n;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

fn validate_corpus(params: &ModelParams, corpus: &[Vec<TokenId>]) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab = params.config.vocab_size;
    let max = params.config.max_seq_len;
    let mut trainable = false;
    for seq in corpus {
        if seq.len() > max {
            return Err(TrainError::SequenceTooLong { len: seq.len(), max });
        }
        if seq.len() >= 2 {
            trainable = true;
        }
        for &t in seq {
            if t as usize >= vocab {
                return Err(TrainError::TokenOutOfRange { token: t, vocab });
            }
        }
    }
    if !trainable {
        return Err(TrainError::NoPredictableTokens);
    }
    Ok(())
}

/// Trains `params` on `corpus` and returns the updated parameters together
/// with held-out cross-entropy before and after. Fully deterministic for a
/// fixed `(params, corpus, schedule)` triple.
pub fn train(
    mut params: ModelParams,
    corpus: &[Vec<TokenId>],
    schedule: &TrainSchedule,
) -> Result<(ModelParams, TrainReport), TrainError> {
    schedule.validate()?;
    validate_corpus(&params, corpus)?;

    let mut rng = StdRng::seed_from_u64(schedule.seed);
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    indices.shuffle(&mut rng);
    let heldout_n = if corpus.len() >= 5 {
        ((corpus.len() as f64 * schedule.heldout_fraction).round() as usize).max(1)
    } else {
        0
    };
    let (heldout_idx, train_idx) = indices.split_at(heldout_n);
    let heldout: Vec<Vec<TokenId>> = heldout_idx.iter().map(|&i| corpus[i].clone()).collect();
    let eval_set: Vec<Vec<TokenId>> = if heldout.is_empty() {
        corpus.to_vec()
    } else {
        heldout
    };
    let mut train_set: Vec<usize> = train_idx.to_vec();
    if train_set.is_empty() {
        train_set = (0..corpus.len()).collect();
    }

    let initial_heldout_ce = evaluate_cross_entropy(&params, &eval_set);

    let max_len = params.config.max_seq_len;
    let mut adam = Adam::new(&params);
    let mut step = 0usize;
    for _epoch in 0..schedule.epochs {
        train_set.shuffle(&mut rng);
        for batch in train_set.chunks(schedule.batch_size) {
            let sentences: Vec<(&Vec<TokenId>, usize)> = batch
                .iter()
                .filter(|&&i| corpus[i].len() >= 2)
                .map(|&i| {
                    let len = corpus[i].len();
                    let offset = rng.random_range(0..=max_len - len);
                    (&corpus[i], offset)
                })
                .collect();
            if sentences.is_empty() {
                continue;
            }
            step += 1;

            let mut tape = Tape::new();
            let nodes = params.insert_leaves(&mut tape, true);
            let total_predictions: usize = sentences.iter().map(|(s, _)| s.len() - 1).sum();
            let mut batch_loss: Option<NodeId> = None;
            for (tokens, offset) in &sentences {
                let loss = sentence_loss(&mut tape, &nodes, &params, tokens, *offset);
                let weight = (tokens.len() - 1) as f64 / total_predictions as f64;
                let weighted = tape.scale(loss, weight);
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, weighted),
                    None => weighted,
                });
            }
            let loss_node = batch_loss.expect("nonempty batch");
            let loss_value = tape.value(loss_node)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(TrainError::NumericFailure { step });
            }

            let grads = tape.backward(loss_node, Array2::from_elem((1, 1), 1.0));
            let ordered = nodes.ordered();
            let grad_list: Vec<Option<Array2<f64>>> = ordered
                .iter()
                .map(|&id| grads.wrt(id).cloned())
                .collect();
            adam.step(&mut params, &grad_list, schedule);
            // PAD embedding stays frozen at zero
            params
                .token_embed
                .row_mut(Vocabulary::PAD as usize)
                .fill(0.0);
        }
    }

    let final_heldout_ce = evaluate_cross_entropy(&params, &eval_set);
    let report = TrainReport {
        steps: step,
        train_sentences: train_set.len(),
        heldout_sentences: heldout_n,
        initial_heldout_ce,
        final_heldout_ce,
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
        }
    }

    /// 50 distinct "subject relation object" facts over a small vocabulary.
    fn fact_corpus(copies: usize) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
        // ids 3..=52 are subjects, 53..=102 answers, 103 the linking token
        let facts: Vec<Vec<TokenId>> = (0..50u32)
            .map(|i| vec![3 + i, 103, 53 + i])
            .collect();
        let mut corpus = Vec::new();
        for _ in 0..copies {
            corpus.extend(facts.iter().cloned());
        }
        (corpus, facts)
    }

    #[test]
    fn empty_corpus_is_a_precondition_error() {
        let params = ModelParams::init(tiny_config(8), 0).unwrap();
        let err = train(params, &[], &TrainSchedule::default()).unwrap_err();
        assert_eq!(err, TrainError::EmptyCorpus);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let params = ModelParams::init(tiny_config(8), 0).unwrap();
        let err = train(params, &[vec![3, 9]], &TrainSchedule::default()).unwrap_err();
        assert_eq!(err, TrainError::TokenOutOfRange { token: 9, vocab: 8 });
    }

    #[test]
    fn training_lowers_heldout_cross_entropy() {
        let (corpus, _) = fact_corpus(8);
        let params = ModelParams::init(tiny_config(104), 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 8,
            seed: 7,
            ..TrainSchedule::default()
        };
        let (_, report) = train(params, &corpus, &schedule).unwrap();
        assert!(
            report.final_heldout_ce < report.initial_heldout_ce,
            "ce went from {} to {}",
            report.initial_heldout_ce,
            report.final_heldout_ce
        );
    }

    #[test]
    fn memorizes_facts_to_low_answer_perplexity() {
        let (corpus, facts) = fact_corpus(8);
        let params = ModelParams::init(tiny_config(104), 2).unwrap();
        let schedule = TrainSchedule {
            epochs: 15,
            seed: 3,
            ..TrainSchedule::default()
        };
        let (trained, _) = train(params, &corpus, &schedule).unwrap();
        // geometric-mean perplexity of the answer token given its prefix
        let mut total_nll = 0.0;
        for fact in &facts {
            let prefix = &fact[..2];
            let input = trained.embed_tokens(prefix, 0).unwrap();
            total_nll -= trained.log_prob(&input, fact[2]).unwrap();
        }
        let ppl = (total_nll / facts.len() as f64).exp();
        assert!(ppl <= 1.5, "answer perplexity {ppl}");
    }

    #[test]
    fn same_seed_same_corpus_identical_parameters() {
        let (corpus, _) = fact_corpus(2);
        let schedule = TrainSchedule {
            epochs: 2,
            seed: 11,
            ..TrainSchedule::default()
        };
        let run = || {
            let params = ModelParams::init(tiny_config(104), 5).unwrap();
            train(params, &corpus, &schedule).unwrap().0
        };
        let (a, b) = (run(), run());
        for ((_, ta), (_, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn divergent_schedule_aborts_with_step_index() {
        let (corpus, _) = fact_corpus(2);
        let params = ModelParams::init(tiny_config(104), 5).unwrap();
        let schedule = TrainSchedule {
            epochs: 3,
            learning_rate: 1e200,
            seed: 1,
            ..TrainSchedule::default()
        };
        match train(params, &corpus, &schedule).unwrap_err() {
            TrainError::NumericFailure { step } => assert!(step >= 1),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn pad_embedding_row_stays_zero() {
        let (corpus, _) = fact_corpus(2);
        let params = ModelParams::init(tiny_config(104), 5).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            ..TrainSchedule::default()
        };
        let (trained, _) = train(params, &corpus, &schedule).unwrap();
        assert!(trained
            .token_embed
            .row(Vocabulary::PAD as usize)
            .iter()
            .all(|&v| v == 0.0));
    }
}
