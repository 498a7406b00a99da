use super::*;
use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 8,
    }
}

fn zero_params(config: ModelConfig) -> ModelParams {
    let mut params = ModelParams::init(config, 0).unwrap();
    for t in params.tensors_mut() {
        t.fill(0.0);
    }
    params
}

fn random_input(config: &ModelConfig, len: usize, seed: u64) -> EmbeddedInput {
    let mut rng = StdRng::seed_from_u64(seed);
    EmbeddedInput::dense(Array2::from_shape_fn((len, config.embed_dim), |_| {
        rng.random_range(-0.5..0.5)
    }))
}

/// Log-probability recomputed from raw logits with Neumaier-compensated
/// summation inside the log-sum-exp; the extended-precision oracle for
/// `log_prob`.
fn compensated_log_prob(logits: &[f64], answer: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in logits {
        let e = (v - max).exp();
        let t = sum + e;
        if sum.abs() >= e.abs() {
            comp += (sum - t) + e;
        } else {
            comp += (e - t) + sum;
        }
        sum = t;
    }
    logits[answer] - (max + (sum + comp).ln())
}

#[test]
fn zero_weights_give_uniform_distribution() {
    let params = zero_params(small_config(64));
    let input = random_input(&params.config, 4, 7);
    let dist = params.forward(&input).unwrap();
    for &p in dist.probs() {
        assert!((p - 1.0 / 64.0).abs() < 1e-15);
    }
    assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn sequence_length_boundary() {
    let params = ModelParams::init(small_config(16), 1).unwrap();
    let max = params.config.max_seq_len;
    let ok = random_input(&params.config, max, 2);
    assert!(params.forward(&ok).is_ok());
    let too_long = random_input(&params.config, max + 1, 2);
    assert_eq!(
        params.forward(&too_long).unwrap_err(),
        ModelError::SequenceTooLong { len: max + 1, max }
    );
}

#[test]
fn forward_is_bitwise_deterministic() {
    let config = ModelConfig {
        vocab_size: 128,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 64,
    };
    let input = random_input(&config, 6, 9);
    let run = || {
        let params = ModelParams::init(config, 42).unwrap();
        params.forward(&input).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.probs().iter().zip(b.probs()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in a.log_probs().iter().zip(b.log_probs()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn log_prob_uniform_case() {
    let params = zero_params(small_config(64));
    let input = random_input(&params.config, 3, 4);
    for answer in [0u32, 17, 63] {
        let lp = params.log_prob(&input, answer).unwrap();
        assert!((lp + 64f64.ln()).abs() < 1e-12, "got {lp}");
    }
}

#[test]
fn log_prob_saturated_answer_is_zero() {
    let mut params = zero_params(small_config(64));
    params.b_out[[0, 5]] = 60.0;
    let input = random_input(&params.config, 3, 4);
    let lp = params.log_prob(&input, 5).unwrap();
    assert!(lp.abs() < 1e-12, "got {lp}");
}

#[test]
fn log_prob_matches_compensated_recomputation() {
    let params = ModelParams::init(small_config(48), 11).unwrap();
    let input = random_input(&params.config, 5, 12);
    let logits = params.final_logits(&input).unwrap();
    for answer in 0..48u32 {
        let lp = params.log_prob(&input, answer).unwrap();
        let oracle = compensated_log_prob(&logits, answer as usize);
        assert!((lp - oracle).abs() < 1e-8, "answer {answer}: {lp} vs {oracle}");
    }
}

#[test]
fn softmax_normalization_holds_across_random_models() {
    for seed in 0..20 {
        let params = ModelParams::init(small_config(40), seed).unwrap();
        let input = random_input(&params.config, 6, seed + 100);
        let dist = params.forward(&input).unwrap();
        assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (p, lp) in dist.probs().iter().zip(dist.log_probs()) {
            assert!((p - lp.exp()).abs() < 1e-9);
        }
    }
}

#[test]
fn constant_output_model_has_zero_input_gradient() {
    let mut params = zero_params(small_config(32));
    for j in 0..32 {
        params.b_out[[0, j]] = (j as f64) * 0.1 - 1.0;
    }
    let input = random_input(&params.config, 4, 3);
    let grad = params.grad_logprob_wrt_inputs(&input, 7).unwrap();
    assert!(grad.iter().all(|&g| g == 0.0));
}

/// Max relative error between gradient vectors. Entries far below the
/// gradient's own scale are compared against that scale instead, so the
/// check does not blow up on near-zero components where the finite
/// difference itself is all rounding error.
fn max_rel_err(analytic: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &b)| (a - b).abs() / b.abs().max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

fn finite_difference_grad(
    params: &ModelParams,
    input: &EmbeddedInput,
    answer: TokenId,
    step: f64,
) -> Array2<f64> {
    let mut fd = Array2::zeros(input.rows.dim());
    for i in 0..input.rows.nrows() {
        for j in 0..input.rows.ncols() {
            let mut plus = input.clone();
            plus.rows[[i, j]] += step;
            let mut minus = input.clone();
            minus.rows[[i, j]] -= step;
            let lp_plus = params.log_prob(&plus, answer).unwrap();
            let lp_minus = params.log_prob(&minus, answer).unwrap();
            fd[[i, j]] = (lp_plus - lp_minus) / (2.0 * step);
        }
    }
    fd
}

#[test]
fn input_gradient_matches_central_finite_differences() {
    let config = ModelConfig {
        vocab_size: 24,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 8,
    };
    let params = ModelParams::init(config, 5).unwrap();
    let input = random_input(&config, 6, 6);
    for answer in [0u32, 11, 23] {
        let analytic = params.grad_logprob_wrt_inputs(&input, answer).unwrap();
        let fd = finite_difference_grad(&params, &input, answer, 1e-4);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "answer {answer}: max rel err {err}");
    }
}

#[test]
fn expected_score_is_zero_over_full_vocabulary() {
    let params = ModelParams::init(small_config(24), 8).unwrap();
    let input = random_input(&params.config, 5, 9);
    let mut eval = params.eval_input(&input).unwrap();
    let probs = eval.dist().probs().to_vec();
    let mut acc: Array2<f64> = Array2::zeros(input.rows.dim());
    for (a, &p) in probs.iter().enumerate() {
        let g = eval.grad_log_prob(a as TokenId).unwrap();
        acc.scaled_add(p, &g);
    }
    let max = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 1e-6, "max deviation {max}");
}

#[test]
fn pad_positions_are_masked_and_have_zero_gradient() {
    let params = ModelParams::init(small_config(24), 10).unwrap();
    let mut input = random_input(&params.config, 5, 11);
    input.pad[0] = true;
    input.pad[1] = true;
    input.rows.row_mut(0).fill(0.0);
    input.rows.row_mut(1).fill(0.0);

    let dist = params.forward(&input).unwrap();

    // changing the embedding rows at PAD positions must not change the output
    let mut corrupted = input.clone();
    corrupted.rows.row_mut(0).fill(123.0);
    corrupted.rows.row_mut(1).fill(-7.0);
    let dist_corrupted = params.forward(&corrupted).unwrap();
    for (a, b) in dist.probs().iter().zip(dist_corrupted.probs()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let grad = params.grad_logprob_wrt_inputs(&input, 3).unwrap();
    assert!(grad.row(0).iter().all(|&g| g == 0.0));
    assert!(grad.row(1).iter().all(|&g| g == 0.0));
    assert!(grad.row(4).iter().any(|&g| g != 0.0));
}

#[test]
fn input_validation_errors() {
    let params = ModelParams::init(small_config(16), 1).unwrap();
    let d = params.config.embed_dim;

    let empty = EmbeddedInput::dense(Array2::zeros((0, d)));
    assert_eq!(params.forward(&empty).unwrap_err(), ModelError::EmptyInput);

    let wrong_width = EmbeddedInput::dense(Array2::zeros((3, d + 1)));
    assert_eq!(
        params.forward(&wrong_width).unwrap_err(),
        ModelError::WidthMismatch { got: d + 1, expected: d }
    );

    let mut non_finite = random_input(&params.config, 3, 2);
    non_finite.rows[[1, 2]] = f64::NAN;
    assert_eq!(
        params.forward(&non_finite).unwrap_err(),
        ModelError::NonFiniteInput
    );

    let mut pad_final = random_input(&params.config, 3, 2);
    pad_final.pad[2] = true;
    assert_eq!(
        params.forward(&pad_final).unwrap_err(),
        ModelError::PadAtFinalPosition
    );

    let input = random_input(&params.config, 3, 2);
    assert_eq!(
        params.log_prob(&input, 16).unwrap_err(),
        ModelError::AnswerOutOfRange { answer: 16, vocab: 16 }
    );
}

#[test]
fn embed_tokens_adds_positional_rows_and_flags_pad() {
    let params = ModelParams::init(small_config(16), 3).unwrap();
    let tokens = [crate::vocab::Vocabulary::PAD, 5, 9];
    let input = params.embed_tokens(&tokens, 2).unwrap();
    assert_eq!(input.pad, vec![true, false, false]);
    assert!(input.rows.row(0).iter().all(|&v| v == 0.0));
    let expected: Vec<f64> = params
        .token_embed
        .row(5)
        .iter()
        .zip(params.pos_embed.row(3).iter())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(input.rows.row(1).to_vec(), expected);
}

#[test]
fn top_k_breaks_ties_by_ascending_id() {
    let dist = NextTokenDistribution::from_logits(&[0.0; 6]);
    assert_eq!(dist.top_k(3), vec![0, 1, 2]);
    let peaked = NextTokenDistribution::from_logits(&[0.0, 3.0, 0.0, 3.0, -1.0]);
    assert_eq!(peaked.top_k(2), vec![1, 3]);
}
