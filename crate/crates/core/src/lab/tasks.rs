//! Synthetic tasks: fixed corpora to memorize, copy/retrieval probes with
//! exact-match scoring, and a counting-based preference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::PreferencePair;
use crate::error::{Error, Result};
use crate::inference::{generate, DecodeParams};
use crate::model::ModelParams;
use crate::objectives::tokenizer::{RESERVED, SEP, START};
use crate::objectives::{causal_lm_example, sft_example, TrainingExample};

/// First id available for task symbols (above the reserved specials).
pub const SYMBOL_BASE: usize = RESERVED;

/// Random sequences to memorize. Each is "start OPENER body": the opener
/// cycles through the symbol range, so with vocab − reserved >= sequences
/// every sequence is addressable by its second token and the body is fully
/// determined. The only irreducible loss is then the opener's entropy.
pub fn memorize_corpus(
    sequences: usize,
    length: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if vocab <= SYMBOL_BASE || length < 2 {
        return Err(Error::Config(format!(
            "need vocab > {SYMBOL_BASE} and length >= 2, got {vocab}/{length}"
        )));
    }
    let usable = vocab - SYMBOL_BASE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..sequences)
        .map(|i| {
            let mut s = vec![START, SYMBOL_BASE + i % usable];
            s.extend((2..length).map(|_| rng.gen_range(SYMBOL_BASE..vocab)));
            s
        })
        .collect())
}

/// (prompt, target) pairs: prompt = start SEQ sep, target = SEQ.
pub fn copy_dataset(
    length: usize,
    vocab: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if length == 0 || vocab == 0 || count == 0 {
        return Err(Error::Config("copy needs positive length, vocab, and count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let seq: Vec<usize> =
                (0..length).map(|_| SYMBOL_BASE + rng.gen_range(0..vocab)).collect();
            let mut prompt = vec![START];
            prompt.extend_from_slice(&seq);
            prompt.push(SEP);
            (prompt, seq)
        })
        .collect())
}

/// Smallest model vocabulary that covers a copy dataset.
pub fn copy_vocab_size(vocab: usize) -> usize {
    SYMBOL_BASE + vocab
}

/// Supervised examples from (prompt, completion) pairs.
pub fn completion_examples(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<TrainingExample>> {
    pairs.iter().map(|(p, t)| sft_example(p, t)).collect()
}

/// Fraction of prompts whose completion matches the target exactly.
/// `complete(prompt, target_len)` produces the candidate.
pub fn exact_match_rate(
    pairs: &[(Vec<usize>, Vec<usize>)],
    mut complete: impl FnMut(&[usize], usize) -> Result<Vec<usize>>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract { op: "exact_match_rate", detail: "no prompts".into() });
    }
    let mut hits = 0usize;
    for (prompt, target) in pairs {
        if complete(prompt, target.len())? == *target {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Greedy-decode exact match over a (prompt, target) dataset.
pub fn eval_copy(params: &ModelParams, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    exact_match_rate(pairs, |prompt, n| {
        let dp = DecodeParams { max_new_tokens: n, ..DecodeParams::default() };
        generate(params, prompt, &dp)
    })
}

/// Passkey alphabet: ten "digit" symbols, a key marker, a query marker,
/// and a filler pool.
pub const DIGIT_BASE: usize = SYMBOL_BASE;
pub const KEY_MARK: usize = SYMBOL_BASE + 10;
pub const QUERY_MARK: usize = SYMBOL_BASE + 11;
pub const FILLER_BASE: usize = SYMBOL_BASE + 12;
pub const FILLER_COUNT: usize = 8;

/// Smallest model vocabulary that covers passkey sequences.
pub fn passkey_vocab_size() -> usize {
    FILLER_BASE + FILLER_COUNT
}

/// (prompt, answer) pairs: filler with an embedded "key marker, digit" at a
/// random position, closed by the query marker.
pub fn passkey_dataset(
    context_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, usize)>> {
    if context_len < 5 || count == 0 {
        return Err(Error::Config("passkey needs context_len >= 5 and count >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut prompt = vec![START];
            prompt.extend((0..context_len - 2).map(|_| {
                FILLER_BASE + rng.gen_range(0..FILLER_COUNT)
            }));
            prompt.push(QUERY_MARK);
            let digit = DIGIT_BASE + rng.gen_range(0..10);
            // Key marker and digit overwrite two adjacent filler slots.
            let at = rng.gen_range(1..context_len - 3);
            prompt[at] = KEY_MARK;
            prompt[at + 1] = digit;
            (prompt, digit)
        })
        .collect())
}

/// Supervised examples asking for the hidden digit.
pub fn passkey_examples(ds: &[(Vec<usize>, usize)]) -> Result<Vec<TrainingExample>> {
    ds.iter().map(|(p, k)| sft_example(p, &[*k])).collect()
}

/// One-token greedy retrieval accuracy.
pub fn eval_passkey(params: &ModelParams, ds: &[(Vec<usize>, usize)]) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Contract { op: "eval_passkey", detail: "no prompts".into() });
    }
    let dp = DecodeParams { max_new_tokens: 1, ..DecodeParams::default() };
    let mut hits = 0usize;
    for (prompt, k) in ds {
        if generate(params, prompt, &dp)?[0] == *k {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Synthetic preference score: occurrences of the designated target token
/// minus the number of immediate repetitions.
pub fn oracle_reward(y: &[usize], target: usize) -> f64 {
    let hits = y.iter().filter(|&&t| t == target).count() as f64;
    let reps = y.windows(2).filter(|w| w[0] == w[1]).count() as f64;
    hits - reps
}

/// Preference-task prompts: start token plus one context symbol.
pub fn pref_prompts(count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| vec![START, SYMBOL_BASE + rng.gen_range(0..4)]).collect()
}

/// Response alphabet for the preference task.
pub fn pref_vocab_size() -> usize {
    SYMBOL_BASE + 8
}

fn random_response(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| SYMBOL_BASE + rng.gen_range(0..8)).collect()
}

/// Oracle-labeled preference pairs over random responses. Ties are
/// resampled so every pair carries a strict preference.
pub fn pref_pairs(
    prompts: &[Vec<usize>],
    count: usize,
    response_len: usize,
    target: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if prompts.is_empty() || response_len == 0 {
        return Err(Error::Config("preference pairs need prompts and a response length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let x = prompts[rng.gen_range(0..prompts.len())].clone();
        let a = random_response(&mut rng, response_len);
        let b = random_response(&mut rng, response_len);
        let (sa, sb) = (oracle_reward(&a, target), oracle_reward(&b, target));
        if a == b || sa == sb {
            continue;
        }
        let (y_a, y_b) = if sa > sb { (a, b) } else { (b, a) };
        pairs.push(PreferencePair { x, y_a, y_b });
    }
    Ok(pairs)
}

/// Random-response supervised data for teaching the response format.
pub fn pref_sft_dataset(
    prompts: &[Vec<usize>],
    count: usize,
    response_len: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if prompts.is_empty() || response_len == 0 {
        return Err(Error::Config("preference data needs prompts and a response length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let x = prompts[rng.gen_range(0..prompts.len())].clone();
            let y = random_response(&mut rng, response_len);
            (x, y)
        })
        .collect())
}

/// Corpus sequences to training examples for a memorize-style run.
pub fn causal_examples(corpus: &[Vec<usize>]) -> Result<Vec<TrainingExample>> {
    corpus.iter().map(|s| causal_lm_example(s)).collect()
}
