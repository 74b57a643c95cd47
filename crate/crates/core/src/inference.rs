//! Decoding, sampling, answer aggregation, and retrieval-augmented token
//! prediction.
//!
//! Generation runs on the incremental decode path (KV caches); the
//! datastore holds (hidden state, next token) pairs from batched forward
//! passes and blends an exact nearest-neighbor distribution into the LM's.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_step, forward_tokens, DecodeState, ForwardOpts, ModelParams};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Argmax with lowest-id tie-break.
    Greedy,
    /// Softmax sampling at temperature t > 0.
    Temperature(f64),
    /// Sampling restricted to the k highest-scoring tokens, temperature t.
    TopK(usize, f64),
}

#[derive(Debug, Clone)]
pub struct DecodeParams {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    /// Tokens that end generation; the stop token is kept in the output.
    pub stop: Vec<usize>,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { strategy: Strategy::Greedy, max_new_tokens: 32, stop: vec![], seed: 0 }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Greedy => {}
            Strategy::Temperature(t) => {
                if !(t > 0.0) || !t.is_finite() {
                    return Err(Error::Config(format!("temperature {t} must be positive")));
                }
            }
            Strategy::TopK(k, t) => {
                if k == 0 {
                    return Err(Error::Config("top-k needs k >= 1".into()));
                }
                if !(t > 0.0) || !t.is_finite() {
                    return Err(Error::Config(format!("temperature {t} must be positive")));
                }
            }
        }
        Ok(())
    }
}

fn argmax_lowest_id(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(scores: &mut [f64]) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Pick the next token from raw scores under the given strategy.
pub fn select_token(logits: &[f64], strategy: &Strategy, rng: &mut ChaCha8Rng) -> usize {
    match strategy {
        Strategy::Greedy => argmax_lowest_id(logits),
        Strategy::Temperature(t) => {
            let mut p: Vec<f64> = logits.iter().map(|&z| z / t).collect();
            softmax_in_place(&mut p);
            sample_index(&p, rng)
        }
        Strategy::TopK(k, t) => {
            let k = (*k).min(logits.len());
            let mut ids: Vec<usize> = (0..logits.len()).collect();
            // Highest score first; equal scores keep the lower id first.
            ids.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
            });
            ids.truncate(k);
            let mut p: Vec<f64> = ids.iter().map(|&i| logits[i] / t).collect();
            softmax_in_place(&mut p);
            ids[sample_index(&p, rng)]
        }
    }
}

/// Autoregressive decode from a prompt. Seeded sampling is reproducible;
/// a stop token ends generation and is included in the output.
pub fn generate(params: &ModelParams, x: &[usize], dp: &DecodeParams) -> Result<Vec<usize>> {
    dp.validate()?;
    if x.is_empty() {
        return Err(Error::Contract { op: "generate", detail: "empty prompt".into() });
    }
    let mut state = DecodeState::new(&params.config);
    let mut logits = Vec::new();
    for &t in x {
        logits = decode_step(params, &mut state, t)?.logits;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dp.seed);
    let mut y = Vec::with_capacity(dp.max_new_tokens);
    for _ in 0..dp.max_new_tokens {
        let next = select_token(&logits, &dp.strategy, &mut rng);
        y.push(next);
        if dp.stop.contains(&next) || y.len() == dp.max_new_tokens {
            break;
        }
        logits = decode_step(params, &mut state, next)?.logits;
    }
    Ok(y)
}

/// Modal answer; ties keep the earliest-occurring one.
pub fn self_consistency<T: PartialEq + Clone>(answers: &[T]) -> Result<T> {
    if answers.is_empty() {
        return Err(Error::Contract { op: "self_consistency", detail: "no answers".into() });
    }
    let mut best = 0usize;
    let mut best_count = 0usize;
    for (i, a) in answers.iter().enumerate() {
        if answers[..i].contains(a) {
            continue; // counted at its first occurrence
        }
        let count = answers.iter().filter(|b| *b == a).count();
        if count > best_count {
            best = i;
            best_count = count;
        }
    }
    Ok(answers[best].clone())
}

/// Retrieval memory: one (hidden state, next token) pair per predictable
/// corpus position. Immutable after build.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    pub d: usize,
    /// Keys flattened row-major, |payloads| rows of length d.
    pub keys: Vec<f64>,
    pub payloads: Vec<usize>,
}

impl Datastore {
    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d..(i + 1) * self.d]
    }
}

/// Collect (z, w) pairs: the top-layer state at every position that has a
/// successor, keyed to that successor token.
pub fn build_datastore(params: &ModelParams, corpus: &[Vec<usize>]) -> Result<Datastore> {
    if corpus.is_empty() {
        return Err(Error::Contract { op: "build_datastore", detail: "empty corpus".into() });
    }
    let d = params.config.d;
    let mut ds = Datastore { d, keys: Vec::new(), payloads: Vec::new() };
    for doc in corpus {
        if doc.is_empty() {
            return Err(Error::Contract { op: "build_datastore", detail: "empty document".into() });
        }
        if doc.len() < 2 {
            continue; // nothing predictable
        }
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let out = forward_tokens(&mut tape, params, &pv, doc, &ForwardOpts::default())?;
        let hidden = tape.value(out.hidden).data();
        ds.keys.extend_from_slice(&hidden[..(doc.len() - 1) * d]);
        ds.payloads.extend(doc[1..].iter().copied());
    }
    Ok(ds)
}

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Blend an exact k-nearest-neighbor distribution into the LM's:
/// λ·Pr_knn + (1−λ)·Pr_lm. The retrieval scores put −distance at each
/// retrieved payload (minimum distance when neighbors share a payload) and
/// 0 elsewhere, softmaxed over the full vocabulary.
pub fn knn_lm_step(
    h: &[f64],
    ds: &Datastore,
    k: usize,
    lambda: f64,
    lm_dist: &[f64],
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(lm_dist.to_vec());
    }
    if ds.is_empty() {
        return Err(Error::Contract {
            op: "knn_lm_step",
            detail: "retrieval weight > 0 with an empty datastore".into(),
        });
    }
    if k == 0 || k > ds.len() {
        return Err(Error::Contract {
            op: "knn_lm_step",
            detail: format!("k = {k} outside [1, {}]", ds.len()),
        });
    }
    if h.len() != ds.d {
        return Err(Error::Shape {
            op: "knn_lm_step",
            detail: format!("query dim {} vs datastore dim {}", h.len(), ds.d),
        });
    }
    let v = lm_dist.len();

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let dist: Vec<f64> = order.iter().map(|&i| squared_euclidean(h, ds.key(i))).collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    order.truncate(k);

    let mut scores = vec![0.0; v];
    let mut seen = vec![false; v];
    for &i in &order {
        let w = ds.payloads[i];
        if w >= v {
            return Err(Error::TokenRange { id: w, vocab: v });
        }
        if !seen[w] || -dist[i] > scores[w] {
            scores[w] = -dist[i];
            seen[w] = true;
        }
    }
    softmax_in_place(&mut scores);

    Ok(lm_dist
        .iter()
        .zip(&scores)
        .map(|(&lm, &knn)| lambda * knn + (1.0 - lambda) * lm)
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatastoreManifest {
    format: String,
    dtype: String,
    d: usize,
    payloads: Vec<usize>,
}

const DS_FORMAT: &str = "lmlab-datastore-v1";
const DS_DTYPE: &str = "f64le";

fn ds_manifest_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest.json");
    p.into()
}

fn ds_blob_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".blob");
    p.into()
}

/// Persist as `<prefix>.manifest.json` plus a little-endian f64 key blob.
pub fn save_datastore(ds: &Datastore, prefix: impl AsRef<Path>) -> Result<()> {
    let prefix = prefix.as_ref();
    let manifest = DatastoreManifest {
        format: DS_FORMAT.into(),
        dtype: DS_DTYPE.into(),
        d: ds.d,
        payloads: ds.payloads.clone(),
    };
    fs::write(ds_manifest_path(prefix), serde_json::to_vec_pretty(&manifest)?)?;
    let mut blob = Vec::with_capacity(ds.keys.len() * 8);
    for x in &ds.keys {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(ds_blob_path(prefix), blob)?;
    Ok(())
}

/// Bit-exact inverse of [`save_datastore`].
pub fn load_datastore(prefix: impl AsRef<Path>) -> Result<Datastore> {
    let prefix = prefix.as_ref();
    let manifest: DatastoreManifest =
        serde_json::from_slice(&fs::read(ds_manifest_path(prefix))?)?;
    if manifest.format != DS_FORMAT || manifest.dtype != DS_DTYPE {
        return Err(Error::Checkpoint(format!(
            "unsupported datastore format {}/{}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(ds_blob_path(prefix))?;
    if blob.len() != manifest.payloads.len() * manifest.d * 8 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest implies {}",
            blob.len(),
            manifest.payloads.len() * manifest.d * 8
        )));
    }
    let keys: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Datastore { d: manifest.d, keys, payloads: manifest.payloads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig::tiny(16), seed).unwrap()
    }

    #[test]
    fn select_token_greedy_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_token(&[0.1, 0.9, 0.9], &Strategy::Greedy, &mut rng), 1);
        assert_eq!(select_token(&[2.0, 0.9, 0.9], &Strategy::Greedy, &mut rng), 0);
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let params = tiny(3);
        let dp = DecodeParams { max_new_tokens: 12, ..DecodeParams::default() };
        let a = generate(&params, &[0, 9], &dp).unwrap();
        let b = generate(&params, &[0, 9], &dp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);

        // Stopping on the first emitted token cuts generation to length 1.
        let dp_stop = DecodeParams { stop: vec![a[0]], ..dp.clone() };
        let c = generate(&params, &[0, 9], &dp_stop).unwrap();
        assert_eq!(c, vec![a[0]]);

        assert!(generate(&params, &[], &dp).is_err());
        let zero = DecodeParams { max_new_tokens: 0, ..DecodeParams::default() };
        assert!(generate(&params, &[0], &zero).is_err());
    }

    #[test]
    fn invalid_strategies_are_rejected() {
        let bad = [
            Strategy::Temperature(0.0),
            Strategy::Temperature(-1.0),
            Strategy::TopK(0, 1.0),
            Strategy::TopK(3, 0.0),
        ];
        for s in bad {
            let dp = DecodeParams { strategy: s, ..DecodeParams::default() };
            assert!(dp.validate().is_err());
        }
    }

    #[test]
    fn vanishing_temperature_matches_greedy() {
        let params = tiny(5);
        let greedy = generate(&params, &[0, 9], &DecodeParams::default()).unwrap();
        for strategy in
            [Strategy::Temperature(1e-9), Strategy::TopK(1, 1.0), Strategy::TopK(16, 1e-9)]
        {
            let dp = DecodeParams { strategy, seed: 7, ..DecodeParams::default() };
            assert_eq!(generate(&params, &[0, 9], &dp).unwrap(), greedy);
        }
    }

    #[test]
    fn seeded_sampling_reproduces() {
        let params = tiny(7);
        let dp = DecodeParams {
            strategy: Strategy::Temperature(0.8),
            max_new_tokens: 24,
            seed: 42,
            ..DecodeParams::default()
        };
        let a = generate(&params, &[0, 9], &dp).unwrap();
        let b = generate(&params, &[0, 9], &dp).unwrap();
        assert_eq!(a, b);
        let other = DecodeParams { seed: 43, ..dp };
        assert_ne!(generate(&params, &[0, 9], &other).unwrap(), a);
    }

    #[test]
    fn self_consistency_majority_and_ties() {
        let vote = self_consistency(&[37.5, 37.5, 33.3]).unwrap();
        assert_eq!(vote, 37.5);
        assert_eq!(self_consistency(&[9.0]).unwrap(), 9.0);
        // Two answers tied at two votes each: the earlier one wins.
        assert_eq!(self_consistency(&[1, 2, 2, 1]).unwrap(), 1);
        assert!(self_consistency::<i32>(&[]).is_err());

        // Counting oracle on a pseudo-random stream.
        let answers: Vec<u8> = (0..101u64).map(|i| ((i * 2654435761) % 7) as u8).collect();
        let winner = self_consistency(&answers).unwrap();
        let mut best = (0usize, usize::MAX);
        for a in &answers {
            let c = answers.iter().filter(|b| *b == a).count();
            let first = answers.iter().position(|b| b == a).unwrap();
            if c > best.0 || (c == best.0 && first < best.1) {
                best = (c, first);
            }
        }
        assert_eq!(winner, answers[best.1]);
    }

    #[test]
    fn datastore_counts_keys_and_rebuild() {
        let params = tiny(11);
        let doc: Vec<usize> = vec![0, 9, 10, 11, 12, 13];
        let ds = build_datastore(&params, &[doc.clone()]).unwrap();
        assert_eq!(ds.len(), doc.len() - 1);
        assert_eq!(ds.d, params.config.d);
        assert_eq!(ds.payloads, doc[1..].to_vec());

        // Keys are exactly the batched forward's hidden rows.
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let out = forward_tokens(&mut tape, &params, &pv, &doc, &ForwardOpts::default()).unwrap();
        let hidden = tape.value(out.hidden).data();
        assert_eq!(ds.keys, hidden[..(doc.len() - 1) * ds.d].to_vec());

        let again = build_datastore(&params, &[doc.clone()]).unwrap();
        assert!(ds.keys.iter().zip(&again.keys).all(|(a, b)| a.to_bits() == b.to_bits()));

        assert!(build_datastore(&params, &[]).is_err());
        assert!(build_datastore(&params, &[vec![]]).is_err());
        // Single-token documents contribute no predictable positions.
        let sparse = build_datastore(&params, &[vec![0], doc]).unwrap();
        assert_eq!(sparse.len(), ds.len());
    }

    #[test]
    fn datastore_round_trips_bit_exactly() {
        let params = tiny(13);
        let ds = build_datastore(&params, &[vec![0, 9, 10, 11]]).unwrap();
        let dir = std::env::temp_dir().join(format!("lmlab-ds-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("store");
        save_datastore(&ds, &prefix).unwrap();
        let back = load_datastore(&prefix).unwrap();
        assert_eq!(ds.payloads, back.payloads);
        assert_eq!(ds.d, back.d);
        assert!(ds.keys.iter().zip(&back.keys).all(|(a, b)| a.to_bits() == b.to_bits()));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn knn_single_entry_hand_softmax() {
        let ds = Datastore { d: 2, keys: vec![0.0, 0.0], payloads: vec![2] };
        let h = [3.0, 4.0]; // squared distance 25
        let lm = [0.2, 0.5, 0.3];
        let out = knn_lm_step(&h, &ds, 1, 1.0, &lm).unwrap();
        let z = 2.0 + (-25.0f64).exp();
        let expected = [1.0 / z, 1.0 / z, (-25.0f64).exp() / z];
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_duplicate_payloads_take_min_distance() {
        // Two neighbors share payload 1 at distances 1 and 4.
        let ds = Datastore { d: 1, keys: vec![1.0, 2.0], payloads: vec![1, 1] };
        let h = [0.0];
        let lm = [0.25, 0.25, 0.5];
        let out = knn_lm_step(&h, &ds, 2, 1.0, &lm).unwrap();
        let z = 2.0 + (-1.0f64).exp();
        let expected = [1.0 / z, (-1.0f64).exp() / z, 1.0 / z];
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_lambda_zero_is_the_lm_exactly() {
        let ds = Datastore { d: 1, keys: vec![0.5], payloads: vec![0] };
        let lm = [0.1, 0.9];
        assert_eq!(knn_lm_step(&[0.0], &ds, 1, 0.0, &lm).unwrap(), lm.to_vec());
        // Even with nothing to retrieve from.
        let empty = Datastore { d: 1, keys: vec![], payloads: vec![] };
        assert_eq!(knn_lm_step(&[0.0], &empty, 1, 0.0, &lm).unwrap(), lm.to_vec());
        assert!(knn_lm_step(&[0.0], &empty, 1, 0.5, &lm).is_err());
    }

    #[test]
    fn knn_mixture_is_a_distribution_and_continuous() {
        let params = tiny(17);
        let ds = build_datastore(&params, &[vec![0, 9, 10, 11, 12, 13, 14]]).unwrap();
        let h = ds.key(2).to_vec();
        let v = params.config.vocab_size;
        let mut lm = vec![1.0; v];
        softmax_in_place(&mut lm);

        let delta = 1e-3;
        for lam in [0.0, 0.25, 0.5, 0.9, 1.0 - delta] {
            let out = knn_lm_step(&h, &ds, 3, lam, &lm).unwrap();
            let total: f64 = out.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(out.iter().all(|&p| p >= 0.0));
            let nudged = knn_lm_step(&h, &ds, 3, lam + delta, &lm).unwrap();
            let max_diff =
                out.iter().zip(&nudged).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max_diff <= delta + 1e-15, "must move at most δ per δ of λ");
        }

        assert!(knn_lm_step(&h, &ds, 0, 0.5, &lm).is_err());
        assert!(knn_lm_step(&h, &ds, ds.len() + 1, 0.5, &lm).is_err());
        assert!(knn_lm_step(&h, &ds, 1, 1.5, &lm).is_err());
        assert!(knn_lm_step(&[0.0], &ds, 1, 0.5, &lm).is_err(), "query dim mismatch");
    }
}
