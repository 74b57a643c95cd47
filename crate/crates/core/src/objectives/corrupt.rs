//! Denoising corruptions: masked-token prediction, span-to-sentinel masking,
//! deletion/infilling/reordering/rotation, and next-sentence pairs. Every op
//! takes a caller-supplied RNG so corpora rebuild identically from a seed.
//! Special ids (below [`RESERVED`]) are never selected for corruption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{CLS, MASK, RESERVED, SENTINELS, SEP};
use super::{bidirectional_mask, TrainingExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BertMask,
    TokenDelete,
    SpanMask,
    SentinelMask,
    SentenceReorder,
    DocRotate,
}

/// Parameters shared by the corruption ops. `rate` is the per-token selection
/// (or deletion) probability; `mask_split` divides selected tokens into
/// mask / random-replacement / keep; span kinds draw geometric lengths with
/// mean `mean_span` capped at `max_span`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_split")]
    pub mask_split: [f64; 3],
    #[serde(default = "default_mean_span")]
    pub mean_span: f64,
    #[serde(default = "default_max_span")]
    pub max_span: usize,
}

fn default_rate() -> f64 {
    0.15
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_mean_span() -> f64 {
    3.0
}
fn default_max_span() -> usize {
    8
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind) -> Self {
        CorruptionSpec {
            kind,
            rate: default_rate(),
            mask_split: default_split(),
            mean_span: default_mean_span(),
            max_span: default_max_span(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config(detail));
        if !(0.0..=1.0).contains(&self.rate) {
            return bad(format!("corruption rate {} outside [0, 1]", self.rate));
        }
        let sum: f64 = self.mask_split.iter().sum();
        if self.mask_split.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("mask split {:?} must be nonnegative and sum to 1", self.mask_split));
        }
        if self.mean_span < 1.0 || self.max_span == 0 {
            return bad(format!(
                "span parameters mean {} / cap {} must be at least 1",
                self.mean_span, self.max_span
            ));
        }
        Ok(())
    }
}

fn eligible(id: usize) -> bool {
    id >= RESERVED
}

/// Bernoulli position selection with one retry: an empty first draw is
/// resampled once, and a still-empty result is reported as degenerate.
fn select_positions(tokens: &[usize], rate: f64, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    let mut sel = Vec::new();
    for _ in 0..2 {
        sel = (0..tokens.len())
            .filter(|&i| eligible(tokens[i]) && rng.gen::<f64>() < rate)
            .collect();
        if !sel.is_empty() {
            return (sel, false);
        }
    }
    (sel, true)
}

/// Masked-token denoising: select positions at `spec.rate`, then mask /
/// replace with a random ordinary token / keep them per `spec.mask_split`.
/// The example predicts the original token in place under a bidirectional
/// attention mask. The flag marks a degenerate (nothing-selected) example.
pub fn bert_corrupt(
    tokens: &[usize],
    vocab: usize,
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> Result<(TrainingExample, bool)> {
    spec.validate()?;
    if spec.kind != CorruptionKind::BertMask {
        return Err(Error::Contract {
            op: "bert_corrupt",
            detail: format!("spec kind is {:?}", spec.kind),
        });
    }
    if vocab <= RESERVED {
        return Err(Error::Config(format!(
            "vocabulary of {vocab} leaves no ordinary tokens for replacement"
        )));
    }
    let n = tokens.len();
    let (selected, degenerate) = select_positions(tokens, spec.rate, rng);
    let mut corrupted = tokens.to_vec();
    let mut targets = vec![0usize; n];
    let mut loss_mask = vec![0u8; n];
    for &i in &selected {
        targets[i] = tokens[i];
        loss_mask[i] = 1;
        let u: f64 = rng.gen();
        if u < spec.mask_split[0] {
            corrupted[i] = MASK;
        } else if u < spec.mask_split[0] + spec.mask_split[1] {
            corrupted[i] = rng.gen_range(RESERVED..vocab);
        }
    }
    let ex = TrainingExample {
        tokens: corrupted,
        targets,
        loss_mask,
        attn_mask_override: Some(bidirectional_mask(n)),
    };
    Ok((ex, degenerate))
}

/// Non-overlapping spans over eligible runs: a span starts at an eligible
/// position with probability rate/mean (so the expected covered fraction is
/// `rate`), with geometric length of mean `mean_span` capped at `max_span`.
/// `max_spans` stops further selection once a sentinel budget is spent.
fn sample_spans(
    tokens: &[usize],
    spec: &CorruptionSpec,
    max_spans: Option<usize>,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let p_start = spec.rate / spec.mean_span;
    let p_geom = 1.0 / spec.mean_span;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if max_spans.is_some_and(|m| spans.len() >= m) {
            break;
        }
        if !eligible(tokens[i]) || rng.gen::<f64>() >= p_start {
            i += 1;
            continue;
        }
        let u: f64 = rng.gen::<f64>().max(1e-12);
        let len = 1 + (u.ln() / (1.0 - p_geom).ln()).floor() as usize;
        let len = len.min(spec.max_span);
        let mut end = i;
        while end < tokens.len() && end - i < len && eligible(tokens[end]) {
            end += 1;
        }
        spans.push((i, end - i));
        i = end;
    }
    spans
}

/// Replace explicit spans with sentinel tokens. The source keeps one sentinel
/// per span; the target lists each sentinel with its original span and closes
/// with the next unused sentinel. k spans therefore need k+1 reserved
/// sentinels; zero spans yield an untouched source and an empty target.
pub fn sentinel_corrupt_spans(
    tokens: &[usize],
    spans: &[(usize, usize)],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let contract = |detail: String| Error::Contract { op: "sentinel_corrupt", detail };
    if tokens.iter().any(|t| SENTINELS.contains(t)) {
        return Err(contract("input already contains sentinel ids".into()));
    }
    if spans.len() + 1 > SENTINELS.len() {
        return Err(contract(format!(
            "{} spans need {} sentinels but only {} are reserved",
            spans.len(),
            spans.len() + 1,
            SENTINELS.len()
        )));
    }
    let mut prev_end = 0usize;
    for (idx, &(start, len)) in spans.iter().enumerate() {
        if (idx > 0 && start < prev_end) || start + len > tokens.len() {
            return Err(contract(format!("span {idx} ({start}, {len}) overlaps or overruns")));
        }
        prev_end = start + len;
    }
    if spans.is_empty() {
        return Ok((tokens.to_vec(), Vec::new()));
    }
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut cursor = 0usize;
    for (k, &(start, len)) in spans.iter().enumerate() {
        source.extend_from_slice(&tokens[cursor..start]);
        source.push(SENTINELS[k]);
        target.push(SENTINELS[k]);
        target.extend_from_slice(&tokens[start..start + len]);
        cursor = start + len;
    }
    source.extend_from_slice(&tokens[cursor..]);
    target.push(SENTINELS[spans.len()]);
    Ok((source, target))
}

/// Span corruption with randomly sampled spans. Span selection stops once
/// the reserved sentinels are spent, so long inputs stay valid.
pub fn sentinel_corrupt(
    tokens: &[usize],
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if spec.kind != CorruptionKind::SentinelMask {
        return Err(Error::Contract {
            op: "sentinel_corrupt",
            detail: format!("spec kind is {:?}", spec.kind),
        });
    }
    let spans = sample_spans(tokens, spec, Some(SENTINELS.len() - 1), rng);
    sentinel_corrupt_spans(tokens, &spans)
}

/// Invert a sentinel corruption: substitute each target span back into the
/// source at its sentinel. Errors on any malformed pair (out-of-order or
/// unmatched sentinels, trailing tokens after the closing sentinel).
pub fn sentinel_reconstruct(source: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    let contract = |detail: String| Error::Contract { op: "sentinel_reconstruct", detail };
    let is_sentinel = |id: usize| SENTINELS.contains(&id);
    if target.is_empty() {
        if source.iter().any(|&t| is_sentinel(t)) {
            return Err(contract("source has sentinels but target is empty".into()));
        }
        return Ok(source.to_vec());
    }
    // Parse the target into per-sentinel segments; the last sentinel closes
    // the sequence and owns no tokens.
    let mut segments: Vec<Vec<usize>> = Vec::new();
    for (i, &t) in target.iter().enumerate() {
        if is_sentinel(t) {
            if t != SENTINELS[segments.len()] {
                return Err(contract(format!("sentinel out of order at target index {i}")));
            }
            segments.push(Vec::new());
        } else {
            match segments.last_mut() {
                Some(seg) => seg.push(t),
                None => return Err(contract("target does not start with a sentinel".into())),
            }
        }
    }
    let closing = segments.pop().expect("target is non-empty so a sentinel was parsed");
    if !closing.is_empty() {
        return Err(contract("tokens after the closing sentinel".into()));
    }
    let mut out = Vec::new();
    let mut used = 0usize;
    for &t in source {
        if is_sentinel(t) {
            if used >= segments.len() || t != SENTINELS[used] {
                return Err(contract(format!("source sentinel {t} unmatched in target")));
            }
            out.extend_from_slice(&segments[used]);
            used += 1;
        } else {
            out.push(t);
        }
    }
    if used != segments.len() {
        return Err(contract(format!("target provides {} spans, source uses {used}", segments.len())));
    }
    Ok(out)
}

/// Remove the listed positions (must be sorted and in range).
pub fn delete_positions(tokens: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut p = positions.iter().peekable();
    for (i, &t) in tokens.iter().enumerate() {
        if p.peek() == Some(&&i) {
            p.next();
        } else {
            out.push(t);
        }
    }
    out
}

/// Rotate so the token at `idx` comes first.
pub fn rotate_at(tokens: &[usize], idx: usize) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.rotate_left(idx);
    out
}

/// Collapse each span to a single mask token.
pub fn infill_spans(tokens: &[usize], spans: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    for &(start, len) in spans {
        out.extend_from_slice(&tokens[cursor..start]);
        out.push(MASK);
        cursor = start + len;
    }
    out.extend_from_slice(&tokens[cursor..]);
    out
}

/// Sequence-level denoising input for [`bart_corrupt`]: reordering works on
/// sentences, the other kinds on a flat token list.
#[derive(Debug, Clone, Copy)]
pub enum BartInput<'a> {
    Tokens(&'a [usize]),
    Sentences(&'a [Vec<usize>]),
}

/// Sequence corruption whose training target is the original sequence:
/// token deletion, span infilling, sentence reordering, or document rotation.
pub fn bart_corrupt(
    input: BartInput,
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let contract = |detail: String| Error::Contract { op: "bart_corrupt", detail };
    match (spec.kind, input) {
        (CorruptionKind::TokenDelete, BartInput::Tokens(ts)) => {
            let doomed: Vec<usize> = (0..ts.len())
                .filter(|&i| eligible(ts[i]) && rng.gen::<f64>() < spec.rate)
                .collect();
            Ok(delete_positions(ts, &doomed))
        }
        (CorruptionKind::SpanMask, BartInput::Tokens(ts)) => {
            let spans = sample_spans(ts, spec, None, rng);
            Ok(infill_spans(ts, &spans))
        }
        (CorruptionKind::DocRotate, BartInput::Tokens(ts)) => {
            if ts.is_empty() {
                return Err(contract("cannot rotate an empty sequence".into()));
            }
            Ok(rotate_at(ts, rng.gen_range(0..ts.len())))
        }
        (CorruptionKind::SentenceReorder, BartInput::Sentences(ss)) => {
            let mut order: Vec<usize> = (0..ss.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            Ok(order.into_iter().flat_map(|i| ss[i].iter().copied()).collect())
        }
        (CorruptionKind::SentenceReorder, BartInput::Tokens(_)) => {
            Err(contract("sentence reordering needs sentence boundaries".into()))
        }
        (k @ (CorruptionKind::TokenDelete | CorruptionKind::SpanMask | CorruptionKind::DocRotate), BartInput::Sentences(_)) => {
            Err(contract(format!("{k:?} works on a flat token sequence")))
        }
        (k @ (CorruptionKind::BertMask | CorruptionKind::SentinelMask), _) => {
            Err(contract(format!("{k:?} has a dedicated constructor")))
        }
    }
}

/// Split after each boundary token (the boundary stays with its sentence); a
/// trailing unterminated sentence is kept.
pub fn split_sentences(tokens: &[usize], boundary: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in tokens {
        cur.push(t);
        if t == boundary {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True when `corrupted` can arise from `original` by deletions only.
pub fn delete_consistent(original: &[usize], corrupted: &[usize]) -> bool {
    let mut it = original.iter();
    corrupted.iter().all(|c| it.any(|o| o == c))
}

/// True when `corrupted` matches `original` with each mask token standing in
/// for any number of original tokens (dynamic programming over offsets).
pub fn infill_consistent(original: &[usize], corrupted: &[usize]) -> bool {
    let segments: Vec<&[usize]> = corrupted.split(|&t| t == MASK).collect();
    let n = original.len();
    let mut reachable = vec![false; n + 1];
    // The first segment is anchored at offset 0; each following segment may
    // start anywhere at or after a reachable offset (the mask eats the gap).
    if original.len() >= segments[0].len() && original[..segments[0].len()] == *segments[0] {
        reachable[segments[0].len()] = true;
    }
    for seg in &segments[1..] {
        let mut next = vec![false; n + 1];
        let earliest = match reachable.iter().position(|&b| b) {
            Some(e) => e,
            None => return false,
        };
        for start in earliest..=n.saturating_sub(seg.len()) {
            if original[start..start + seg.len()] == **seg {
                next[start + seg.len()] = true;
            }
        }
        reachable = next;
    }
    if segments.len() == 1 {
        // No masks at all: corruption must be the identity.
        return original == corrupted;
    }
    // A trailing mask may eat to the end; otherwise the last segment must
    // close the sequence exactly.
    if corrupted.last() == Some(&MASK) {
        reachable.iter().any(|&b| b)
    } else {
        reachable[n]
    }
}

/// True when `corrupted` is some rotation of `original`.
pub fn rotate_consistent(original: &[usize], corrupted: &[usize]) -> bool {
    original.len() == corrupted.len()
        && (0..original.len()).any(|i| rotate_at(original, i) == corrupted)
}

/// True when `corrupted` concatenates some permutation of the sentences.
pub fn reorder_consistent(sentences: &[Vec<usize>], corrupted: &[usize]) -> bool {
    fn search(sentences: &[Vec<usize>], used: &mut [bool], rest: &[usize]) -> bool {
        if rest.is_empty() {
            return used.iter().all(|&u| u);
        }
        for i in 0..sentences.len() {
            if !used[i] && rest.starts_with(&sentences[i]) {
                used[i] = true;
                if search(sentences, used, &rest[sentences[i].len()..]) {
                    return true;
                }
                used[i] = false;
            }
        }
        false
    }
    search(sentences, &mut vec![false; sentences.len()], corrupted)
}

/// Sentence-order pairs `[CLS] A [SEP] B [SEP]` with a 50/50 next/random
/// label mix. Negatives draw any sentence except the true successor.
pub fn nsp_pairs(
    sentences: &[Vec<usize>],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec<usize>, bool)>> {
    if sentences.len() < 2 {
        return Err(Error::Contract {
            op: "nsp_pairs",
            detail: format!("need at least 2 sentences, got {}", sentences.len()),
        });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..sentences.len() - 1);
        let is_next = rng.gen::<f64>() < 0.5;
        let b = if is_next {
            i + 1
        } else {
            loop {
                let j = rng.gen_range(0..sentences.len());
                if j != i + 1 {
                    break j;
                }
            }
        };
        let mut seq = vec![CLS];
        seq.extend_from_slice(&sentences[i]);
        seq.push(SEP);
        seq.extend_from_slice(&sentences[b]);
        seq.push(SEP);
        out.push((seq, is_next));
    }
    Ok(out)
}
