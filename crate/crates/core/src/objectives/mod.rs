//! Training-example construction: every objective reduces to (tokens,
//! per-position targets, loss mask, optional attention-mask override), and a
//! single masked cross-entropy evaluates all of them. Constructors here only
//! arrange ids; corruption-based objectives live in [`corrupt`].

pub mod corrupt;
pub mod tokenizer;

pub use corrupt::{
    bart_corrupt, bert_corrupt, delete_consistent, infill_consistent, nsp_pairs,
    reorder_consistent, rotate_consistent, sentinel_corrupt, sentinel_corrupt_spans,
    sentinel_reconstruct, split_sentences, BartInput, CorruptionKind, CorruptionSpec,
};
pub use tokenizer::Tokenizer;

use crate::error::{Error, Result};
use crate::model::{forward_tokens, ForwardOpts, ModelParams, ParamVars};
use crate::tensor::{Tape, Tensor, Var, NEG_SENTINEL};

/// One supervised sequence. `targets[i]` is the token the model should emit
/// from position i; positions with `loss_mask[i] == 0` contribute nothing to
/// the loss or the gradient (their target value is ignored). All three arrays
/// share one length.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<u8>,
    /// Replaces the causal attention mask when present (m×m additive).
    pub attn_mask_override: Option<Tensor>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.targets.len() != n || self.loss_mask.len() != n {
            return Err(Error::Contract {
                op: "training_example",
                detail: format!(
                    "tokens/targets/loss_mask lengths differ: {n}/{}/{}",
                    self.targets.len(),
                    self.loss_mask.len()
                ),
            });
        }
        if let Some(m) = &self.attn_mask_override {
            if m.rows_cols() != (n, n) {
                return Err(Error::Contract {
                    op: "training_example",
                    detail: format!("attention override is {:?}, want {n}x{n}", m.rows_cols()),
                });
            }
        }
        Ok(())
    }

    /// Masked mean cross-entropy of this example under the model. The flag is
    /// true when the mask selects nothing (loss 0, a warning case upstream).
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        pv: &ParamVars,
    ) -> Result<(Var, bool)> {
        self.validate()?;
        let opts = ForwardOpts {
            attn_mask_override: self.attn_mask_override.as_ref(),
            ..ForwardOpts::default()
        };
        let out = forward_tokens(tape, params, pv, &self.tokens, &opts)?;
        tape.cross_entropy(out.logits, &self.targets, &self.loss_mask)
    }
}

/// Shift-by-one language modelling: position i predicts `tokens[i+1]`; the
/// final position has nothing to predict and is masked out.
pub fn causal_lm_example(tokens: &[usize]) -> Result<TrainingExample> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Contract {
            op: "causal_lm_example",
            detail: format!("need at least 2 tokens, got {n}"),
        });
    }
    let mut targets = vec![0usize; n];
    let mut loss_mask = vec![0u8; n];
    for i in 0..n - 1 {
        targets[i] = tokens[i + 1];
        loss_mask[i] = 1;
    }
    Ok(TrainingExample { tokens: tokens.to_vec(), targets, loss_mask, attn_mask_override: None })
}

/// Language modelling conditioned on a prefix: the loss covers exactly the
/// continuation tokens, so a total length n with prefix length p yields n−p
/// masked-in positions.
pub fn prefix_lm_example(prefix: &[usize], continuation: &[usize]) -> Result<TrainingExample> {
    if prefix.is_empty() || continuation.is_empty() {
        return Err(Error::Contract {
            op: "prefix_lm_example",
            detail: format!(
                "prefix ({}) and continuation ({}) must both be non-empty",
                prefix.len(),
                continuation.len()
            ),
        });
    }
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(continuation);
    let mut ex = causal_lm_example(&tokens)?;
    for i in 0..prefix.len() - 1 {
        ex.loss_mask[i] = 0;
        ex.targets[i] = 0;
    }
    Ok(ex)
}

/// Instruction tuning on one (prompt, response) pair: identical mechanics to
/// a prefix example, with the mask holding exactly `response.len()` ones so
/// the loss is the per-token −log P(response | prompt).
pub fn sft_example(prompt: &[usize], response: &[usize]) -> Result<TrainingExample> {
    prefix_lm_example(prompt, response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Request,
    Response,
}

/// A multi-round conversation: strictly alternating request/response turns,
/// starting with a request. The turn token lists tile the flat sequence.
#[derive(Debug, Clone)]
pub struct ConversationExample {
    pub turns: Vec<(Role, Vec<usize>)>,
}

/// One loss over a whole conversation, masked to response tokens only. A
/// single-round conversation reduces exactly to [`sft_example`]; causal
/// attention makes the joint loss equal the sum of per-round conditional
/// losses run as separate passes.
pub fn multi_round_example(conv: &ConversationExample) -> Result<TrainingExample> {
    let contract = |detail: String| Error::Contract { op: "multi_round_example", detail };
    if conv.turns.is_empty() {
        return Err(contract("conversation has no turns".into()));
    }
    let mut tokens = Vec::new();
    let mut response_spans: Vec<std::ops::Range<usize>> = Vec::new();
    for (i, (role, ts)) in conv.turns.iter().enumerate() {
        let want = if i % 2 == 0 { Role::Request } else { Role::Response };
        if *role != want {
            return Err(contract(format!("turn {i} is {role:?}, want alternating {want:?}")));
        }
        if ts.is_empty() {
            return Err(contract(format!("turn {i} ({role:?}) is empty")));
        }
        let start = tokens.len();
        tokens.extend_from_slice(ts);
        if *role == Role::Response {
            response_spans.push(start..tokens.len());
        }
    }
    if response_spans.is_empty() {
        return Err(contract("conversation contains no responses".into()));
    }
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut loss_mask = vec![0u8; n];
    for span in response_spans {
        // Position p−1 is where token p gets predicted; p ≥ 1 always holds
        // because the first turn is a non-empty request.
        for p in span {
            targets[p - 1] = tokens[p];
            loss_mask[p - 1] = 1;
        }
    }
    Ok(TrainingExample { tokens, targets, loss_mask, attn_mask_override: None })
}

/// All-zero additive mask: every position may attend everywhere. Denoising
/// objectives that predict in place use this instead of the causal mask.
pub fn bidirectional_mask(m: usize) -> Tensor {
    Tensor::zeros(&[m, m])
}

/// Attention mask realizing a factorization order over m positions: the
/// position processed at step s may attend to positions from steps ≤ s
/// (itself included). The identity order reproduces the causal mask.
pub fn permuted_mask(order: &[usize]) -> Result<Tensor> {
    let m = order.len();
    let step = order_steps(order, "permuted_mask")?;
    let mut data = vec![NEG_SENTINEL; m * m];
    for p in 0..m {
        for q in 0..m {
            if step[q] <= step[p] {
                data[p * m + q] = 0.0;
            }
        }
    }
    Tensor::new(vec![m, m], data)
}

/// Language modelling along an arbitrary factorization order: the position at
/// step s predicts the token at the step-(s+1) position, under
/// [`permuted_mask`]. The last-in-order position predicts nothing.
pub fn permuted_example(tokens: &[usize], order: &[usize]) -> Result<TrainingExample> {
    if tokens.len() != order.len() || tokens.len() < 2 {
        return Err(Error::Contract {
            op: "permuted_example",
            detail: format!(
                "need matching lengths of at least 2, got {} tokens / {} order entries",
                tokens.len(),
                order.len()
            ),
        });
    }
    let mask = permuted_mask(order)?;
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut loss_mask = vec![0u8; n];
    for s in 0..n - 1 {
        targets[order[s]] = tokens[order[s + 1]];
        loss_mask[order[s]] = 1;
    }
    Ok(TrainingExample {
        tokens: tokens.to_vec(),
        targets,
        loss_mask,
        attn_mask_override: Some(mask),
    })
}

/// step[p] = index of position p within `order`; errors unless `order` is a
/// permutation of 0..len.
fn order_steps(order: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let m = order.len();
    if m == 0 {
        return Err(Error::Contract { op, detail: "empty order".into() });
    }
    let mut step = vec![usize::MAX; m];
    for (s, &p) in order.iter().enumerate() {
        if p >= m || step[p] != usize::MAX {
            return Err(Error::Contract {
                op,
                detail: format!("order is not a permutation of 0..{m}"),
            });
        }
        step[p] = s;
    }
    Ok(step)
}
