//! Preference alignment: reward heads and ranking losses, TD values and
//! advantages, clipped policy optimization, direct preference optimization,
//! best-of-N selection, and the auxiliary distillation and soft-prompt modes.
//!
//! A reward (or value) head is the backbone transformer plus one d×1 linear
//! map attached under a well-known name; scoring forces a decode of [x, y]
//! and projects the last hidden row.

use crate::error::{Error, Result};
use crate::model::{
    forward_embeddings, forward_tokens, ForwardOpts, ForwardOut, ModelConfig, ModelParams,
    ParamVars, PosKind,
};
use crate::objectives::{sft_example, TrainingExample};
use crate::tensor::{Tape, Tensor, Var};

pub const REWARD_HEAD: &str = "reward.w";
pub const VALUE_HEAD: &str = "value.w";
/// Default clip half-width for the policy-ratio surrogate.
pub const PPO_EPS: f64 = 0.2;
/// Default weight of the reference-policy log-ratio penalty.
pub const PPO_BETA: f64 = 0.01;
/// Student probabilities below this floor are clamped in distillation.
pub const DISTILL_FLOOR: f64 = 1e-12;

/// One preference judgment: `y_a` is always the preferred output.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub x: Vec<usize>,
    pub y_a: Vec<usize>,
    pub y_b: Vec<usize>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() || self.y_a.is_empty() || self.y_b.is_empty() {
            return Err(Error::Contract {
                op: "preference_pair",
                detail: "prompt and both outputs must be non-empty".into(),
            });
        }
        if self.y_a == self.y_b {
            return Err(Error::Contract {
                op: "preference_pair",
                detail: "outputs must differ".into(),
            });
        }
        Ok(())
    }
}

/// Outputs for one prompt ordered best-first.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub x: Vec<usize>,
    pub outputs: Vec<Vec<usize>>,
}

impl RankedList {
    pub fn validate(&self) -> Result<()> {
        let contract = |detail: String| Error::Contract { op: "ranked_list", detail };
        if self.x.is_empty() || self.outputs.len() < 2 {
            return Err(contract(format!("need a prompt and at least 2 outputs, got {}", self.outputs.len())));
        }
        if self.outputs.iter().any(|y| y.is_empty()) {
            return Err(contract("empty output in list".into()));
        }
        for i in 0..self.outputs.len() {
            for j in i + 1..self.outputs.len() {
                if self.outputs[i] == self.outputs[j] {
                    return Err(contract(format!("outputs {i} and {j} are duplicates")));
                }
            }
        }
        Ok(())
    }
}

/// One sampled episode. Per-token arrays are parallel to `y`; the reward is
/// sparse, attached at the final output token (intermediate rewards are 0).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    /// Per-token log-probs under the policy that sampled `y`.
    pub logprobs: Vec<f64>,
    /// Per-token log-probs under the frozen reference policy.
    pub ref_logprobs: Vec<f64>,
    /// V(s_t) per output position; the post-terminal value is defined as 0.
    pub values: Vec<f64>,
    pub reward: f64,
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.is_empty() || n == 0 {
            return Err(Error::Contract {
                op: "trajectory",
                detail: "prompt and output must be non-empty".into(),
            });
        }
        if self.logprobs.len() != n
            || self.ref_logprobs.len() != n
            || self.values.len() != n
            || self.advantages.len() != n
        {
            return Err(Error::Contract {
                op: "trajectory",
                detail: format!("per-token arrays must all have length {n}"),
            });
        }
        Ok(())
    }
}

/// Attach a freshly initialized reward head (d×1).
pub fn attach_reward_head(params: &mut ModelParams, seed: u64) -> Result<usize> {
    let d = params.config.d;
    params.add_head(REWARD_HEAD, &[d, 1], seed)
}

/// Attach a freshly initialized value head (d×1).
pub fn attach_value_head(params: &mut ModelParams, seed: u64) -> Result<usize> {
    let d = params.config.d;
    params.add_head(VALUE_HEAD, &[d, 1], seed)
}

fn head_var(params: &ModelParams, pv: &ParamVars, name: &str) -> Result<Var> {
    params.index_of(name).map(|i| pv.vars[i]).ok_or_else(|| Error::Contract {
        op: "align",
        detail: format!("{name} head not attached to the model"),
    })
}

fn concat_xy(x: &[usize], y: &[usize]) -> Vec<usize> {
    let mut toks = x.to_vec();
    toks.extend_from_slice(y);
    toks
}

/// targets[i] = tokens[i+1]; the final entry is a placeholder.
fn shifted_targets(tokens: &[usize]) -> Vec<usize> {
    let mut t = vec![0usize; tokens.len()];
    for i in 0..tokens.len() - 1 {
        t[i] = tokens[i + 1];
    }
    t
}

/// Collapse a one-element tensor to scalar shape [1].
fn as_scalar(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.sum(v)
}

/// Scalar reward of an output: force-decode [x, y], project the last
/// position's top-layer state through the reward head.
pub fn reward_score(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: &[usize],
    y: &[usize],
) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::Contract { op: "reward_score", detail: "empty output".into() });
    }
    let w = head_var(params, pv, REWARD_HEAD)?;
    let toks = concat_xy(x, y);
    let out = forward_tokens(tape, params, pv, &toks, &ForwardOpts::default())?;
    let last = tape.slice(out.hidden, toks.len() - 1, 1)?;
    let r = tape.matmul(last, w)?;
    as_scalar(tape, r)
}

/// Reward as a plain number (fresh tape, no gradients). Deterministic:
/// repeated calls are bit-identical.
pub fn reward_value(params: &ModelParams, x: &[usize], y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.leaf_all(&mut tape, false);
    let r = reward_score(&mut tape, params, &pv, x, y)?;
    Ok(tape.value(r).data()[0])
}

/// mean(−log σ(logit)) over a batch of scalar logits.
fn neg_log_sigmoid_mean(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    let row = tape.concat_cols(logits)?;
    let ls = tape.log_sigmoid(row)?;
    let m = tape.mean(ls)?;
    tape.scale(m, -1.0)
}

/// Pairwise ranking loss on precomputed scores: mean −log σ(r_a − r_b).
pub fn bt_loss_from_scores(tape: &mut Tape, r_a: &[Var], r_b: &[Var]) -> Result<Var> {
    if r_a.is_empty() || r_a.len() != r_b.len() {
        return Err(Error::Contract {
            op: "bt_pair_loss",
            detail: format!("need matching non-empty score batches, got {}/{}", r_a.len(), r_b.len()),
        });
    }
    let diffs: Vec<Var> =
        r_a.iter().zip(r_b).map(|(&a, &b)| tape.sub(a, b)).collect::<Result<_>>()?;
    neg_log_sigmoid_mean(tape, &diffs)
}

/// Bradley-Terry pairwise loss over a preference batch.
pub fn bt_pair_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    pairs: &[PreferencePair],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract { op: "bt_pair_loss", detail: "empty batch".into() });
    }
    let mut r_a = Vec::with_capacity(pairs.len());
    let mut r_b = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.validate()?;
        r_a.push(reward_score(tape, params, pv, &p.x, &p.y_a)?);
        r_b.push(reward_score(tape, params, pv, &p.x, &p.y_b)?);
    }
    bt_loss_from_scores(tape, &r_a, &r_b)
}

/// Listwise ranking loss on best-first scores:
/// −Σ_k log[ exp(r_k) / Σ_{l ≥ k} exp(r_l) ].
pub fn pl_loss_from_scores(tape: &mut Tape, scores: &[Var]) -> Result<Var> {
    if scores.len() < 2 {
        return Err(Error::Contract {
            op: "pl_list_loss",
            detail: format!("need at least 2 scores, got {}", scores.len()),
        });
    }
    let mut terms = Vec::with_capacity(scores.len());
    for k in 0..scores.len() {
        let suffix = tape.concat_rows(&scores[k..])?;
        let lse = tape.logsumexp(suffix)?;
        terms.push(tape.sub(lse, scores[k])?);
    }
    let row = tape.concat_cols(&terms)?;
    tape.sum(row)
}

/// Plackett-Luce loss of a ranked list under the reward head.
pub fn pl_list_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    list: &RankedList,
) -> Result<Var> {
    list.validate()?;
    let scores: Vec<Var> = list
        .outputs
        .iter()
        .map(|y| reward_score(tape, params, pv, &list.x, y))
        .collect::<Result<_>>()?;
    pl_loss_from_scores(tape, &scores)
}

/// One output with a target score for regression-style reward fitting.
#[derive(Debug, Clone)]
pub struct ScoredExample {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub score: f64,
}

/// mean (φ − r)² on precomputed scores.
pub fn pointwise_from_scores(tape: &mut Tape, scores: &[Var], labels: &[f64]) -> Result<Var> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract {
            op: "pointwise_loss",
            detail: format!("need matching non-empty batches, got {}/{}", scores.len(), labels.len()),
        });
    }
    let row = tape.concat_cols(scores)?;
    let lab = tape.leaf(Tensor::new(vec![1, labels.len()], labels.to_vec())?);
    let d = tape.sub(row, lab)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean squared error between head scores and target scores.
pub fn pointwise_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    examples: &[ScoredExample],
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::Contract { op: "pointwise_loss", detail: "empty batch".into() });
    }
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        scores.push(reward_score(tape, params, pv, &e.x, &e.y)?);
        labels.push(e.score);
    }
    pointwise_from_scores(tape, &scores, &labels)
}

/// Pairwise loss plus `weight · mean (r_a + r_b)²`, which pulls reward
/// magnitudes toward zero without affecting differences.
pub fn reward_reg_from_scores(
    tape: &mut Tape,
    r_a: &[Var],
    r_b: &[Var],
    weight: f64,
) -> Result<Var> {
    let bt = bt_loss_from_scores(tape, r_a, r_b)?;
    let sums: Vec<Var> =
        r_a.iter().zip(r_b).map(|(&a, &b)| tape.add(a, b)).collect::<Result<_>>()?;
    let row = tape.concat_cols(&sums)?;
    let sq = tape.mul(row, row)?;
    let reg = tape.mean(sq)?;
    let scaled = tape.scale(reg, weight)?;
    tape.add(bt, scaled)
}

/// Regularized Bradley-Terry loss over a preference batch.
pub fn reward_reg_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    pairs: &[PreferencePair],
    weight: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract { op: "reward_reg_loss", detail: "empty batch".into() });
    }
    let mut r_a = Vec::with_capacity(pairs.len());
    let mut r_b = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.validate()?;
        r_a.push(reward_score(tape, params, pv, &p.x, &p.y_a)?);
        r_b.push(reward_score(tape, params, pv, &p.x, &p.y_b)?);
    }
    reward_reg_from_scores(tape, &r_a, &r_b, weight)
}

/// Weighted mean of per-head scores: (1/K) Σ w_k r_k.
pub fn ensemble_from_scores(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != weights.len() {
        return Err(Error::Contract {
            op: "ensemble_reward",
            detail: format!("need matching non-empty ensembles, got {}/{}", scores.len(), weights.len()),
        });
    }
    let k = scores.len() as f64;
    Ok(scores.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>() / k)
}

/// Ensemble score of an output across several reward models.
pub fn ensemble_reward(
    heads: &[&ModelParams],
    weights: &[f64],
    x: &[usize],
    y: &[usize],
) -> Result<f64> {
    if heads.is_empty() || heads.len() != weights.len() {
        return Err(Error::Contract {
            op: "ensemble_reward",
            detail: format!("need matching non-empty ensembles, got {}/{}", heads.len(), weights.len()),
        });
    }
    let scores: Vec<f64> =
        heads.iter().map(|p| reward_value(p, x, y)).collect::<Result<_>>()?;
    ensemble_from_scores(&scores, weights)
}

/// Fine-grained reward: `ends` are cumulative segment ends tiling `y`; each
/// segment is scored on [x, y-prefix through that segment] and the scores
/// are summed.
pub fn segment_reward(
    params: &ModelParams,
    x: &[usize],
    y: &[usize],
    ends: &[usize],
) -> Result<f64> {
    let contract = |detail: String| Error::Contract { op: "segment_reward", detail };
    if ends.is_empty() || *ends.last().unwrap() != y.len() {
        return Err(contract(format!("segment ends {ends:?} do not tile an output of {}", y.len())));
    }
    let mut prev = 0usize;
    for &e in ends {
        if e <= prev {
            return Err(contract(format!("segment ends {ends:?} must be strictly increasing")));
        }
        prev = e;
    }
    let mut total = 0.0;
    for &e in ends {
        total += reward_value(params, x, &y[..e])?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessMode {
    /// Number of steps whose two-class verdict (correct vs not) argmaxes to
    /// correct; P = 0.5 counts as correct.
    Count,
    /// Σ log P(correct) over the steps.
    LogProb,
}

/// Step-level supervision: the classifier maps each reasoning step to its
/// probability of being correct given the preceding context.
pub fn process_reward(
    steps: &[Vec<usize>],
    classify: impl Fn(&[usize]) -> f64,
    mode: ProcessMode,
) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::Contract { op: "process_reward", detail: "no steps".into() });
    }
    let mut total = 0.0;
    for s in steps {
        let p = classify(s);
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract {
                op: "process_reward",
                detail: format!("classifier probability {p} outside [0, 1]"),
            });
        }
        total += match mode {
            ProcessMode::Count => {
                if p >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            ProcessMode::LogProb => p.ln(),
        };
    }
    Ok(total)
}

/// One-step TD error: r + γ·V(s') − V(s).
pub fn advantage(r: f64, v: f64, v_next: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
    }
    Ok(r + gamma * v_next - v)
}

/// Per-token advantages for a sparse-reward episode: r_t = 0 everywhere
/// except the final token, and the post-terminal value is 0.
pub fn compute_advantages(values: &[f64], reward: f64, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
    }
    let n = values.len();
    let mut a = vec![0.0; n];
    for t in 0..n {
        let r = if t == n - 1 { reward } else { 0.0 };
        let v_next = if t == n - 1 { 0.0 } else { values[t + 1] };
        a[t] = r + gamma * v_next - values[t];
    }
    Ok(a)
}

/// Per-token log-probs of `y` given `x` (no gradients).
pub fn trajectory_logprobs(params: &ModelParams, x: &[usize], y: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = params.leaf_all(&mut tape, false);
    let lp = output_logprobs(&mut tape, params, &pv, x, y)?;
    Ok(tape.value(lp).data().to_vec())
}

/// V(s_t) per output position via the value head (no gradients).
pub fn trajectory_values(params: &ModelParams, x: &[usize], y: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = params.leaf_all(&mut tape, false);
    let v = value_rows(&mut tape, params, &pv, x, y)?;
    Ok(tape.value(v).data().to_vec())
}

/// Assemble a trajectory: log-probs under the (sampling) policy and the
/// reference, values from the critic when provided, TD advantages.
pub fn make_trajectory(
    policy: &ModelParams,
    reference: &ModelParams,
    critic: Option<&ModelParams>,
    x: &[usize],
    y: &[usize],
    reward: f64,
    gamma: f64,
) -> Result<Trajectory> {
    let logprobs = trajectory_logprobs(policy, x, y)?;
    let ref_logprobs = trajectory_logprobs(reference, x, y)?;
    let values = match critic {
        Some(c) => trajectory_values(c, x, y)?,
        None => vec![0.0; y.len()],
    };
    let advantages = compute_advantages(&values, reward, gamma)?;
    let t = Trajectory {
        x: x.to_vec(),
        y: y.to_vec(),
        logprobs,
        ref_logprobs,
        values,
        reward,
        advantages,
    };
    t.validate()?;
    Ok(t)
}

/// Per-token log-probs of the output region on the tape (differentiable).
fn output_logprobs(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: &[usize],
    y: &[usize],
) -> Result<Var> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract {
            op: "output_logprobs",
            detail: "prompt and output must be non-empty".into(),
        });
    }
    let toks = concat_xy(x, y);
    let out = forward_tokens(tape, params, pv, &toks, &ForwardOpts::default())?;
    let targets = shifted_targets(&toks);
    let lp_all = tape.token_logprobs(out.logits, &targets)?;
    // Output token t is predicted from row |x|−1+t.
    let idx: Vec<usize> = (0..y.len()).map(|t| x.len() - 1 + t).collect();
    tape.gather_scalars(lp_all, &idx, &[y.len()])
}

/// V(s_t) rows [|y| × 1] on the tape (differentiable).
fn value_rows(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: &[usize],
    y: &[usize],
) -> Result<Var> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract {
            op: "value_rows",
            detail: "prompt and output must be non-empty".into(),
        });
    }
    let w = head_var(params, pv, VALUE_HEAD)?;
    let toks = concat_xy(x, y);
    let out = forward_tokens(tape, params, pv, &toks, &ForwardOpts::default())?;
    let states = tape.slice(out.hidden, x.len() - 1, y.len())?;
    tape.matmul(states, w)
}

/// Squared one-step TD errors [n] for a sparse-reward episode. Values may
/// arrive in any shape; flat order is position order.
fn td_squared(tape: &mut Tape, values: Var, reward: f64, gamma: f64) -> Result<Var> {
    let n = tape.value(values).data().len();
    if n == 0 {
        return Err(Error::Contract { op: "value_loss", detail: "no positions".into() });
    }
    let flat_idx: Vec<usize> = (0..n).collect();
    let v = tape.gather_scalars(values, &flat_idx, &[n])?;
    let zero = tape.leaf(Tensor::zeros(&[1]));
    let v_next = if n == 1 {
        zero
    } else {
        let body = tape.gather_scalars(values, &flat_idx[1..], &[n - 1])?;
        tape.concat_rows(&[body, zero])?
    };
    let mut r = vec![0.0; n];
    r[n - 1] = reward;
    let r = tape.leaf(Tensor::new(vec![n], r)?);
    let scaled = tape.scale(v_next, gamma)?;
    let target = tape.add(r, scaled)?;
    let td = tape.sub(target, v)?;
    tape.mul(td, td)
}

/// Mean squared TD error of one value vector (position order).
pub fn value_loss_from_values(
    tape: &mut Tape,
    values: Var,
    reward: f64,
    gamma: f64,
) -> Result<Var> {
    let sq = td_squared(tape, values, reward, gamma)?;
    tape.mean(sq)
}

/// Mean squared TD error over a trajectory batch, with values recomputed
/// through the value head so the critic can be trained.
pub fn value_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    trajectories: &[Trajectory],
    gamma: f64,
) -> Result<Var> {
    if trajectories.is_empty() {
        return Err(Error::Contract { op: "value_loss", detail: "empty batch".into() });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
    }
    let mut parts = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        t.validate()?;
        let v = value_rows(tape, params, pv, &t.x, &t.y)?;
        parts.push(td_squared(tape, v, t.reward, gamma)?);
    }
    let all = tape.concat_rows(&parts)?;
    tape.mean(all)
}

/// Clip(ρ) = min(ρ, bound(ρ, 1−ε, 1+ε)).
pub fn clip_ratio(tape: &mut Tape, rho: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("clip width {eps} must be positive")));
    }
    let bounded = tape.clamp(rho, 1.0 - eps, 1.0 + eps)?;
    tape.min_pair(rho, bounded)
}

#[derive(Debug, Clone)]
pub struct PpoOpts {
    pub eps: f64,
    pub beta: f64,
    /// Use min(ρA, clip(ρ)A) instead of the default clip(ρ)A. The two differ
    /// for negative advantages, where the canonical form keeps the more
    /// pessimistic (smaller) term.
    pub canonical_clip: bool,
    /// Divide the reference-policy penalty by |y| instead of summing.
    pub per_token_penalty: bool,
}

impl Default for PpoOpts {
    fn default() -> Self {
        PpoOpts { eps: PPO_EPS, beta: PPO_BETA, canonical_clip: false, per_token_penalty: false }
    }
}

/// Clipped-surrogate utility with a reference-policy penalty:
/// Σ_t Clip(ρ_t)·A_t − β(log π_θ(y|x) − log π_ref(y|x)). Training maximizes
/// this; ratios compare the current policy to the trajectory's sampling-time
/// log-probs.
pub fn ppo_objective(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    traj: &Trajectory,
    opts: &PpoOpts,
) -> Result<Var> {
    traj.validate()?;
    let n = traj.y.len();
    let lp = output_logprobs(tape, params, pv, &traj.x, &traj.y)?;
    let old = tape.leaf(Tensor::new(vec![n], traj.logprobs.clone())?);
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff)?;
    let clipped = clip_ratio(tape, ratio, opts.eps)?;
    let adv = tape.leaf(Tensor::new(vec![n], traj.advantages.clone())?);
    let term = if opts.canonical_clip {
        let raw = tape.mul(ratio, adv)?;
        let clip = tape.mul(clipped, adv)?;
        tape.min_pair(raw, clip)?
    } else {
        tape.mul(clipped, adv)?
    };
    let surrogate = tape.sum(term)?;

    let seq_lp = tape.sum(lp)?;
    let ref_total: f64 = traj.ref_logprobs.iter().sum();
    let mut penalty = tape.add_const(seq_lp, -ref_total)?;
    if opts.per_token_penalty {
        penalty = tape.scale(penalty, 1.0 / n as f64)?;
    }
    let weighted = tape.scale(penalty, opts.beta)?;
    tape.sub(surrogate, weighted)
}

/// Sequence log-prob of `y` given `x` on the tape (differentiable).
pub fn sequence_logprob(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    x: &[usize],
    y: &[usize],
) -> Result<Var> {
    let lp = output_logprobs(tape, params, pv, x, y)?;
    tape.sum(lp)
}

/// Sequence log-prob as a plain number.
pub fn sequence_logprob_value(params: &ModelParams, x: &[usize], y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.leaf_all(&mut tape, false);
    let v = sequence_logprob(&mut tape, params, &pv, x, y)?;
    Ok(tape.value(v).data()[0])
}

/// Preference loss on policy log-ratios:
/// mean −log σ(β[(log π_θ(y_a)/π_ref(y_a)) − (log π_θ(y_b)/π_ref(y_b))]).
/// The reference side is a frozen constant.
pub fn dpo_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract { op: "dpo_loss", detail: "empty batch".into() });
    }
    let mut logits = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.validate()?;
        let la = sequence_logprob(tape, params, pv, &p.x, &p.y_a)?;
        let lb = sequence_logprob(tape, params, pv, &p.x, &p.y_b)?;
        let ref_a = sequence_logprob_value(reference, &p.x, &p.y_a)?;
        let ref_b = sequence_logprob_value(reference, &p.x, &p.y_b)?;
        let d = tape.sub(la, lb)?;
        let scaled = tape.scale(d, beta)?;
        logits.push(tape.add_const(scaled, -beta * (ref_a - ref_b))?);
    }
    neg_log_sigmoid_mean(tape, &logits)
}

/// β·log[π_θ(y|x)/π_ref(y|x)]. The prompt-dependent normalizer is omitted,
/// so absolute values are defined only up to a per-prompt constant;
/// differences between outputs for the same prompt are exact.
pub fn dpo_implicit_reward(
    params: &ModelParams,
    reference: &ModelParams,
    x: &[usize],
    y: &[usize],
    beta: f64,
) -> Result<f64> {
    let lp = sequence_logprob_value(params, x, y)?;
    let ref_lp = sequence_logprob_value(reference, x, y)?;
    Ok(beta * (lp - ref_lp))
}

/// Index of the highest-scoring candidate; ties keep the earliest index.
pub fn bon_select(
    candidates: &[Vec<usize>],
    score: impl Fn(&[usize]) -> Result<f64>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract { op: "bon_select", detail: "no candidates".into() });
    }
    let mut best = 0usize;
    let mut best_r = score(&candidates[0])?;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let r = score(c)?;
        if r > best_r {
            best = i;
            best_r = r;
        }
    }
    Ok(best)
}

/// For each prompt, draw `n` candidates from the sampler, keep the
/// best-of-N winner, and emit it as a supervised fine-tuning example.
/// Sampler or scorer failures propagate.
pub fn rejection_sample_dataset(
    prompts: &[Vec<usize>],
    n: usize,
    mut sample: impl FnMut(&[usize]) -> Result<Vec<usize>>,
    score: impl Fn(&[usize], &[usize]) -> Result<f64>,
) -> Result<Vec<TrainingExample>> {
    if n == 0 {
        return Err(Error::Config("best-of-N needs N >= 1".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for x in prompts {
        let candidates: Vec<Vec<usize>> =
            (0..n).map(|_| sample(x)).collect::<Result<_>>()?;
        let best = bon_select(&candidates, |y| score(x, y))?;
        out.push(sft_example(x, &candidates[best])?);
    }
    Ok(out)
}

/// Fraction of the weak-to-ceiling performance gap recovered by the
/// weak-to-strong model, clamped below at 0.
pub fn pgr(p_weak: f64, p_w2s: f64, p_ceiling: f64) -> Result<f64> {
    let denom = p_ceiling - p_weak;
    if denom == 0.0 {
        return Err(Error::Config("ceiling equals the weak baseline; gap undefined".into()));
    }
    Ok(((p_w2s - p_weak) / denom).max(0.0))
}

/// KL(teacher ‖ student) summed over the vocabulary and averaged over
/// positions. Student log-probs are clamped at ln(1e-12); the flag reports
/// whether any clamped entry carried teacher mass.
pub fn context_distill_loss(
    tape: &mut Tape,
    teacher: &Tensor,
    student_logits: Var,
) -> Result<(Var, bool)> {
    let (m, v) = teacher.rows_cols();
    if tape.value(student_logits).rows_cols() != (m, v) {
        return Err(Error::Shape {
            op: "context_distill_loss",
            detail: format!(
                "teacher {:?} vs student {:?}",
                teacher.rows_cols(),
                tape.value(student_logits).rows_cols()
            ),
        });
    }
    for i in 0..m {
        let row = &teacher.data()[i * v..(i + 1) * v];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract {
                op: "context_distill_loss",
                detail: format!("teacher row {i} is not a distribution (sum {sum})"),
            });
        }
    }
    let floor = DISTILL_FLOOR.ln();
    let lp = tape.log_softmax_rows(student_logits)?;
    let flagged = {
        let lp_vals = tape.value(lp).data();
        teacher.data().iter().zip(lp_vals).any(|(&t, &l)| t > 0.0 && l < floor)
    };
    // Log-probs are never positive, so clamping above at 0 is a no-op.
    let lp = tape.clamp(lp, floor, 0.0)?;
    let weighted = tape.mul_const_vec(lp, teacher.data())?;
    let cross = tape.sum(weighted)?;
    let neg = tape.scale(cross, -1.0 / m as f64)?;
    let entropy: f64 = teacher
        .data()
        .iter()
        .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
        .sum();
    let loss = tape.add_const(neg, entropy / m as f64)?;
    Ok((loss, flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPlacement {
    /// Trainable rows prepended to the token embeddings.
    InputEmbeddings,
    /// Trainable rows prepended to every layer's input (outputs sliced back).
    PerLayerPrefix,
}

#[derive(Debug, Clone, Copy)]
pub struct SoftPrompt {
    pub placement: PromptPlacement,
    pub n_prompt: usize,
}

/// Name of the input-placement prompt tensor.
pub const PROMPT_INPUT: &str = "prompt.input";

fn prompt_layer_name(l: usize) -> String {
    format!("prompt.layer.{l}")
}

/// Trainability predicate for prompt tuning: only prompt tensors learn.
pub fn prompt_only(name: &str) -> bool {
    name.starts_with("prompt.")
}

/// Attach freshly initialized prompt vectors for the given placement.
pub fn attach_soft_prompt(params: &mut ModelParams, sp: &SoftPrompt, seed: u64) -> Result<()> {
    if sp.n_prompt == 0 {
        return Err(Error::Config("prompt length must be at least 1".into()));
    }
    let d = params.config.d;
    match sp.placement {
        PromptPlacement::InputEmbeddings => {
            params.add_head(PROMPT_INPUT, &[sp.n_prompt, d], seed)?;
        }
        PromptPlacement::PerLayerPrefix => {
            for l in 0..params.config.n_layer {
                params.add_head(&prompt_layer_name(l), &[sp.n_prompt, d], seed.wrapping_add(l as u64))?;
            }
        }
    }
    Ok(())
}

/// Number of parameters a placement trains.
pub fn soft_prompt_param_count(config: &ModelConfig, sp: &SoftPrompt) -> usize {
    match sp.placement {
        PromptPlacement::InputEmbeddings => sp.n_prompt * config.d,
        PromptPlacement::PerLayerPrefix => config.n_layer * sp.n_prompt * config.d,
    }
}

/// Forward pass with the soft prompt applied; logits and hidden states are
/// returned for the real token positions only.
pub fn soft_prompt_forward(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    sp: &SoftPrompt,
    tokens: &[usize],
) -> Result<ForwardOut> {
    let cfg = &params.config;
    let m = tokens.len();
    match sp.placement {
        PromptPlacement::InputEmbeddings => {
            let prompt = head_var(params, pv, PROMPT_INPUT)?;
            let n_p = tape.value(prompt).rows_cols().0;
            let tok_table = head_var(params, pv, "embed.tok")?;
            let emb = tape.embed(tok_table, tokens)?;
            let mut full = tape.concat_rows(&[prompt, emb])?;
            if matches!(cfg.pos_kind, PosKind::Learned) {
                if n_p + m > cfg.max_len {
                    return Err(Error::Contract {
                        op: "soft_prompt_forward",
                        detail: format!(
                            "prompt {n_p} + sequence {m} exceeds position capacity {}",
                            cfg.max_len
                        ),
                    });
                }
                let pos_table = head_var(params, pv, "embed.pos")?;
                let positions: Vec<usize> = (0..n_p + m).collect();
                let pos = tape.embed(pos_table, &positions)?;
                full = tape.add(full, pos)?;
            }
            let out = forward_embeddings(tape, params, pv, full, &ForwardOpts::default())?;
            let logits = tape.slice(out.logits, n_p, m)?;
            let hidden = tape.slice(out.hidden, n_p, m)?;
            Ok(ForwardOut { logits, hidden })
        }
        PromptPlacement::PerLayerPrefix => {
            let prefixes: Vec<Var> = (0..cfg.n_layer)
                .map(|l| head_var(params, pv, &prompt_layer_name(l)))
                .collect::<Result<_>>()?;
            let opts = ForwardOpts { layer_prefixes: Some(&prefixes), ..ForwardOpts::default() };
            forward_tokens(tape, params, pv, tokens, &opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
    use std::f64::consts::LN_2;

    // −log σ(1), frozen from the closed form ln(1 + e^{−1}).
    const NEG_LOG_SIG_1: f64 = 0.31326168751822286;

    fn tiny_reward_model(vocab: usize, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(ModelConfig::tiny(vocab), seed).unwrap();
        attach_reward_head(&mut p, seed ^ 0x5eed).unwrap();
        p
    }

    fn scalar_leaf(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v).unwrap())
    }

    #[test]
    fn bt_loss_matches_closed_forms() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 0.4);
        let b = scalar_leaf(&mut tape, 0.4);
        let equal = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
        assert!((tape.value(equal).data()[0] - LN_2).abs() < 1e-15);

        let a = scalar_leaf(&mut tape, 1.25);
        let b = scalar_leaf(&mut tape, 0.25);
        let one = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
        assert!((tape.value(one).data()[0] - NEG_LOG_SIG_1).abs() < 1e-12);

        // Strictly decreasing in the score difference.
        let mut prev = f64::INFINITY;
        for diff in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let a = scalar_leaf(&mut tape, diff);
            let b = scalar_leaf(&mut tape, 0.0);
            let l = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v < prev, "loss must fall as the margin grows");
            prev = v;
        }
    }

    #[test]
    fn pl_loss_two_equals_bt_and_equal_scores_value() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 0.9);
        let b = scalar_leaf(&mut tape, -0.3);
        let pl = pl_loss_from_scores(&mut tape, &[a, b]).unwrap();
        let bt = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
        let (plv, btv) = (tape.value(pl).data()[0], tape.value(bt).data()[0]);
        assert!((plv - btv).abs() < 1e-12, "two-way listwise must reduce to pairwise");

        // Three equal scores: ln 3! over the uniform ranking = ln3 + ln2.
        let s: Vec<Var> = (0..3).map(|_| scalar_leaf(&mut tape, 0.7)).collect();
        let pl3 = pl_loss_from_scores(&mut tape, &s).unwrap();
        assert!((tape.value(pl3).data()[0] - 1.791759469228055).abs() < 1e-12);

        // Shift invariance: only score differences matter.
        let base = [1.3, -0.2, 0.8, 0.1];
        for c in [0.0, 5.0, -17.0] {
            let s: Vec<Var> = base.iter().map(|&v| scalar_leaf(&mut tape, v + c)).collect();
            let l = pl_loss_from_scores(&mut tape, &s).unwrap();
            let s0: Vec<Var> = base.iter().map(|&v| scalar_leaf(&mut tape, v)).collect();
            let l0 = pl_loss_from_scores(&mut tape, &s0).unwrap();
            assert!((tape.value(l).data()[0] - tape.value(l0).data()[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn ranked_list_rejects_duplicates_and_short_lists() {
        let list = RankedList { x: vec![0], outputs: vec![vec![1, 2], vec![1, 2]] };
        assert!(list.validate().is_err());
        let list = RankedList { x: vec![0], outputs: vec![vec![1, 2]] };
        assert!(list.validate().is_err());
        let list = RankedList { x: vec![0], outputs: vec![vec![1], vec![2], vec![3]] };
        assert!(list.validate().is_ok());
    }

    #[test]
    fn reward_reg_weight_cases() {
        let mut tape = Tape::new();
        // Zero weight reduces to the plain pairwise loss.
        let a = scalar_leaf(&mut tape, 0.8);
        let b = scalar_leaf(&mut tape, -0.2);
        let reg0 = reward_reg_from_scores(&mut tape, &[a], &[b], 0.0).unwrap();
        let bt = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
        assert_eq!(tape.value(reg0).data()[0], tape.value(bt).data()[0]);

        // Antisymmetric scores leave the penalty at zero.
        let a = scalar_leaf(&mut tape, 0.6);
        let b = scalar_leaf(&mut tape, -0.6);
        let reg = reward_reg_from_scores(&mut tape, &[a], &[b], 3.0).unwrap();
        let bt = bt_loss_from_scores(&mut tape, &[a], &[b]).unwrap();
        assert_eq!(tape.value(reg).data()[0], tape.value(bt).data()[0]);

        // r_a = r_b = 1 adds weight · (1+1)² = 4w on top of ln 2.
        let w = 0.3;
        let a = scalar_leaf(&mut tape, 1.0);
        let b = scalar_leaf(&mut tape, 1.0);
        let reg = reward_reg_from_scores(&mut tape, &[a], &[b], w).unwrap();
        assert!((tape.value(reg).data()[0] - (LN_2 + 4.0 * w)).abs() < 1e-12);
    }

    #[test]
    fn pointwise_loss_fd_through_reward_head() {
        let mut params = tiny_reward_model(16, 3);
        let examples = vec![
            ScoredExample { x: vec![0, 9], y: vec![10, 11], score: 0.5 },
            ScoredExample { x: vec![0, 12], y: vec![13], score: -1.0 },
        ];

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let loss = pointwise_loss(&mut tape, &params, &pv, &examples).unwrap();
        tape.backward(loss).unwrap();
        let head = params.index_of(REWARD_HEAD).unwrap();
        let ad = tape.grad(pv.vars[head]).unwrap().to_vec();

        let x0 = params.tensor(head).data().to_vec();
        let fd = finite_diff(
            |xs: &[f64]| {
                params.update(head, |d| d.copy_from_slice(xs));
                let mut t = Tape::new();
                let pv = params.leaf_all(&mut t, false);
                let l = pointwise_loss(&mut t, &params, &pv, &examples).unwrap();
                t.value(l).data()[0]
            },
            &x0,
            FD_STEP,
        );
        assert!(max_rel_err(&ad, &fd) < 1e-6);
    }

    #[test]
    fn ensemble_reward_cases() {
        assert_eq!(ensemble_from_scores(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(ensemble_from_scores(&[], &[]).is_err());
        assert!(ensemble_from_scores(&[1.0], &[1.0, 2.0]).is_err());

        let p1 = tiny_reward_model(16, 5);
        let p2 = tiny_reward_model(16, 6);
        let (x, y) = (vec![0, 9], vec![10, 11]);
        let e = ensemble_reward(&[&p1, &p2], &[1.0, 1.0], &x, &y).unwrap();
        let manual =
            (reward_value(&p1, &x, &y).unwrap() + reward_value(&p2, &x, &y).unwrap()) / 2.0;
        assert_eq!(e, manual);
    }

    #[test]
    fn reward_score_gradient_is_last_hidden_state() {
        let params = tiny_reward_model(16, 7);
        let (x, y) = (vec![0usize, 9], vec![10usize, 11, 12]);

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let r = reward_score(&mut tape, &params, &pv, &x, &y).unwrap();
        tape.backward(r).unwrap();
        let head = params.index_of(REWARD_HEAD).unwrap();
        let grad = tape.grad(pv.vars[head]).unwrap().to_vec();

        let mut t2 = Tape::new();
        let pv2 = params.leaf_all(&mut t2, false);
        let toks = concat_xy(&x, &y);
        let out = forward_tokens(&mut t2, &params, &pv2, &toks, &ForwardOpts::default()).unwrap();
        let d = params.config.d;
        let hidden = t2.value(out.hidden).data();
        let last = &hidden[(toks.len() - 1) * d..toks.len() * d];
        assert_eq!(grad, last, "∂r/∂W must be the final hidden state");
    }

    #[test]
    fn reward_value_deterministic_and_zero_head() {
        let mut params = tiny_reward_model(16, 8);
        let (x, y) = (vec![0usize, 9], vec![10usize, 11]);
        let r1 = reward_value(&params, &x, &y).unwrap();
        let r2 = reward_value(&params, &x, &y).unwrap();
        assert_eq!(r1.to_bits(), r2.to_bits());

        assert!(reward_value(&params, &x, &[]).is_err(), "empty output must be rejected");

        let head = params.index_of(REWARD_HEAD).unwrap();
        let d = params.config.d;
        params.set_tensor(head, Tensor::zeros(&[d, 1])).unwrap();
        assert_eq!(reward_value(&params, &x, &y).unwrap(), 0.0);

        // With all rewards pinned at zero the pairwise loss is exactly ln 2.
        let pairs = vec![PreferencePair { x: x.clone(), y_a: y.clone(), y_b: vec![12, 13] }];
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let l = bt_pair_loss(&mut tape, &params, &pv, &pairs).unwrap();
        assert_eq!(tape.value(l).data()[0], LN_2);
    }

    #[test]
    fn segment_reward_tiles_and_sums() {
        let params = tiny_reward_model(16, 9);
        let (x, y) = (vec![0usize], vec![9usize, 10, 11, 12, 13]);

        let total = segment_reward(&params, &x, &y, &[2, 5]).unwrap();
        let manual = reward_value(&params, &x, &y[..2]).unwrap()
            + reward_value(&params, &x, &y).unwrap();
        assert_eq!(total, manual);

        assert!(segment_reward(&params, &x, &y, &[2, 4]).is_err(), "must tile the output");
        assert!(segment_reward(&params, &x, &y, &[3, 2, 5]).is_err(), "must increase");
        assert!(segment_reward(&params, &x, &y, &[0, 5]).is_err(), "no empty segments");
        assert!(segment_reward(&params, &x, &y, &[]).is_err());

        // Granularity matters: a finer split adds the extra prefix score.
        let coarse = segment_reward(&params, &x, &y, &[5]).unwrap();
        let fine = segment_reward(&params, &x, &y, &[1, 5]).unwrap();
        let r1 = reward_value(&params, &x, &y[..1]).unwrap();
        assert!(r1 != 0.0 && (fine - coarse - r1).abs() < 1e-15);
    }

    #[test]
    fn process_reward_modes() {
        let steps: Vec<Vec<usize>> = vec![vec![1], vec![2], vec![3]];
        let half = process_reward(&steps, |_| 0.5, ProcessMode::LogProb).unwrap();
        assert!((half - 3.0 * 0.5f64.ln()).abs() < 1e-15);

        let all = process_reward(&steps, |_| 0.9, ProcessMode::Count).unwrap();
        assert_eq!(all, steps.len() as f64);

        let mixed =
            process_reward(&steps, |s| if s[0] == 2 { 0.8 } else { 0.2 }, ProcessMode::Count)
                .unwrap();
        assert_eq!(mixed, 1.0);
        assert!(mixed >= 0.0 && mixed <= steps.len() as f64);

        assert!(process_reward(&steps, |_| 1.5, ProcessMode::Count).is_err());
        assert!(process_reward(&[], |_: &[usize]| 0.5, ProcessMode::Count).is_err());
    }

    #[test]
    fn advantage_hand_values() {
        assert_eq!(advantage(1.0, 0.5, 0.25, 0.5).unwrap(), 0.625);
        assert!(advantage(1.0, 0.5, 0.25, 1.5).is_err());
        assert!(advantage(1.0, 0.5, 0.25, -0.1).is_err());

        let a = compute_advantages(&[0.5, 0.25], 1.0, 1.0).unwrap();
        assert_eq!(a, vec![-0.25, 0.75]);

        // A value function that already predicts the terminal reward
        // leaves nothing to correct.
        let a = compute_advantages(&[2.0, 2.0], 2.0, 1.0).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);

        // γ = 0 reduces the target to the immediate reward.
        let a = compute_advantages(&[0.3, 0.4], 5.0, 0.0).unwrap();
        assert_eq!(a, vec![-0.3, 4.6]);
    }

    #[test]
    fn value_loss_closed_forms_and_fd() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, 2.0]).unwrap());
        let perfect = value_loss_from_values(&mut tape, v, 2.0, 1.0).unwrap();
        assert_eq!(tape.value(perfect).data()[0], 0.0);

        let v = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, 1.0]).unwrap());
        let g0 = value_loss_from_values(&mut tape, v, 3.0, 0.0).unwrap();
        assert!((tape.value(g0).data()[0] - 2.125).abs() < 1e-15);

        // Finite differences on the raw value vector.
        let x0 = [0.3, -0.2, 0.7];
        let (reward, gamma) = (1.5, 0.9);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(vec![3, 1], x0.to_vec()).unwrap().with_grad());
        let loss = value_loss_from_values(&mut t, v, reward, gamma).unwrap();
        t.backward(loss).unwrap();
        let ad = t.grad(v).unwrap().to_vec();
        let fd = finite_diff(
            |xs: &[f64]| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::new(vec![3, 1], xs.to_vec()).unwrap());
                let l = value_loss_from_values(&mut t, v, reward, gamma).unwrap();
                t.value(l).data()[0]
            },
            &x0,
            FD_STEP,
        );
        assert!(max_rel_err(&ad, &fd) < 1e-7);
    }

    #[test]
    fn value_loss_fd_through_value_head() {
        let mut params = ModelParams::init(ModelConfig::tiny(16), 11).unwrap();
        attach_value_head(&mut params, 99).unwrap();
        let trajs = vec![
            Trajectory {
                x: vec![0, 9],
                y: vec![10, 11, 12],
                logprobs: vec![0.0; 3],
                ref_logprobs: vec![0.0; 3],
                values: vec![0.0; 3],
                reward: 1.0,
                advantages: vec![0.0; 3],
            },
            Trajectory {
                x: vec![0],
                y: vec![13, 14],
                logprobs: vec![0.0; 2],
                ref_logprobs: vec![0.0; 2],
                values: vec![0.0; 2],
                reward: -0.5,
                advantages: vec![0.0; 2],
            },
        ];
        let gamma = 0.9;

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let loss = value_loss(&mut tape, &params, &pv, &trajs, gamma).unwrap();
        tape.backward(loss).unwrap();
        let head = params.index_of(VALUE_HEAD).unwrap();
        let ad = tape.grad(pv.vars[head]).unwrap().to_vec();

        let x0 = params.tensor(head).data().to_vec();
        let fd = finite_diff(
            |xs: &[f64]| {
                params.update(head, |d| d.copy_from_slice(xs));
                let mut t = Tape::new();
                let pv = params.leaf_all(&mut t, false);
                let l = value_loss(&mut t, &params, &pv, &trajs, gamma).unwrap();
                t.value(l).data()[0]
            },
            &x0,
            FD_STEP,
        );
        assert!(max_rel_err(&ad, &fd) < 1e-6);

        params.update(head, |d| d.copy_from_slice(&x0));
        let mut t = Tape::new();
        let pv = params.leaf_all(&mut t, false);
        assert!(value_loss(&mut t, &params, &pv, &[], gamma).is_err(), "empty batch");
        assert!(value_loss(&mut t, &params, &pv, &trajs, 1.5).is_err(), "bad discount");
    }

    #[test]
    fn clip_ratio_closed_forms() {
        let mut tape = Tape::new();
        let rho = tape.leaf(Tensor::new(vec![3], vec![1.5, 0.5, 1.0]).unwrap());
        let c = clip_ratio(&mut tape, rho, 0.2).unwrap();
        assert_eq!(tape.value(c).data(), [1.2, 0.5, 1.0]);

        assert!(clip_ratio(&mut tape, rho, 0.0).is_err());
        assert!(clip_ratio(&mut tape, rho, -0.2).is_err());
    }

    #[test]
    fn ppo_at_the_sampling_policy_is_the_advantage_sum() {
        let params = ModelParams::init(ModelConfig::tiny(16), 13).unwrap();
        let (x, y) = (vec![0usize, 9], vec![10usize, 11, 12]);
        let traj = make_trajectory(&params, &params, None, &x, &y, 2.0, 1.0).unwrap();
        assert_eq!(traj.advantages, vec![0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let u = ppo_objective(&mut tape, &params, &pv, &traj, &PpoOpts::default()).unwrap();
        let total: f64 = traj.advantages.iter().sum();
        assert!((tape.value(u).data()[0] - total).abs() < 1e-12);
    }

    #[test]
    fn ppo_zero_advantages_give_zero_gradients() {
        let params = ModelParams::init(ModelConfig::tiny(16), 17).unwrap();
        let (x, y) = (vec![0usize, 9], vec![10usize, 11]);
        let traj = make_trajectory(&params, &params, None, &x, &y, 0.0, 1.0).unwrap();
        assert!(traj.advantages.iter().all(|&a| a == 0.0));

        let opts = PpoOpts { beta: 0.0, ..PpoOpts::default() };
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let u = ppo_objective(&mut tape, &params, &pv, &traj, &opts).unwrap();
        assert_eq!(tape.value(u).data()[0], 0.0);
        tape.backward(u).unwrap();
        for &v in &pv.vars {
            let g = tape.grad(v).expect("trainable leaf must have a gradient");
            assert!(g.iter().all(|&x| x == 0.0), "surrogate with A ≡ 0 moves nothing");
        }
    }

    #[test]
    fn ppo_clip_forms_differ_only_for_negative_advantages() {
        let params = ModelParams::init(ModelConfig::tiny(16), 19).unwrap();
        let (x, y) = (vec![0usize, 9], vec![10usize, 11, 12]);
        let lp = trajectory_logprobs(&params, &x, &y).unwrap();
        // Shift the sampling-time log-probs so the ratios come out at
        // exactly 1.5, 0.5, and 1.
        let ratios = [1.5f64, 0.5, 1.0];
        let old: Vec<f64> = lp.iter().zip(&ratios).map(|(l, &r)| l - r.ln()).collect();
        let traj = Trajectory {
            x: x.clone(),
            y: y.clone(),
            logprobs: old,
            ref_logprobs: lp.clone(),
            values: vec![0.0; 3],
            reward: 0.0,
            advantages: vec![-1.0; 3],
        };
        let opts = PpoOpts { beta: 0.0, ..PpoOpts::default() };

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let book = ppo_objective(&mut tape, &params, &pv, &traj, &opts).unwrap();
        // clip(1.5)·−1 + clip(0.5)·−1 + clip(1)·−1 = −1.2 − 0.5 − 1.
        assert!((tape.value(book).data()[0] + 2.7).abs() < 1e-9);

        let opts = PpoOpts { beta: 0.0, canonical_clip: true, ..PpoOpts::default() };
        let canon = ppo_objective(&mut tape, &params, &pv, &traj, &opts).unwrap();
        // min(ρA, clip(ρ)A) keeps the worse −1.5 at ρ = 1.5.
        assert!((tape.value(canon).data()[0] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn dpo_at_the_reference_is_ln2_and_beta_scales_the_logit() {
        let params = ModelParams::init(ModelConfig::tiny(16), 23).unwrap();
        let pairs = vec![PreferencePair {
            x: vec![0, 9],
            y_a: vec![10, 11],
            y_b: vec![12],
        }];
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let l = dpo_loss(&mut tape, &params, &pv, &params, &pairs, 0.5).unwrap();
        assert!((tape.value(l).data()[0] - LN_2).abs() < 1e-15);

        // Against an independently initialized reference the loss must
        // match the scalar closed form, for two betas related by 2×.
        let reference = ModelParams::init(ModelConfig::tiny(16), 29).unwrap();
        let p = &pairs[0];
        let la = sequence_logprob_value(&params, &p.x, &p.y_a).unwrap();
        let lb = sequence_logprob_value(&params, &p.x, &p.y_b).unwrap();
        let ra = sequence_logprob_value(&reference, &p.x, &p.y_a).unwrap();
        let rb = sequence_logprob_value(&reference, &p.x, &p.y_b).unwrap();
        for beta in [0.7, 1.4] {
            let logit = beta * (la - lb) - beta * (ra - rb);
            let expected = (1.0 + (-logit).exp()).ln();
            let l = dpo_loss(&mut tape, &params, &pv, &reference, &pairs, beta).unwrap();
            assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_frozen_logit_value() {
        // Sequence log-ratios of +0.5 and −0.5 at β = 1 give −log σ(1).
        let mut tape = Tape::new();
        let logit = scalar_leaf(&mut tape, 1.0);
        let l = neg_log_sigmoid_mean(&mut tape, &[logit]).unwrap();
        assert!((tape.value(l).data()[0] - NEG_LOG_SIG_1).abs() < 1e-12);
    }

    #[test]
    fn dpo_implicit_reward_identities() {
        let params = ModelParams::init(ModelConfig::tiny(16), 31).unwrap();
        let reference = ModelParams::init(ModelConfig::tiny(16), 37).unwrap();
        let (x, y) = (vec![0usize, 9], vec![10usize, 11]);

        assert_eq!(dpo_implicit_reward(&params, &params, &x, &y, 2.0).unwrap(), 0.0);

        let beta = 0.8;
        let r = dpo_implicit_reward(&params, &reference, &x, &y, beta).unwrap();
        let manual = beta
            * (sequence_logprob_value(&params, &x, &y).unwrap()
                - sequence_logprob_value(&reference, &x, &y).unwrap());
        assert_eq!(r, manual);

        let r2 = dpo_implicit_reward(&params, &reference, &x, &y, 2.0 * beta).unwrap();
        assert_eq!(r2, 2.0 * r, "the implicit reward is linear in beta");
    }

    #[test]
    fn sequence_logprob_matches_manual_log_softmax() {
        let params = ModelParams::init(ModelConfig::tiny(8), 41).unwrap();
        let (x, y) = (vec![0usize], vec![3usize, 5]);
        let got = sequence_logprob_value(&params, &x, &y).unwrap();

        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let out = forward_tokens(&mut tape, &params, &pv, &[0, 3, 5], &ForwardOpts::default())
            .unwrap();
        let logits = tape.value(out.logits).data();
        let v = 8;
        let mut expected = 0.0;
        for (row, tok) in [(0usize, 3usize), (1, 5)] {
            let r = &logits[row * v..(row + 1) * v];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            expected += r[tok] - lse;
        }
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn bon_select_prefers_earliest_maximum() {
        let cands = vec![vec![2usize], vec![5], vec![5], vec![1]];
        let best = bon_select(&cands, |y| Ok(y[0] as f64)).unwrap();
        assert_eq!(best, 1, "ties keep the earliest candidate");
        let none: Vec<Vec<usize>> = vec![];
        assert!(bon_select(&none, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn rejection_sampling_keeps_best_of_n() {
        // A deterministic sampler that cycles through quality levels 0..5.
        let counter = std::cell::Cell::new(0usize);
        let sample = |_x: &[usize]| {
            let c = counter.get();
            counter.set(c + 1);
            Ok(vec![8 + (c % 5)])
        };
        let score = |_x: &[usize], y: &[usize]| Ok((y[0] - 8) as f64);
        let prompts: Vec<Vec<usize>> = (0..10).map(|i| vec![0, i]).collect();

        let one = rejection_sample_dataset(&prompts, 1, sample, score).unwrap();
        assert_eq!(one.len(), prompts.len());
        counter.set(0);
        let four = rejection_sample_dataset(&prompts, 4, sample, score).unwrap();

        let mean = |exs: &[TrainingExample]| {
            exs.iter().map(|e| (e.tokens[e.tokens.len() - 1] - 8) as f64).sum::<f64>()
                / exs.len() as f64
        };
        assert!(mean(&four) > mean(&one), "larger N must raise the oracle mean here");

        // N = 1 is the raw sample, packaged for supervised fine-tuning.
        counter.set(0);
        let raw = rejection_sample_dataset(&prompts[..1], 1, sample, score).unwrap();
        let expected = sft_example(&prompts[0], &[8]).unwrap();
        assert_eq!(raw[0].tokens, expected.tokens);
        assert_eq!(raw[0].targets, expected.targets);
        assert_eq!(raw[0].loss_mask, expected.loss_mask);

        assert!(rejection_sample_dataset(&prompts, 0, sample, score).is_err());
        let failing = |_x: &[usize]| -> Result<Vec<usize>> {
            Err(Error::Config("sampler down".into()))
        };
        assert!(rejection_sample_dataset(&prompts, 2, failing, score).is_err());
    }

    #[test]
    fn pgr_gap_fractions() {
        assert_eq!(pgr(0.6, 0.9, 0.9).unwrap(), 1.0);
        assert_eq!(pgr(0.6, 0.6, 0.9).unwrap(), 0.0);
        assert_eq!(pgr(0.6, 0.5, 0.9).unwrap(), 0.0, "clamped below at zero");
        assert!((pgr(0.5, 0.65, 0.8).unwrap() - 0.5).abs() < 1e-12);
        assert!(pgr(0.7, 0.8, 0.7).is_err(), "no gap to recover");
    }

    #[test]
    fn distill_loss_closed_forms() {
        let mut tape = Tape::new();

        // Identical distributions: zero divergence.
        let teacher = Tensor::new(vec![1, 4], vec![0.5, 0.25, 0.125, 0.125]).unwrap();
        let logits =
            tape.leaf(Tensor::new(vec![1, 4], teacher.data().iter().map(|p| p.ln()).collect())
                .unwrap());
        let (l, flagged) = context_distill_loss(&mut tape, &teacher, logits).unwrap();
        assert!(!flagged);
        assert!(tape.value(l).data()[0].abs() < 1e-12);

        // Hand value: teacher (0.75, 0.25) against a uniform student.
        let teacher = Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let (l, flagged) = context_distill_loss(&mut tape, &teacher, logits).unwrap();
        assert!(!flagged);
        assert!((tape.value(l).data()[0] - 0.13081203594113698).abs() < 1e-12);

        // Vanishing student mass under teacher support: clamped and flagged.
        let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![-100.0, 0.0]).unwrap());
        let (l, flagged) = context_distill_loss(&mut tape, &teacher, logits).unwrap();
        assert!(flagged);
        assert!((tape.value(l).data()[0] - 27.631021115928547).abs() < 1e-9);

        // Malformed teacher rows and shape mismatches are rejected.
        let bad = Tensor::new(vec![1, 2], vec![0.9, 0.3]).unwrap();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(context_distill_loss(&mut tape, &bad, logits).is_err());
        let teacher = Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(context_distill_loss(&mut tape, &teacher, logits).is_err());
    }

    #[test]
    fn distill_loss_nonnegative_and_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let v = 6;
        for _ in 0..20 {
            let mut t: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = t.iter().sum();
            t.iter_mut().for_each(|p| *p /= z);
            let teacher = Tensor::new(vec![1, v], t).unwrap();
            let logits_data: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::new(vec![1, v], logits_data).unwrap());
            let (l, _) = context_distill_loss(&mut tape, &teacher, logits).unwrap();
            assert!(tape.value(l).data()[0] > -1e-12, "divergence cannot be negative");
        }

        let teacher = Tensor::new(vec![2, 3], vec![0.6, 0.3, 0.1, 0.2, 0.2, 0.6]).unwrap();
        let x0 = [0.4, -0.3, 0.9, 1.1, 0.0, -0.7];
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], x0.to_vec()).unwrap().with_grad());
        let (l, _) = context_distill_loss(&mut tape, &teacher, logits).unwrap();
        tape.backward(l).unwrap();
        let ad = tape.grad(logits).unwrap().to_vec();
        let fd = finite_diff(
            |xs: &[f64]| {
                let mut t = Tape::new();
                let lg = t.leaf(Tensor::new(vec![2, 3], xs.to_vec()).unwrap());
                let (l, _) = context_distill_loss(&mut t, &teacher, lg).unwrap();
                t.value(l).data()[0]
            },
            &x0,
            FD_STEP,
        );
        assert!(max_rel_err(&ad, &fd) < 1e-7);
    }

    #[test]
    fn soft_prompt_parameter_counts() {
        let cfg = ModelConfig::tiny(16);
        let input = SoftPrompt { placement: PromptPlacement::InputEmbeddings, n_prompt: 5 };
        let prefix = SoftPrompt { placement: PromptPlacement::PerLayerPrefix, n_prompt: 5 };
        assert_eq!(soft_prompt_param_count(&cfg, &input), 5 * cfg.d);
        assert_eq!(soft_prompt_param_count(&cfg, &prefix), cfg.n_layer * 5 * cfg.d);

        let mut params = ModelParams::init(cfg, 47).unwrap();
        let zero = SoftPrompt { placement: PromptPlacement::InputEmbeddings, n_prompt: 0 };
        assert!(attach_soft_prompt(&mut params, &zero, 1).is_err());
    }

    #[test]
    fn soft_prompt_capacity_error() {
        let mut params = ModelParams::init(ModelConfig::tiny(16), 53).unwrap();
        let sp = SoftPrompt { placement: PromptPlacement::InputEmbeddings, n_prompt: 60 };
        attach_soft_prompt(&mut params, &sp, 2).unwrap();
        let tokens: Vec<usize> = (0..10).map(|i| i % 16).collect();
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let err = soft_prompt_forward(&mut tape, &params, &pv, &sp, &tokens);
        assert!(err.is_err(), "60 prompt rows + 10 tokens exceed 64 positions");
    }

    #[test]
    fn soft_prompt_trains_only_the_prompt() {
        for placement in [PromptPlacement::InputEmbeddings, PromptPlacement::PerLayerPrefix] {
            let mut params = ModelParams::init(ModelConfig::tiny(16), 59).unwrap();
            let sp = SoftPrompt { placement, n_prompt: 4 };
            attach_soft_prompt(&mut params, &sp, 3).unwrap();
            let before: Vec<(String, Vec<f64>)> = params
                .names()
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), params.tensor(i).data().to_vec()))
                .collect();

            let tokens = vec![0usize, 9, 10, 11, 12, 13];
            let ex = crate::objectives::causal_lm_example(&tokens).unwrap();
            let loss_value = |params: &ModelParams| {
                let mut tape = Tape::new();
                let pv = params.leaf_all(&mut tape, false);
                let out = soft_prompt_forward(&mut tape, params, &pv, &sp, &tokens).unwrap();
                let (l, _) = tape.cross_entropy(out.logits, &ex.targets, &ex.loss_mask).unwrap();
                tape.value(l).data()[0]
            };
            let initial = loss_value(&params);

            for _ in 0..10 {
                let mut tape = Tape::new();
                let pv = params.leaf_selective(&mut tape, prompt_only);
                let out = soft_prompt_forward(&mut tape, &params, &pv, &sp, &tokens).unwrap();
                let (l, _) =
                    tape.cross_entropy(out.logits, &ex.targets, &ex.loss_mask).unwrap();
                tape.backward(l).unwrap();
                for i in 0..params.len() {
                    if let Some(g) = tape.grad(pv.vars[i]) {
                        let g = g.to_vec();
                        params.update(i, |d| {
                            for (w, gi) in d.iter_mut().zip(&g) {
                                *w -= 0.5 * gi;
                            }
                        });
                    } else {
                        assert!(
                            !prompt_only(&params.names()[i]),
                            "prompt tensors must receive gradients"
                        );
                    }
                }
            }

            let tuned = loss_value(&params);
            assert!(tuned < initial, "{placement:?}: tuning must reduce the loss");

            let mut prompt_moved = false;
            for (i, (name, old)) in before.iter().enumerate() {
                let now = params.tensor(i).data();
                if prompt_only(name) {
                    prompt_moved |= now.iter().zip(old).any(|(a, b)| a.to_bits() != b.to_bits());
                } else {
                    assert!(
                        now.iter().zip(old).all(|(a, b)| a.to_bits() == b.to_bits()),
                        "{name} must stay bit-identical under prompt tuning"
                    );
                }
            }
            assert!(prompt_moved);
        }
    }
}
