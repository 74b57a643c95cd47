//! Alignment stages over a trained backbone: reward fitting, clipped policy
//! optimization, direct preference optimization, and best-of-N selection.
//! Each stage emits per-step metrics and leans on the preference oracle for
//! evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::align::{
    attach_reward_head, bt_pair_loss, dpo_loss, make_trajectory, ppo_objective, reward_value,
    PpoOpts, PreferencePair,
};
use crate::error::{Error, Result};
use crate::inference::{generate, DecodeParams, Strategy};
use crate::lab::config::OptimConfig;
use crate::lab::metrics::MetricsLog;
use crate::lab::optim::SgdMomentum;
use crate::lab::tasks::oracle_reward;
use crate::model::ModelParams;
use crate::tensor::Tape;

/// Fraction of pairs where the head scores the preferred side higher.
pub fn pairwise_accuracy(params: &ModelParams, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract { op: "pairwise_accuracy", detail: "no pairs".into() });
    }
    let mut hits = 0usize;
    for p in pairs {
        let ra = reward_value(params, &p.x, &p.y_a)?;
        let rb = reward_value(params, &p.x, &p.y_b)?;
        if ra > rb {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Attach a reward head to the backbone and fit it on preference pairs.
pub fn train_reward(
    mut backbone: ModelParams,
    pairs: &[PreferencePair],
    optim: &OptimConfig,
) -> Result<(ModelParams, MetricsLog)> {
    optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract { op: "train_reward", detail: "no pairs".into() });
    }
    if backbone.index_of(crate::align::REWARD_HEAD).is_none() {
        attach_reward_head(&mut backbone, optim.seed ^ 0xface)?;
    }
    let mut opt = SgdMomentum::new(optim.rate, optim.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed ^ 0x517cc1b727220a95);
    let mut log = MetricsLog::new();
    for step in 0..optim.steps {
        let batch: Vec<PreferencePair> =
            (0..optim.batch).map(|_| pairs[rng.gen_range(0..pairs.len())].clone()).collect();
        let mut tape = Tape::new();
        let pv = backbone.leaf_all(&mut tape, true);
        let loss = bt_pair_loss(&mut tape, &backbone, &pv, &batch)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("reward loss {lv}") });
        }
        log.record(json!({"stage": "reward", "step": step, "loss": lv, "lr": optim.rate}));
        tape.backward(loss)?;
        opt.step(&mut backbone, &tape, &pv);
    }
    Ok((backbone, log))
}

/// Fit the policy on preference pairs against a frozen reference.
pub fn train_dpo(
    mut policy: ModelParams,
    reference: &ModelParams,
    pairs: &[PreferencePair],
    optim: &OptimConfig,
    beta: f64,
) -> Result<(ModelParams, MetricsLog)> {
    optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract { op: "train_dpo", detail: "no pairs".into() });
    }
    let mut opt = SgdMomentum::new(optim.rate, optim.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed ^ 0x6a09e667f3bcc908);
    let mut log = MetricsLog::new();
    for step in 0..optim.steps {
        let batch: Vec<PreferencePair> =
            (0..optim.batch).map(|_| pairs[rng.gen_range(0..pairs.len())].clone()).collect();
        let mut tape = Tape::new();
        let pv = policy.leaf_all(&mut tape, true);
        let loss = dpo_loss(&mut tape, &policy, &pv, reference, &batch, beta)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("dpo loss {lv}") });
        }
        log.record(json!({"stage": "dpo", "step": step, "loss": lv, "lr": optim.rate}));
        tape.backward(loss)?;
        opt.step(&mut policy, &tape, &pv);
    }
    Ok((policy, log))
}

/// Sampling settings shared by the on-policy stages.
#[derive(Debug, Clone)]
pub struct RolloutParams {
    pub response_len: usize,
    pub temperature: f64,
}

impl Default for RolloutParams {
    fn default() -> Self {
        RolloutParams { response_len: 8, temperature: 1.0 }
    }
}

fn rollout(
    policy: &ModelParams,
    x: &[usize],
    rp: &RolloutParams,
    seed: u64,
) -> Result<Vec<usize>> {
    let dp = DecodeParams {
        strategy: Strategy::Temperature(rp.temperature),
        max_new_tokens: rp.response_len,
        stop: vec![],
        seed,
    };
    generate(policy, x, &dp)
}

/// Clipped-surrogate policy optimization against a learned reward model and
/// a frozen reference. Metrics track the learned reward of each step's
/// samples and the sequence-level log-ratio to the reference.
pub fn train_ppo(
    mut policy: ModelParams,
    reference: &ModelParams,
    reward_model: &ModelParams,
    prompts: &[Vec<usize>],
    optim: &OptimConfig,
    ppo: &PpoOpts,
    gamma: f64,
    rp: &RolloutParams,
) -> Result<(ModelParams, MetricsLog)> {
    optim.validate()?;
    if prompts.is_empty() {
        return Err(Error::Contract { op: "train_ppo", detail: "no prompts".into() });
    }
    let mut opt = SgdMomentum::new(optim.rate, optim.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed ^ 0xbb67ae8584caa73b);
    let mut log = MetricsLog::new();
    for step in 0..optim.steps {
        let mut tape = Tape::new();
        let pv = policy.leaf_all(&mut tape, true);
        let mut objectives = Vec::with_capacity(optim.batch);
        let mut mean_reward = 0.0;
        let mut mean_kl = 0.0;
        for b in 0..optim.batch {
            let x = &prompts[rng.gen_range(0..prompts.len())];
            let y = rollout(&policy, x, rp, optim.seed ^ (((step as u64) << 16) | b as u64))?;
            let r = reward_value(reward_model, x, &y)?;
            let traj = make_trajectory(&policy, reference, None, x, &y, r, gamma)?;
            mean_reward += r;
            mean_kl += traj.logprobs.iter().sum::<f64>()
                - traj.ref_logprobs.iter().sum::<f64>();
            objectives.push(ppo_objective(&mut tape, &policy, &pv, &traj, ppo)?);
        }
        let row = tape.concat_rows(&objectives)?;
        let mean_u = tape.mean(row)?;
        let loss = tape.scale(mean_u, -1.0)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("ppo objective {lv}") });
        }
        mean_reward /= optim.batch as f64;
        mean_kl /= optim.batch as f64;
        log.record(json!({
            "stage": "ppo",
            "step": step,
            "loss": lv,
            "lr": optim.rate,
            "reward": mean_reward,
            "kl_to_ref": mean_kl,
        }));
        tape.backward(loss)?;
        opt.step(&mut policy, &tape, &pv);
    }
    Ok((policy, log))
}

/// Mean oracle score of seeded policy samples on held-out prompts.
pub fn mean_oracle_reward(
    policy: &ModelParams,
    prompts: &[Vec<usize>],
    target: usize,
    rp: &RolloutParams,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Contract { op: "mean_oracle_reward", detail: "no prompts".into() });
    }
    let mut total = 0.0;
    for (i, x) in prompts.iter().enumerate() {
        let y = rollout(policy, x, rp, seed.wrapping_add(i as u64))?;
        total += oracle_reward(&y, target);
    }
    Ok(total / prompts.len() as f64)
}

/// Fraction of prompts where the policy's sample beats the reference's
/// under the oracle; 0.5 credit on exact ties.
pub fn oracle_win_rate(
    policy: &ModelParams,
    reference: &ModelParams,
    prompts: &[Vec<usize>],
    target: usize,
    rp: &RolloutParams,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Contract { op: "oracle_win_rate", detail: "no prompts".into() });
    }
    let mut score = 0.0;
    for (i, x) in prompts.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let a = oracle_reward(&rollout(policy, x, rp, s)?, target);
        let b = oracle_reward(&rollout(reference, x, rp, s)?, target);
        if a > b {
            score += 1.0;
        } else if a == b {
            score += 0.5;
        }
    }
    Ok(score / prompts.len() as f64)
}

/// Best-of-N under the learned reward: mean oracle score of the selected
/// samples, with per-prompt metrics.
pub fn run_bon(
    policy: &ModelParams,
    reward_model: &ModelParams,
    prompts: &[Vec<usize>],
    n: usize,
    target: usize,
    rp: &RolloutParams,
    seed: u64,
) -> Result<(f64, MetricsLog)> {
    if prompts.is_empty() || n == 0 {
        return Err(Error::Contract {
            op: "run_bon",
            detail: "need prompts and at least one sample".into(),
        });
    }
    let mut log = MetricsLog::new();
    let mut total = 0.0;
    for (i, x) in prompts.iter().enumerate() {
        let candidates: Vec<Vec<usize>> = (0..n)
            .map(|j| rollout(policy, x, rp, seed.wrapping_add((i * n + j) as u64)))
            .collect::<Result<_>>()?;
        let best = crate::align::bon_select(&candidates, |y| reward_value(reward_model, x, y))?;
        let oracle = oracle_reward(&candidates[best], target);
        total += oracle;
        log.record(json!({"stage": "bon", "prompt": i, "picked": best, "oracle": oracle}));
    }
    Ok((total / prompts.len() as f64, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::tasks::{pref_pairs, pref_prompts, pref_vocab_size, SYMBOL_BASE};
    use crate::model::ModelConfig;

    fn backbone(seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig::tiny(pref_vocab_size()), seed).unwrap()
    }

    fn optim(rate: f64, steps: usize, seed: u64) -> OptimConfig {
        OptimConfig { rate, momentum: 0.9, steps, batch: 4, seed }
    }

    #[test]
    fn reward_fit_improves_pairwise_accuracy() {
        let prompts = pref_prompts(6, 3);
        let train = pref_pairs(&prompts, 200, 6, SYMBOL_BASE, 5).unwrap();
        let held = pref_pairs(&prompts, 60, 6, SYMBOL_BASE, 6).unwrap();
        let mut cfg = optim(0.05, 250, 7);
        cfg.batch = 8;
        let (model, log) = train_reward(backbone(1), &train, &cfg).unwrap();
        assert_eq!(log.lines.len(), 250);
        let first: serde_json::Value = serde_json::from_str(&log.lines[0]).unwrap();
        let last: serde_json::Value = serde_json::from_str(&log.lines[249]).unwrap();
        assert!(last["loss"].as_f64().unwrap() < first["loss"].as_f64().unwrap());
        let acc = pairwise_accuracy(&model, &held).unwrap();
        assert!(acc > 0.6, "held-out pairwise accuracy {acc}");
    }

    #[test]
    fn dpo_starts_at_ln2_and_descends() {
        let reference = backbone(2);
        let policy = reference.clone();
        let pairs = pref_pairs(&pref_prompts(4, 9), 40, 6, SYMBOL_BASE, 11).unwrap();
        let (_, log) = train_dpo(policy, &reference, &pairs, &optim(0.02, 25, 13), 0.5).unwrap();
        let first: serde_json::Value = serde_json::from_str(&log.lines[0]).unwrap();
        // Identical policy and reference make every pair's logit exactly zero.
        assert!((first["loss"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let last: serde_json::Value = serde_json::from_str(&log.lines[24]).unwrap();
        assert!(last["loss"].as_f64().unwrap() < std::f64::consts::LN_2);
    }

    #[test]
    fn ppo_metrics_track_reward_and_reference_gap() {
        let reference = backbone(4);
        let policy = reference.clone();
        let mut rm = backbone(5);
        crate::align::attach_reward_head(&mut rm, 21).unwrap();
        let prompts = pref_prompts(4, 17);
        let rp = RolloutParams { response_len: 4, temperature: 1.0 };
        let (_, log) = train_ppo(
            policy,
            &reference,
            &rm,
            &prompts,
            &optim(0.01, 3, 19),
            &PpoOpts::default(),
            1.0,
            &rp,
        )
        .unwrap();
        assert_eq!(log.lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(&log.lines[0]).unwrap();
        for key in ["stage", "step", "loss", "lr", "reward", "kl_to_ref"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        // The first step samples from a policy identical to the reference.
        assert_eq!(first["kl_to_ref"].as_f64().unwrap(), 0.0);
        assert!(first["loss"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn identical_policies_tie_in_win_rate() {
        let policy = backbone(6);
        let prompts = pref_prompts(5, 23);
        let rp = RolloutParams::default();
        let rate =
            oracle_win_rate(&policy, &policy.clone(), &prompts, SYMBOL_BASE, &rp, 31).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn best_of_one_matches_plain_sampling() {
        let policy = backbone(7);
        let mut rm = backbone(8);
        crate::align::attach_reward_head(&mut rm, 29).unwrap();
        let prompts = pref_prompts(4, 37);
        let rp = RolloutParams { response_len: 5, temperature: 1.0 };
        let (bon_mean, log) = run_bon(&policy, &rm, &prompts, 1, SYMBOL_BASE, &rp, 41).unwrap();
        let plain = mean_oracle_reward(&policy, &prompts, SYMBOL_BASE, &rp, 41).unwrap();
        assert_eq!(bon_mean, plain);
        assert_eq!(log.lines.len(), prompts.len());
    }
}
