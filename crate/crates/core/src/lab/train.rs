//! Seeded training loops over tape-built losses, with line metrics and
//! divergence detection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::lab::config::{ExperimentConfig, ObjectiveKind, OptimConfig, TaskKind};
use crate::lab::metrics::MetricsLog;
use crate::lab::optim::SgdMomentum;
use crate::lab::tasks;
use crate::model::{ModelParams, ParamVars};
use crate::objectives::{bert_corrupt, prefix_lm_example, TrainingExample};
use crate::tensor::Tape;

/// Mean example loss over a batch on one tape.
fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    batch: &[&TrainingExample],
) -> Result<crate::tensor::Var> {
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let (l, empty) = ex.loss(tape, params, pv)?;
        if !empty {
            parts.push(l);
        }
    }
    if parts.is_empty() {
        return Err(Error::Contract {
            op: "batch_loss",
            detail: "every example in the batch was fully masked".into(),
        });
    }
    let row = tape.concat_rows(&parts)?;
    tape.mean(row)
}

/// One gradient-descent pass over randomly batched examples. Metrics lines
/// carry stage, step, loss, and learning rate. Non-finite losses abort
/// with the diverging step in the error.
pub fn train_examples(
    params: &mut ModelParams,
    examples: &[TrainingExample],
    optim: &OptimConfig,
    stage: &str,
    log: &mut MetricsLog,
) -> Result<()> {
    optim.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract { op: "train_examples", detail: "no examples".into() });
    }
    let mut opt = SgdMomentum::new(optim.rate, optim.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed ^ 0x9e3779b97f4a7c15);
    for step in 0..optim.steps {
        let batch: Vec<&TrainingExample> =
            (0..optim.batch).map(|_| &examples[rng.gen_range(0..examples.len())]).collect();
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, true);
        let loss = match batch_loss(&mut tape, params, &pv, &batch) {
            Ok(l) => l,
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite values in {op}; lower the learning rate"),
                })
            }
            Err(e) => return Err(e),
        };
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {lv}") });
        }
        log.record(json!({"stage": stage, "step": step, "loss": lv, "lr": optim.rate}));
        tape.backward(loss)?;
        opt.step(params, &tape, &pv);
    }
    Ok(())
}

/// Mean loss over a fixed example set, no gradients.
pub fn eval_loss(params: &ModelParams, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract { op: "eval_loss", detail: "no examples".into() });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let pv = params.leaf_all(&mut tape, false);
        let (l, empty) = ex.loss(&mut tape, params, &pv)?;
        if !empty {
            total += tape.value(l).data()[0];
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Contract { op: "eval_loss", detail: "all examples masked".into() });
    }
    Ok(total / counted as f64)
}

/// Materialize the task's training examples under the configured objective.
pub fn build_examples(cfg: &ExperimentConfig) -> Result<Vec<TrainingExample>> {
    let data_seed = cfg.optim.seed ^ 0xd1b54a32d192ed03;
    let sequences: Vec<Vec<usize>> = match cfg.task {
        TaskKind::Memorize { sequences, length } => {
            tasks::memorize_corpus(sequences, length, cfg.model.vocab_size, data_seed)?
        }
        TaskKind::Copy { length, vocab, count } => {
            return tasks::completion_examples(&tasks::copy_dataset(
                length, vocab, count, data_seed,
            )?);
        }
        TaskKind::Passkey { context_len, count } => {
            return tasks::passkey_examples(&tasks::passkey_dataset(
                context_len,
                count,
                data_seed,
            )?);
        }
        TaskKind::PrefOracle { response_len, count, .. } => {
            let prompts = tasks::pref_prompts(8, data_seed);
            let ds = tasks::pref_sft_dataset(&prompts, count, response_len, data_seed)?;
            return tasks::completion_examples(&ds);
        }
    };
    match &cfg.objective {
        ObjectiveKind::CausalLm => tasks::causal_examples(&sequences),
        ObjectiveKind::PrefixLm => sequences
            .iter()
            .map(|s| prefix_lm_example(&s[..s.len() / 2], &s[s.len() / 2..]))
            .collect(),
        ObjectiveKind::Denoise { spec } => {
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed ^ 1);
            sequences
                .iter()
                .map(|s| bert_corrupt(s, cfg.model.vocab_size, spec, &mut rng).map(|(ex, _)| ex))
                .collect()
        }
    }
}

/// Full seeded run: init, train, return the model and its metrics stream.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(ModelParams, MetricsLog)> {
    cfg.validate()?;
    let examples = build_examples(cfg)?;
    let mut params = ModelParams::init(cfg.model.clone(), cfg.optim.seed)?;
    let mut log = MetricsLog::new();
    train_examples(&mut params, &examples, &cfg.optim, "pretrain", &mut log)?;
    Ok((params, log))
}
