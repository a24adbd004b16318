//! Direct preference optimization against a frozen reference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_grad_norm, OptimizerConfig};
use crate::checkpoint::{AdamState, Checkpoint, CheckpointMeta, Phase};
use crate::error::{Error, Result};
use crate::model::{forward_bound, Bound, Model, ModelConfig};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub pairs_per_step: usize,
    /// Held-out evaluation period in steps; the last step is always evaluated.
    pub eval_every: u64,
    pub grad_clip: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 1e-3,
            steps: 50,
            pairs_per_step: 8,
            eval_every: 10,
            grad_clip: 1.0,
            optimizer: OptimizerConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("dpo.beta", "must be finite and > 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("dpo.learning_rate", "must be finite and >= 0"));
        }
        if self.pairs_per_step == 0 || self.eval_every == 0 {
            return Err(Error::config("dpo", "pairs_per_step and eval_every must be positive"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("dpo.grad_clip", "must be finite and > 0"));
        }
        self.optimizer.validate()
    }
}

/// `−log σ(β·[(pol_c − ref_c) − (pol_r − ref_r)])`, averaged over pairs.
/// Policy terms are `[n]` tensors; reference terms are constants.
pub fn dpo_loss<T: Element>(
    policy_chosen: &Tensor<T>,
    policy_rejected: &Tensor<T>,
    ref_chosen: &[f64],
    ref_rejected: &[f64],
    beta: f64,
) -> Result<Tensor<T>> {
    let n = policy_chosen.numel();
    if policy_rejected.numel() != n || ref_chosen.len() != n || ref_rejected.len() != n || n == 0 {
        return Err(Error::config(
            "dpo_loss",
            "log-probability vectors must be non-empty and equally long",
        ));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Domain(format!("beta {beta} must be finite and > 0")));
    }
    if ref_chosen.iter().chain(ref_rejected).any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite reference log-probability".into()));
    }
    let rc = Tensor::from_vec(ref_chosen.iter().map(|&x| T::c(x)).collect(), &[n])?;
    let rr = Tensor::from_vec(ref_rejected.iter().map(|&x| T::c(x)).collect(), &[n])?;
    let margin = policy_chosen
        .reshape(&[n])?
        .sub(&rc)?
        .sub(&policy_rejected.reshape(&[n])?.sub(&rr)?)?;
    Ok(margin.mul_scalar(beta).log_sigmoid().mean().neg())
}

/// Summed log-likelihood of `response` given `prompt`, as a one-element tensor.
pub fn sequence_logprob<T: Element>(
    config: &ModelConfig,
    params: &Bound<T>,
    prompt: &[u32],
    response: &[u32],
) -> Result<Tensor<T>> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Empty("prompt and response must both be non-empty".into()));
    }
    let tokens: Vec<u32> = prompt.iter().chain(response).copied().collect();
    let inputs = &tokens[..tokens.len() - 1];
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let logits = forward_bound(config, params, inputs, 1, 0)?;
    let lp = logits.log_softmax_gather(&targets)?;
    Ok(lp.narrow(0, prompt.len() - 1, response.len())?.sum())
}

/// `(chosen, rejected)` sequence log-probabilities under `model`.
pub fn pair_logprobs(model: &Model<f32>, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    let bound = model.params.bind(false);
    pairs
        .iter()
        .map(|p| {
            let c = sequence_logprob(&model.config, &bound, &p.prompt, &p.chosen)?;
            let r = sequence_logprob(&model.config, &bound, &p.prompt, &p.rejected)?;
            Ok((c.item().as_f64(), r.item().as_f64()))
        })
        .collect()
}

/// Mean of `(pol_c − ref_c) − (pol_r − ref_r)` over `pairs`.
pub fn mean_margin(model: &Model<f32>, pairs: &[PreferencePair], reference: &[(f64, f64)]) -> Result<f64> {
    let pol = pair_logprobs(model, pairs)?;
    let n = pol.len().max(1) as f64;
    Ok(pol
        .iter()
        .zip(reference)
        .map(|(&(pc, pr), &(rc, rr))| (pc - rc) - (pr - rr))
        .sum::<f64>()
        / n)
}

/// Mean DPO loss of `model` on `pairs`, without gradients.
pub fn evaluate_dpo(model: &Model<f32>, pairs: &[PreferencePair], reference: &[(f64, f64)], beta: f64) -> Result<f64> {
    let pol = pair_logprobs(model, pairs)?;
    let pc = Tensor::<f64>::from_vec(pol.iter().map(|p| p.0).collect(), &[pol.len()])?;
    let pr = Tensor::<f64>::from_vec(pol.iter().map(|p| p.1).collect(), &[pol.len()])?;
    let (rc, rr): (Vec<f64>, Vec<f64>) = reference.iter().copied().unzip();
    Ok(dpo_loss(&pc, &pr, &rc, &rr, beta)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoRecord {
    pub step: u64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub final_checkpoint: Checkpoint,
    /// Lowest held-out loss seen, including the starting weights.
    pub best: Checkpoint,
    pub best_heldout_loss: f64,
    /// Parameter digest of the weights the stage started from.
    pub start_digest: u64,
    pub history: Vec<DpoRecord>,
}

/// One DPO stage. The reference is the policy as passed in, frozen; its
/// log-probabilities are computed once up front. When `heldout` is empty
/// the training pairs are used for selection.
pub fn dpo_stage(
    policy: &Model<f32>,
    train: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("DPO stage has no preference pairs".into()));
    }
    let heldout = if heldout.is_empty() { train } else { heldout };
    let ref_train = pair_logprobs(policy, train)?;
    let ref_held = pair_logprobs(policy, heldout)?;

    let mut model = policy.clone();
    let mut state = AdamState::zeros_like(&model.params);
    let checkpoint = |m: &Model<f32>, st: &AdamState, step: u64| Checkpoint {
        params: m.params.clone(),
        optimizer: Some(st.clone()),
        meta: CheckpointMeta {
            fingerprint: m.config.fingerprint(),
            step,
            tokens: 0,
            phase: Phase::Dpo,
        },
    };
    let start = checkpoint(&model, &state, 0);
    let start_digest = start.param_digest();
    let mut best = start;
    let mut best_loss = evaluate_dpo(&model, heldout, &ref_held, cfg.beta)?;
    let mut history = Vec::with_capacity(cfg.steps as usize);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(cfg.pairs_per_step);
        while picked.len() < cfg.pairs_per_step.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let bound = model.params.bind(true);
        let mut chosen = Vec::with_capacity(picked.len());
        let mut rejected = Vec::with_capacity(picked.len());
        for &i in &picked {
            let p = &train[i];
            chosen.push(sequence_logprob(&model.config, &bound, &p.prompt, &p.chosen)?);
            rejected.push(sequence_logprob(&model.config, &bound, &p.prompt, &p.rejected)?);
        }
        let stack = |xs: &[Tensor<f32>]| -> Result<Tensor<f32>> {
            // Sum of one-hot scaled scalars keeps every term on the tape.
            let n = xs.len();
            let mut acc: Option<Tensor<f32>> = None;
            for (k, x) in xs.iter().enumerate() {
                let mut basis = vec![0.0f32; n];
                basis[k] = 1.0;
                let e = Tensor::from_vec(basis, &[n])?.scale_by(x)?;
                acc = Some(match acc {
                    None => e,
                    Some(a) => a.add(&e)?,
                });
            }
            Ok(acc.expect("at least one pair"))
        };
        let rc: Vec<f64> = picked.iter().map(|&i| ref_train[i].0).collect();
        let rr: Vec<f64> = picked.iter().map(|&i| ref_train[i].1).collect();
        let loss = dpo_loss(&stack(&chosen)?, &stack(&rejected)?, &rc, &rr, cfg.beta)?;
        let train_loss = loss.item().as_f64();
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step - 1,
                last_good: Box::new(checkpoint(&model, &state, step - 1)),
            });
        }
        loss.backward()?;
        let mut grads = bound.grads();
        drop(bound);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adamw_step(&mut model.params, &grads, &mut state, cfg.learning_rate, &cfg.optimizer)?;

        let heldout_loss = if step % cfg.eval_every == 0 || step == cfg.steps {
            let l = evaluate_dpo(&model, heldout, &ref_held, cfg.beta)?;
            if l < best_loss {
                best_loss = l;
                best = checkpoint(&model, &state, step);
            }
            Some(l)
        } else {
            None
        };
        history.push(DpoRecord {
            step,
            train_loss,
            heldout_loss,
        });
    }
    Ok(DpoOutcome {
        final_checkpoint: checkpoint(&model, &state, cfg.steps),
        best,
        best_heldout_loss: best_loss,
        start_digest,
        history,
    })
}

/// Preference data and settings for one stage of a curriculum.
#[derive(Debug, Clone)]
pub struct DpoStageSpec<'a> {
    pub train: &'a [PreferencePair],
    pub heldout: &'a [PreferencePair],
    pub config: DpoConfig,
}

/// Runs stages in order; each stage after the first starts from the best
/// checkpoint of the one before, after checking its config fingerprint.
pub fn dpo_chain(policy: &Model<f32>, stages: &[DpoStageSpec<'_>]) -> Result<Vec<DpoOutcome>> {
    let mut outcomes: Vec<DpoOutcome> = Vec::with_capacity(stages.len());
    let mut current = policy.clone();
    for spec in stages {
        if let Some(prev) = outcomes.last() {
            current = model_from_checkpoint(&prev.best, &policy.config)?;
        }
        outcomes.push(dpo_stage(&current, spec.train, spec.heldout, &spec.config)?);
    }
    Ok(outcomes)
}

/// A model built from `ckpt` after verifying it belongs to `config`.
pub fn model_from_checkpoint(ckpt: &Checkpoint, config: &ModelConfig) -> Result<Model<f32>> {
    ckpt.verify(config)?;
    let model = Model {
        config: config.clone(),
        params: ckpt.params.clone(),
    };
    model.check_layout()?;
    Ok(model)
}
