//! The pretraining loop: mixture sampling, micro-batched gradients, clipping,
//! AdamW at the scheduled rate and SMA feedback.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_grad_norm, wsd_lr, OptimizerConfig, SmaConfig, SmaRing, WsdSchedule};
use crate::attention::abf_rescale;
use crate::checkpoint::{AdamState, Checkpoint, CheckpointMeta, Phase};
use crate::corpus::{MixtureSampler, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: WsdSchedule,
    #[serde(default)]
    pub sma: Option<SmaConfig>,
    pub batch_tokens: usize,
    /// Sequences per forward/backward pass; gradients are accumulated.
    #[serde(default = "default_micro")]
    pub micro_batch_seqs: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Steps over which mixture progress runs from 0 to 1; defaults to
    /// `schedule.total`.
    #[serde(default)]
    pub mixture_horizon: Option<u64>,
}

fn default_micro() -> usize {
    16
}

fn default_clip() -> f64 {
    1.0
}

impl TrainOptions {
    pub fn new(optimizer: OptimizerConfig, schedule: WsdSchedule, batch_tokens: usize) -> Self {
        TrainOptions {
            optimizer,
            schedule,
            sma: None,
            batch_tokens,
            micro_batch_seqs: default_micro(),
            grad_clip: default_clip(),
            mixture_horizon: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if let Some(s) = &self.sma {
            s.validate()?;
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens", "must be positive"));
        }
        if self.micro_batch_seqs == 0 {
            return Err(Error::config("micro_batch_seqs", "must be positive"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be finite and > 0"));
        }
        if self.mixture_horizon == Some(0) {
            return Err(Error::config("mixture_horizon", "must be positive"));
        }
        Ok(())
    }

    fn horizon(&self) -> u64 {
        self.mixture_horizon.unwrap_or(self.schedule.total)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Optimizer steps completed.
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Realized token share of each domain group in this step's batch.
    pub ratios: [f64; NUM_GROUPS],
}

pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "tokens",
    "lr",
    "loss",
    "grad_norm",
    "ratio_0",
    "ratio_1",
    "ratio_2",
    "ratio_3",
    "ratio_4",
    "ratio_5",
    "ratio_6",
    "ratio_7",
];

/// Streams metrics rows as CSV.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(METRICS_HEADER)?;
        Ok(MetricsWriter { inner })
    }

    /// Continues an existing log: rows only, no header.
    pub fn appending(writer: W) -> Self {
        MetricsWriter {
            inner: csv::Writer::from_writer(writer),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let mut rec = vec![
            row.step.to_string(),
            row.tokens.to_string(),
            format!("{:e}", row.lr),
            row.loss.to_string(),
            row.grad_norm.to_string(),
        ];
        rec.extend(row.ratios.iter().map(|r| r.to_string()));
        self.inner.write_record(&rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], writer: impl Write) -> Result<()> {
    let mut w = MetricsWriter::new(writer)?;
    for r in rows {
        w.write(r)?;
    }
    w.flush()
}

/// Mean loss over the last `window` rows.
pub fn smoothed_loss(rows: &[MetricsRow], window: usize) -> Option<f64> {
    let tail = &rows[rows.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
}

/// Live training state.
pub struct Trainer {
    model: Model<f32>,
    state: AdamState,
    opts: TrainOptions,
    phase: Phase,
    step: u64,
    tokens: u64,
    ring: Option<SmaRing>,
}

impl Trainer {
    pub fn new(model: Model<f32>, opts: TrainOptions, phase: Phase) -> Result<Self> {
        opts.validate()?;
        model.config.validate()?;
        model.check_layout()?;
        let state = AdamState::zeros_like(&model.params);
        let ring = opts.sma.map(|s| SmaRing::new(s.window));
        Ok(Trainer {
            model,
            state,
            opts,
            phase,
            step: 0,
            tokens: 0,
            ring,
        })
    }

    /// Continues from `ckpt`: parameters, moments, step and token counters.
    /// With `replay`, the sampler is advanced past the batches the
    /// checkpointed run already consumed. The SMA ring starts empty.
    pub fn resume(&mut self, ckpt: Checkpoint, sampler: &mut MixtureSampler, replay: bool) -> Result<()> {
        ckpt.verify(&self.model.config)?;
        if !ckpt.params.same_layout(&self.model.params) {
            return Err(Error::Incompatible(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        let state = match ckpt.optimizer {
            Some(st) if st.m.same_layout(&ckpt.params) && st.v.same_layout(&ckpt.params) => st,
            Some(_) => return Err(Error::Incompatible("optimizer moments do not match parameters".into())),
            None => AdamState::zeros_like(&ckpt.params),
        };
        if replay {
            for s in 0..ckpt.meta.step {
                sampler.sample(self.mixture_progress(s), self.opts.batch_tokens)?;
            }
        }
        self.model.params = ckpt.params;
        self.state = state;
        self.step = ckpt.meta.step;
        self.tokens = ckpt.meta.tokens;
        Ok(())
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.model.params.clone(),
            optimizer: Some(self.state.clone()),
            meta: CheckpointMeta {
                fingerprint: self.model.config.fingerprint(),
                step: self.step,
                tokens: self.tokens,
                phase: self.phase,
            },
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint()
    }

    fn mixture_progress(&self, step: u64) -> f64 {
        (step as f64 / self.opts.horizon() as f64).min(1.0)
    }

    /// Runs one optimizer step. Past `schedule.total` the rate stays at the floor.
    pub fn step(&mut self, sampler: &mut MixtureSampler) -> Result<MetricsRow> {
        let batch = sampler.sample(self.mixture_progress(self.step), self.opts.batch_tokens)?;
        let position = (self.step + 1).min(self.opts.schedule.total);
        let lr = wsd_lr(position as f64, &self.opts.schedule, &self.opts.optimizer)?;

        let seq = batch.seq_len;
        let n = batch.n_seqs;
        // Micro-batches may run on several threads; the reduction below is
        // sequential in batch order, so results do not depend on scheduling.
        let spans: Vec<(usize, usize)> = (0..n)
            .step_by(self.opts.micro_batch_seqs)
            .map(|start| (start, self.opts.micro_batch_seqs.min(n - start)))
            .collect();
        let model = &self.model;
        let parts = spans
            .par_iter()
            .map(|&(start, k)| {
                let span = start * seq..(start + k) * seq;
                model.loss_and_grads(&batch.inputs[span.clone()], &batch.targets[span], k)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut grads: Option<ParamStore<f32>> = None;
        for (&(_, k), (l, g)) in spans.iter().zip(parts) {
            let w = k as f64 / n as f64;
            loss += l * w;
            match &mut grads {
                None => {
                    let mut g = g;
                    if k != n {
                        scale(&mut g, w as f32);
                    }
                    grads = Some(g);
                }
                Some(acc) => axpy(acc, &g, w as f32),
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                last_good: Box::new(self.checkpoint()),
            });
        }
        let mut grads = grads.expect("batch has at least one sequence");
        let grad_norm = clip_grad_norm(&mut grads, self.opts.grad_clip);
        adamw_step(
            &mut self.model.params,
            &grads,
            &mut self.state,
            lr,
            &self.opts.optimizer,
        )?;

        let before = self.tokens;
        self.tokens += (n * seq) as u64;
        self.step += 1;
        if let (Some(ring), Some(sma)) = (&mut self.ring, &self.opts.sma) {
            let spacing = sma.snapshot_spacing();
            if self.tokens / spacing > before / spacing {
                ring.push(self.model.params.clone());
            }
            if self.tokens / sma.interval > before / sma.interval && !ring.is_empty() {
                self.model.params = ring.average()?;
            }
        }
        Ok(MetricsRow {
            step: self.step,
            tokens: self.tokens,
            lr,
            loss,
            grad_norm,
            ratios: batch.realized,
        })
    }
}

fn scale(g: &mut ParamStore<f32>, w: f32) {
    for (_, p) in g.iter_mut() {
        p.data.iter_mut().for_each(|x| *x *= w);
    }
}

fn axpy(acc: &mut ParamStore<f32>, g: &ParamStore<f32>, w: f32) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += w * y;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Trains `model` for `steps` optimizer steps from scratch.
pub fn train_loop(
    model: Model<f32>,
    sampler: &mut MixtureSampler,
    opts: &TrainOptions,
    steps: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, opts.clone(), Phase::Pretrain)?;
    let mut metrics = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        metrics.push(trainer.step(sampler)?);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        metrics,
    })
}

/// Prepares long-context continuation: the configuration gets the new RoPE
/// base and maximum length, the weights are untouched, and the returned
/// checkpoint carries the new fingerprint with the original counters.
pub fn abf_continuation(
    ckpt: &Checkpoint,
    config: &ModelConfig,
    new_theta: f64,
    new_max_len: usize,
) -> Result<(Model<f32>, Checkpoint)> {
    ckpt.verify(config)?;
    let new_config = abf_rescale(config, new_theta, new_max_len)?;
    let model = Model {
        config: new_config,
        params: ckpt.params.clone(),
    };
    model.check_layout()?;
    let mut out = ckpt.clone();
    out.meta.fingerprint = model.config.fingerprint();
    out.meta.phase = Phase::Anneal;
    Ok((model, out))
}
