use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use motif_core::attention::abf_rescale;
use motif_core::checkpoint::{Checkpoint, Phase};
use motif_core::corpus::{
    exact_dedup, length_filter, minhash_near_dedup, read_jsonl, synth, write_jsonl, ByteTokenizer, Document,
    MixtureSampler, PoolMode, Tokenizer,
};
use motif_core::model::{count_parameters, Model, ModelConfig};
use motif_core::training::{
    abf_continuation, dpo_chain, model_from_checkpoint, sma_average, DpoStageSpec, MetricsWriter, PreferencePair,
    TrainOptions, Trainer,
};
use motif_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{Command, Common};

const DEFAULT_OUT: &str = "motif-out";
const SEPARATOR: u32 = b'\n' as u32;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Preprocess { common } => preprocess(&common),
        Command::Train { common, resume, steps } => train(&common, resume.as_deref(), steps),
        Command::Anneal {
            common,
            checkpoint,
            steps,
        } => anneal(&common, &checkpoint, steps),
        Command::Average {
            checkpoints,
            out,
            config,
        } => average(&checkpoints, &out, config.as_deref()),
        Command::Dpo { common, checkpoint } => dpo(&common, &checkpoint),
        Command::Sample {
            config,
            checkpoint,
            prompt,
            tokens,
            temperature,
            seed,
        } => sample(&config, &checkpoint, &prompt, tokens, temperature, seed),
        Command::CountParams { config, preset } => count_params(config.as_deref(), preset.as_deref()),
    }
}

/// A loaded configuration with the seed override applied and the output
/// directory created.
struct Run {
    cfg: RunConfig,
    config_path: PathBuf,
    out: PathBuf,
}

impl Run {
    fn open(common: &Common) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.paths.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&out).map_err(|e| CliError::file(&out, e))?;
        eprintln!("seed = {}", cfg.seed);
        let run = Run {
            cfg,
            config_path: common.config.clone(),
            out,
        };
        let path = run.out.join("run_config.json");
        let text = serde_json::to_string_pretty(&run.cfg).map_err(Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::file(&path, e))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn config_error(&self, msg: impl Into<String>) -> CliError {
        CliError::Config {
            path: self.config_path.clone(),
            msg: msg.into(),
        }
    }

    fn corpus(&self) -> Result<Vec<Document>, CliError> {
        match &self.cfg.paths.corpus {
            Some(p) => read_corpus(p),
            None => Ok(synth::bundled_corpus()?),
        }
    }

    fn sampler(&self, seq_len: usize) -> Result<MixtureSampler, CliError> {
        let vocab = self.cfg.model.vocab_size;
        if vocab < ByteTokenizer.vocab_size() {
            return Err(self.config_error(format!(
                "model.vocab_size {vocab} cannot hold the {} byte tokens",
                ByteTokenizer.vocab_size()
            )));
        }
        let docs = self.corpus()?;
        Ok(MixtureSampler::from_documents(
            self.cfg.mixture.clone(),
            &docs,
            &ByteTokenizer,
            Some(SEPARATOR),
            PoolMode::Cycle,
            seq_len,
            self.cfg.seed,
        )?)
    }

    /// Configurations a checkpoint of this run may carry: the base model
    /// and, when an anneal section exists, its long-context variant.
    fn candidate_configs(&self) -> Result<Vec<ModelConfig>, CliError> {
        candidate_configs(&self.cfg)
    }
}

fn candidate_configs(cfg: &RunConfig) -> Result<Vec<ModelConfig>, CliError> {
    let mut out = vec![cfg.model.clone()];
    if let Some(a) = &cfg.anneal {
        out.push(abf_rescale(&cfg.model, a.rope_theta, a.max_seq_len)?);
    }
    Ok(out)
}

/// Builds a model from `ckpt` using whichever candidate config it was saved with.
fn model_for(ckpt: &Checkpoint, candidates: &[ModelConfig]) -> Result<Model<f32>, CliError> {
    let config = candidates
        .iter()
        .find(|c| c.fingerprint() == ckpt.meta.fingerprint)
        .unwrap_or(&candidates[0]);
    Ok(model_from_checkpoint(ckpt, config)?)
}

fn read_corpus(path: &Path) -> Result<Vec<Document>, CliError> {
    let f = File::open(path).map_err(|e| CliError::file(path, e))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load_unchecked(path).map_err(|e| CliError::checkpoint(path, e))
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ckpt.save(path).map_err(|e| CliError::checkpoint(path, e))?;
    eprintln!(
        "wrote {} (step {}, digest {:#018x})",
        path.display(),
        ckpt.meta.step,
        ckpt.param_digest()
    );
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::file(path, e))
}

fn preprocess(common: &Common) -> Result<(), CliError> {
    let run = Run::open(common)?;
    let p = &run.cfg.preprocess;
    let docs = run.corpus()?;
    let input = docs.len();
    let (docs, filtered) = length_filter(docs, p.min_tokens, p.max_tokens)?;
    let (docs, exact) = exact_dedup(docs);
    let (docs, near) = minhash_near_dedup(docs, &p.minhash)?;

    let corpus_path = run.path("corpus.jsonl");
    let mut w = create(&corpus_path)?;
    write_jsonl(&mut w, &docs)?;
    w.flush().map_err(|e| CliError::file(&corpus_path, e))?;
    let pairs_path = run.path("near_duplicates.csv");
    near.write_csv(create(&pairs_path)?)?;

    let summary = serde_json::json!({
        "input": input,
        "dropped_short": filtered.dropped_short,
        "dropped_long": filtered.dropped_long,
        "exact_duplicates": exact,
        "near_duplicates": near.removed,
        "lsh_candidates": near.candidates,
        "empty_shingle_docs": near.flagged_empty.len(),
        "kept": docs.len(),
    });
    println!("{summary}");
    Ok(())
}

/// Appends to an existing metrics file when continuing a run, otherwise
/// starts a fresh one with a header.
fn metrics_writer(path: &Path, append: bool) -> Result<MetricsWriter<BufWriter<File>>, CliError> {
    let has_rows = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    if has_rows {
        let f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| CliError::file(path, e))?;
        Ok(MetricsWriter::appending(BufWriter::new(f)))
    } else {
        Ok(MetricsWriter::new(create(path)?)?)
    }
}

/// Runs `steps` steps, checkpointing every `every` steps (0 disables).
/// A non-finite loss leaves `last_good.ckpt` behind.
fn drive(
    run: &Run,
    trainer: &mut Trainer,
    sampler: &mut MixtureSampler,
    metrics: &mut MetricsWriter<BufWriter<File>>,
    steps: u64,
    every: u64,
    prefix: &str,
) -> Result<(), CliError> {
    for _ in 0..steps {
        let row = match trainer.step(sampler) {
            Ok(row) => row,
            Err(Error::NonFiniteLoss { step, last_good }) => {
                metrics.flush()?;
                save_checkpoint(&last_good, &run.path("last_good.ckpt"))?;
                return Err(Error::NonFiniteLoss { step, last_good }.into());
            }
            Err(e) => return Err(e.into()),
        };
        metrics.write(&row)?;
        if every > 0 && row.step % every == 0 {
            metrics.flush()?;
            save_checkpoint(
                &trainer.checkpoint(),
                &run.path(&format!("{prefix}_step{:07}.ckpt", row.step)),
            )?;
        }
    }
    metrics.flush()?;
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>, steps: Option<u64>) -> Result<(), CliError> {
    let run = Run::open(common)?;
    let cfg = &run.cfg;
    let mut sampler = run.sampler(cfg.training.seq_len)?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train_options(), Phase::Pretrain)?;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        trainer.resume(ckpt, &mut sampler, true)?;
        eprintln!("resumed at step {} ({} tokens)", trainer.step_count(), trainer.tokens());
    }
    let metrics_path = cfg.paths.metrics.clone().unwrap_or_else(|| run.path("metrics.csv"));
    let mut metrics = metrics_writer(&metrics_path, resume.is_some())?;
    let steps = steps.unwrap_or(cfg.training.steps);
    drive(
        &run,
        &mut trainer,
        &mut sampler,
        &mut metrics,
        steps,
        cfg.training.checkpoint_every,
        "train",
    )?;
    save_checkpoint(&trainer.into_checkpoint(), &run.path("final.ckpt"))
}

fn anneal(common: &Common, input: &Path, steps: Option<u64>) -> Result<(), CliError> {
    let run = Run::open(common)?;
    let cfg = &run.cfg;
    let Some(a) = &cfg.anneal else {
        return Err(run.config_error("the anneal command needs an \"anneal\" section"));
    };
    let ckpt = load_checkpoint(input)?;
    let (model, start) = abf_continuation(&ckpt, &cfg.model, a.rope_theta, a.max_seq_len)?;
    save_checkpoint(&start, &run.path("anneal_start.ckpt"))?;

    let opts = TrainOptions {
        micro_batch_seqs: a.micro_batch_seqs.unwrap_or(cfg.training.micro_batch_seqs),
        ..cfg.train_options()
    };
    let mut sampler = run.sampler(a.seq_len)?;
    let mut trainer = Trainer::new(model, opts, Phase::Anneal)?;
    // The sampler stream of the pretraining run used a different sequence
    // length, so there is nothing to replay.
    trainer.resume(start, &mut sampler, false)?;
    let mut metrics = metrics_writer(&run.path("anneal_metrics.csv"), false)?;
    drive(
        &run,
        &mut trainer,
        &mut sampler,
        &mut metrics,
        steps.unwrap_or(a.steps),
        cfg.training.checkpoint_every,
        "anneal",
    )?;
    save_checkpoint(&trainer.into_checkpoint(), &run.path("anneal.ckpt"))
}

fn average(inputs: &[PathBuf], out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let ckpts = inputs
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(path) = config {
        let cfg = RunConfig::load(path)?;
        let candidates = candidate_configs(&cfg)?;
        for c in &ckpts {
            model_for(c, &candidates)?;
        }
    }
    let avg = sma_average(&ckpts)?;
    fs::create_dir_all(out).map_err(|e| CliError::file(out, e))?;
    save_checkpoint(&avg, &out.join("average.ckpt"))
}

fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, CliError> {
    let f = File::open(path).map_err(|e| CliError::file(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line)
            .map_err(|e| Error::Domain(format!("{} line {}: {e}", path.display(), i + 1)))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

fn dpo(common: &Common, input: &Path) -> Result<(), CliError> {
    let run = Run::open(common)?;
    let Some(section) = &run.cfg.dpo else {
        return Err(run.config_error("the dpo command needs a \"dpo\" section"));
    };
    let policy = model_for(&load_checkpoint(input)?, &run.candidate_configs()?)?;
    let mut data = Vec::with_capacity(section.stages.len());
    for s in &section.stages {
        let train = read_pairs(&s.train)?;
        let heldout = match &s.heldout {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        data.push((train, heldout));
    }
    let specs: Vec<DpoStageSpec<'_>> = section
        .stages
        .iter()
        .zip(&data)
        .map(|(s, (train, heldout))| DpoStageSpec {
            train,
            heldout,
            config: s.config.clone(),
        })
        .collect();
    let outcomes = dpo_chain(&policy, &specs)?;

    let history_path = run.path("dpo_history.csv");
    let mut w = csv::Writer::from_writer(create(&history_path)?);
    w.write_record(["stage", "step", "train_loss", "heldout_loss"])
        .map_err(Error::from)?;
    for (k, o) in outcomes.iter().enumerate() {
        for r in &o.history {
            let heldout = r.heldout_loss.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([k.to_string(), r.step.to_string(), r.train_loss.to_string(), heldout])
                .map_err(Error::from)?;
        }
        save_checkpoint(&o.best, &run.path(&format!("dpo_stage{k}_best.ckpt")))?;
        save_checkpoint(&o.final_checkpoint, &run.path(&format!("dpo_stage{k}_final.ckpt")))?;
        println!("stage {k}: best held-out loss {:.6}", o.best_heldout_loss);
    }
    w.flush().map_err(|e| CliError::file(&history_path, e))?;
    let last = outcomes.last().expect("at least one stage");
    save_checkpoint(&last.best, &run.path("dpo.ckpt"))
}

/// Autoregressive byte generation. `temperature == 0` takes the argmax;
/// otherwise tokens are drawn from `softmax(logits / temperature)`. The
/// context is truncated to the model's maximum length.
pub fn generate(
    model: &Model<f32>,
    prompt: &[u32],
    n: usize,
    temperature: f64,
    seed: u64,
) -> motif_core::Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size;
    let mut seq = prompt.to_vec();
    if seq.is_empty() {
        seq.push(SEPARATOR);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let start = seq.len().saturating_sub(model.config.max_seq_len);
        let logits = model.forward(&seq[start..])?.to_vec();
        let last = &logits[logits.len() - vocab..];
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            draw(last, temperature, rng.random::<f64>())
        };
        seq.push(next as u32);
        out.push(next as u32);
    }
    Ok(out)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw(logits: &[f32], temperature: f64, u: f64) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let w: Vec<f64> = logits
        .iter()
        .map(|&x| ((f64::from(x) - max) / temperature).exp())
        .collect();
    let mut target = u * w.iter().sum::<f64>();
    for (i, &wi) in w.iter().enumerate() {
        if target < wi {
            return i;
        }
        target -= wi;
    }
    w.len() - 1
}

fn sample(config: &Path, input: &Path, prompt: &str, n: usize, temperature: f64, seed: u64) -> Result<(), CliError> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(CliError::Usage(format!(
            "--temperature {temperature} must be finite and >= 0"
        )));
    }
    let cfg = RunConfig::load(config)?;
    let model = model_for(&load_checkpoint(input)?, &candidate_configs(&cfg)?)?;
    let ids = generate(&model, &ByteTokenizer.encode(prompt), n, temperature, seed)?;
    println!("{prompt}{}", ByteTokenizer.decode(&ids));
    Ok(())
}

fn count_params(config: Option<&Path>, preset: Option<&str>) -> Result<(), CliError> {
    let model = match (config, preset) {
        (Some(path), _) => RunConfig::load(path)?.model,
        (None, None | Some("motif-2.6b")) => ModelConfig::motif_2_6b(),
        (None, Some("toy")) => ModelConfig::toy(),
        (None, Some(other)) => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?} (expected motif-2.6b or toy)"
            )))
        }
    };
    model.validate()?;
    let c = count_parameters(&model);
    println!("total {}", c.total);
    println!("non_embedding {}", c.non_embedding);
    println!("embedding {}", c.total - c.non_embedding);
    println!("total_billions {:.3}", c.total as f64 / 1e9);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_follows_cumulative_weights() {
        let l = [0.0f32, (3.0f32).ln()];
        assert_eq!(draw(&l, 1.0, 0.2), 0);
        assert_eq!(draw(&l, 1.0, 0.3), 1);
        assert_eq!(draw(&l, 1.0, 0.999), 1);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), 1);
    }
}
