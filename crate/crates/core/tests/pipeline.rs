//! End-to-end runs through the public API on a tiny model.

use motif_core::checkpoint::{Checkpoint, CheckpointError, Phase};
use motif_core::corpus::{
    exact_dedup, length_filter, minhash_near_dedup, synth, ByteTokenizer, MinHashConfig, MixtureSampler,
    MixtureSchedule, PoolMode,
};
use motif_core::model::{Model, ModelConfig};
use motif_core::training::{
    abf_continuation, dpo_stage, model_from_checkpoint, pair_logprobs, sma_average, train_loop, DpoConfig,
    OptimizerConfig, PreferencePair, TrainOptions, Trainer, WsdSchedule,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        n_layers: 2,
        ffn_dim: 48,
        n_heads: 2,
        n_kv_heads: 2,
        vocab_size: 256,
        max_seq_len: 64,
        ..ModelConfig::toy()
    }
}

fn sampler(seq: usize, seed: u64) -> MixtureSampler {
    let docs = synth::bundled_corpus().unwrap();
    MixtureSampler::from_documents(
        MixtureSchedule::pretraining(),
        &docs,
        &ByteTokenizer,
        Some(u32::from(b'\n')),
        PoolMode::Cycle,
        seq,
        seed,
    )
    .unwrap()
}

fn opts() -> TrainOptions {
    let opt = OptimizerConfig {
        peak_lr: 3e-3,
        warmup_steps: 2,
        ..Default::default()
    };
    let mut o = TrainOptions::new(opt, WsdSchedule::new(2, 8, 10), 256);
    o.micro_batch_seqs = 4;
    o
}

#[test]
fn train_save_load_average_continue() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(tiny(), 3).unwrap();
    let out = train_loop(model, &mut sampler(32, 3), &opts(), 6).unwrap();
    assert_eq!(out.metrics.len(), 6);
    assert_eq!(out.checkpoint.meta.step, 6);
    assert_eq!(out.checkpoint.meta.tokens, 6 * 256);

    let path = dir.path().join("a.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path, &tiny()).unwrap();
    assert_eq!(back, out.checkpoint);

    let other = ModelConfig { n_layers: 1, ..tiny() };
    assert!(matches!(
        Checkpoint::load(&path, &other),
        Err(CheckpointError::FingerprintMismatch { .. })
    ));

    let avg = sma_average(&[back.clone(), back.clone(), back.clone()]).unwrap();
    assert_eq!(avg.params, back.params);
    assert_eq!(avg.meta.phase, Phase::Averaged);

    let (long, start) = abf_continuation(&back, &tiny(), 500_000.0, 128).unwrap();
    assert_eq!(start.param_digest(), back.param_digest());
    let mut trainer = Trainer::new(long, opts(), Phase::Anneal).unwrap();
    let mut s = sampler(128, 4);
    trainer.resume(start, &mut s, false).unwrap();
    let row = trainer.step(&mut s).unwrap();
    assert_eq!(row.step, 7);
    assert!(row.loss.is_finite());
}

#[test]
fn corpus_pipeline_is_idempotent_on_bundled_data() {
    let docs = synth::bundled_corpus().unwrap();
    let run = |docs| {
        let (docs, _) = length_filter(docs, 24, usize::MAX).unwrap();
        let (docs, _) = exact_dedup(docs);
        minhash_near_dedup(docs, &MinHashConfig::default()).unwrap().0
    };
    let once = run(docs.clone());
    assert!(!once.is_empty() && once.len() <= docs.len());
    assert_eq!(run(once.clone()), once);
}

#[test]
fn dpo_from_a_pretrained_checkpoint() {
    let model = Model::init(tiny(), 5).unwrap();
    let ckpt = train_loop(model, &mut sampler(32, 5), &opts(), 2).unwrap().checkpoint;
    let policy = model_from_checkpoint(&ckpt, &tiny()).unwrap();
    let pairs: Vec<PreferencePair> = (0..6u32)
        .map(|k| PreferencePair {
            prompt: vec![40 + k, 41],
            chosen: vec![97, 98, 99],
            rejected: vec![120 + k, 121],
        })
        .collect();
    let before = pair_logprobs(&policy, &pairs).unwrap();
    let cfg = DpoConfig {
        steps: 10,
        pairs_per_step: 6,
        learning_rate: 5e-3,
        ..Default::default()
    };
    let out = dpo_stage(&policy, &pairs, &[], &cfg).unwrap();
    assert_eq!(out.start_digest, ckpt.param_digest());
    assert!(out.best_heldout_loss < std::f64::consts::LN_2);
    let tuned = model_from_checkpoint(&out.best, &tiny()).unwrap();
    let after = pair_logprobs(&tuned, &pairs).unwrap();
    let margin = |lp: &[(f64, f64)]| lp.iter().map(|(c, r)| c - r).sum::<f64>();
    assert!(margin(&after) > margin(&before));
}
