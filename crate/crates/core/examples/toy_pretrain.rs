//! Pretrains the toy model on the bundled corpus and prints metrics CSV.
//!
//! `cargo run --release --example toy_pretrain -- [steps] [peak_lr]`

use std::io;

use motif_core::checkpoint::Phase;
use motif_core::corpus::{synth, ByteTokenizer, MixtureSampler, MixtureSchedule, PoolMode};
use motif_core::model::{Model, ModelConfig};
use motif_core::training::{MetricsWriter, OptimizerConfig, TrainOptions, Trainer, WsdSchedule};

fn main() -> motif_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let peak: f64 = args.next().map_or(5e-4, |s| s.parse().expect("peak_lr"));

    let docs = synth::bundled_corpus()?;
    let mut sampler = MixtureSampler::from_documents(
        MixtureSchedule::pretraining(),
        &docs,
        &ByteTokenizer,
        Some(u32::from(b'\n')),
        PoolMode::Cycle,
        128,
        0,
    )?;
    let warmup = (steps / 20).max(1);
    let opt = OptimizerConfig {
        peak_lr: peak,
        warmup_steps: warmup,
        ..Default::default()
    };
    let opts = TrainOptions::new(opt, WsdSchedule::new(warmup, steps * 3 / 4, steps), 8192);
    let mut trainer = Trainer::new(Model::init(ModelConfig::toy(), 0)?, opts, Phase::Pretrain)?;
    let mut out = MetricsWriter::new(io::stdout())?;
    for _ in 0..steps {
        let row = trainer.step(&mut sampler)?;
        out.write(&row)?;
        out.flush()?;
    }
    Ok(())
}
