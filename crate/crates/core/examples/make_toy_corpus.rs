//! Regenerates `data/toy_corpus.jsonl`:
//! `cargo run -p motif-core --example make_toy_corpus > crates/core/data/toy_corpus.jsonl`

use motif_core::corpus::{synth, write_jsonl};

fn main() -> motif_core::Result<()> {
    let docs = synth::toy_corpus(synth::BUNDLED_SEED);
    write_jsonl(std::io::stdout().lock(), &docs)
}
