//! Generate the two synthetic languages, split them and write the corpus
//! text format.
//!
//! ```bash
//! cargo run --release --example generate_corpus -- /tmp/bilingual.txt
//! ```

use neuronmoe::corpus::{bilingual_specs, gen_corpus, load_corpus, save_corpus, split_corpus};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bilingual.txt".into());
    let vocab = 128;
    let corpus = gen_corpus(&bilingual_specs(vocab), vocab, 200, 24, 7)?;
    for spec in &corpus.languages {
        println!("language {} uses tokens {:?}", spec.id, spec.range());
    }
    for s in corpus.samples.iter().take(4) {
        println!("  [{}] {:?}", s.language, &s.tokens[..12]);
    }

    let (train, eval) = split_corpus(&corpus, 0.9, 7)?;
    println!("train {:?}, eval {:?}", train.count_by_language(), eval.count_by_language());

    save_corpus(&corpus, out.as_ref())?;
    let back = load_corpus(out.as_ref())?;
    assert_eq!(back, corpus);
    println!("wrote {} samples ({} tokens) to {out}", back.samples.len(), back.token_count());
    Ok(())
}
