//! Generate a few micro-world scenes, build the vocabulary and round-trip
//! the corpus through its JSONL file.
//!
//! Usage: `cargo run --example world [seed] [scenes]`

use vlp::data::{caption_slots, generate_world, read_corpus, write_corpus, Vocab, WorldConfig};

fn main() -> vlp::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let corpus = generate_world(seed, &WorldConfig { n_scenes: n, ..WorldConfig::default() })?;
    for s in &corpus.scenes {
        println!("scene {}: {}", s.scene_id, s.caption.join(" "));
        for r in &s.regions {
            let b = r.bbox;
            println!("  [{:.2} {:.2} {:.2} {:.2}] {}", b[0], b[1], b[2], b[3], r.phrase.join(" "));
        }
        println!("  slots {:?}", caption_slots(&s.caption));
        println!("  Q: {}  A: {:?}", s.qa.question.join(" "), s.qa.answers);
    }
    let vocab = Vocab::build(&corpus)?;
    println!("vocab {} tokens: {}", vocab.len(), vocab.tokens().join(" "));
    println!("answers {:?}", corpus.answer_set());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&corpus, &path)?;
    assert_eq!(read_corpus(&path)?, corpus);
    println!("round trip ok ({} bytes)", std::fs::metadata(&path)?.len());
    Ok(())
}
