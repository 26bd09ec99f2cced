//! Pre-train for a few steps, checkpoint halfway, resume from the file and
//! check that the two trajectories agree bit for bit.

use vlp::data::{encode_examples, generate_world, Vocab, WorldConfig};
use vlp::model::{Model, ModelConfig};
use vlp::train::{Checkpoint, PretrainConfig, Trainer};

fn main() -> vlp::Result<()> {
    let corpus = generate_world(3, &WorldConfig { n_scenes: 24, ..WorldConfig::default() })?;
    let vocab = Vocab::build(&corpus)?;
    let examples = encode_examples(&corpus, &vocab, &corpus.answer_set())?;
    let cfg = PretrainConfig { steps: 12, batch_size: 4, ..PretrainConfig::default() };
    let model = Model::new(ModelConfig::toy(vocab.len(), 5, WorldConfig::default().region_dim), 1)?;

    let dir = tempfile::tempdir()?;
    let mid = dir.path().join("step-6.bin");
    let mut full = Trainer::new(model, examples.len(), cfg.clone())?;
    let rows = full.run(&examples, |row, t| {
        if row.step == 5 {
            t.checkpoint().save(&mid)?;
        }
        Ok(())
    })?;
    let mut resumed = Trainer::resume(&Checkpoint::load(&mid)?, examples.len(), cfg)?;
    let tail = resumed.run(&examples, |_, _| Ok(()))?;
    for (a, b) in rows[6..].iter().zip(&tail) {
        let same = a.loss.total.to_bits() == b.loss.total.to_bits();
        println!("step {:2} {:.6} {:.6} {}", a.step, a.loss.total, b.loss.total, if same { "=" } else { "DIFFERS" });
    }
    let same = full.checkpoint().to_bytes()? == resumed.checkpoint().to_bytes()?;
    println!("final checkpoints identical: {same}");
    Ok(())
}
