//! Time a handful of pre-training steps at the default toy scale.

use std::time::Instant;

use vlp::data::{encode_examples, generate_world, Vocab, WorldConfig};
use vlp::model::{Model, ModelConfig};
use vlp::train::{PretrainConfig, Trainer};

fn main() -> vlp::Result<()> {
    let wc = WorldConfig::default();
    let corpus = generate_world(1, &wc)?;
    let vocab = Vocab::build(&corpus)?;
    let examples = encode_examples(&corpus, &vocab, &corpus.answer_set())?;
    let mc = ModelConfig::toy(vocab.len(), wc.shapes.len(), wc.region_dim);
    let model = Model::new(mc, 1)?;
    println!("vocab {} params {}", vocab.len(), model.params.num_scalars());
    let cfg = PretrainConfig { steps: 20, ..PretrainConfig::default() };
    let mut t = Trainer::new(model, examples.len(), cfg)?;
    let t0 = Instant::now();
    let rows = t.run(&examples, |_, _| Ok(()))?;
    let dt = t0.elapsed().as_secs_f64();
    println!("{:.1} ms/step; loss {:.3} -> {:.3}", 1e3 * dt / rows.len() as f64, rows[0].loss.total, rows.last().unwrap().loss.total);
    Ok(())
}
