//! Draw one pre-training batch, show its mask plans and print the five
//! proxy-task losses, with and without each task.

use vlp::data::{encode_examples, generate_world, BatchMode, BatchStream, Vocab, WorldConfig};
use vlp::model::{Model, ModelConfig};
use vlp::proxy::{overall_loss, ProxyConfig};
use vlp::tensor::Graph;

fn main() -> vlp::Result<()> {
    let corpus = generate_world(11, &WorldConfig { n_scenes: 6, ..WorldConfig::default() })?;
    let vocab = Vocab::build(&corpus)?;
    let examples = encode_examples(&corpus, &vocab, &corpus.answer_set())?;
    let model: Model<f32> = Model::new(ModelConfig::toy(vocab.len(), 5, WorldConfig::default().region_dim), 0)?;
    let cfg = ProxyConfig::default();
    let mut stream = BatchStream::new(examples.len(), 4, BatchMode::Pretrain, 0)?;
    let batch = stream.next_batch(&examples, &cfg.masking, vocab.len(), None)?;
    for (k, &i) in batch.indices.iter().enumerate() {
        let p = &batch.plans[k];
        println!(
            "scene {i}: regions {:?} words {:?} actions {:?} negative {:?}",
            p.masked_regions, p.masked_words, p.word_actions, batch.negatives[k]
        );
    }
    let run = |cfg: &ProxyConfig| -> vlp::Result<_> {
        let mut g = Graph::new();
        Ok(overall_loss(&mut g, &model, &examples, &batch, cfg)?.values(&g))
    };
    println!("all tasks   {:?}", run(&cfg)?);
    for (name, off) in ["mlm", "moc", "mrpg", "ism", "msg"].iter().zip(0..) {
        let mut c = cfg.clone();
        *[&mut c.enable_mlm, &mut c.enable_moc, &mut c.enable_mrpg, &mut c.enable_ism, &mut c.enable_msg][off] = false;
        println!("without {name:<4} {:?}", run(&c)?);
    }
    Ok(())
}
