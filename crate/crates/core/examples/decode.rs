//! Caption validation scenes with greedy and beam decoding from a
//! checkpoint, or from a briefly caption-trained model when none is given.
//!
//! Usage: `cargo run --release --example decode [checkpoint]`

use vlp::data::WorldConfig;
use vlp::downstream::{beam_search, finetune, greedy, init_model, DecodeConfig, FinetuneConfig, Task, TaskData};
use vlp::study::StudyData;
use vlp::train::{AdamConfig, Checkpoint};

fn main() -> vlp::Result<()> {
    let data = StudyData::generate(5, &WorldConfig::default(), 0, 200, 5)?;
    let config = data.toy_config();
    let ckpt = std::env::args().nth(1).map(|p| Checkpoint::load(p.as_ref())).transpose()?;
    let mut model = init_model(&config, ckpt.as_ref(), 0)?;
    if ckpt.is_none() {
        let fc = FinetuneConfig { steps: 600, adam: AdamConfig::with_lr(3e-3), ..FinetuneConfig::default() };
        let td = TaskData { train: &data.train, val: &[], vocab: &data.vocab };
        finetune(Task::Caption, &mut model, &td, &fc)?;
    }
    let words = |ids: &[usize]| data.vocab.decode(ids).map(|t| t.join(" "));
    for ex in &data.val {
        let g = greedy(&model, &ex.regions, 12)?;
        let b = beam_search(&model, &ex.regions, &DecodeConfig::beam(4, 12))?;
        println!("reference {}", words(ex.caption.content())?);
        println!("  greedy  {} (log p {:.3})", words(&g.tokens)?, g.log_prob);
        println!("  beam 4  {} (log p {:.3})", words(&b.tokens)?, b.log_prob);
    }
    Ok(())
}
