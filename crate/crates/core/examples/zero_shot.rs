//! Retrieval recall of a pre-trained checkpoint before any fine-tuning.
//!
//! Usage: `cargo run --release --example zero_shot <checkpoint>`

use vlp::data::WorldConfig;
use vlp::downstream::{eval_retrieval, init_model};
use vlp::study::StudyData;
use vlp::train::Checkpoint;

fn main() -> vlp::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let ckpt = Checkpoint::load(path.as_ref())?;
    let data = StudyData::generate(2024, &WorldConfig::default(), 2000, 200, 200)?;
    let model = init_model(&data.toy_config(), Some(&ckpt), 0)?;
    println!("{:?}", eval_retrieval(&model, &data.val, 1)?);
    Ok(())
}
