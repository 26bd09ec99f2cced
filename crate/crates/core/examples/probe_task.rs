//! Fine-tune one task from scratch and print the loss curve and metrics.
//!
//! Usage: `cargo run --release --example probe_task <task> [steps] [lr] [batch]`

use vlp::data::WorldConfig;
use vlp::downstream::{evaluate, finetune, init_model, FinetuneConfig, Task};
use vlp::study::StudyData;
use vlp::train::AdamConfig;

fn main() -> vlp::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let task: Task = a.get(1).map_or("retrieval", |s| s.as_str()).parse()?;
    let steps: u64 = a.get(2).map_or(300, |s| s.parse().unwrap());
    let lr: f64 = a.get(3).map_or(1e-3, |s| s.parse().unwrap());
    let batch: usize = a.get(4).map_or(16, |s| s.parse().unwrap());
    let data = StudyData::generate(2024, &WorldConfig::default(), 2000, 200, 200)?;
    let config = data.toy_config();
    let ckpt = std::env::var("CKPT").ok().map(|p| vlp::train::Checkpoint::load(std::path::Path::new(&p))).transpose()?;
    let mut model = init_model(&config, ckpt.as_ref(), 100)?;
    let cfg = FinetuneConfig {
        steps,
        batch_size: batch,
        adam: AdamConfig::with_lr(lr),
        eval_every: (steps / 5).max(1),
        ..FinetuneConfig::default()
    };
    let rows = finetune(task, &mut model, &data.task_data(), &cfg)?;
    for r in rows.iter().filter(|r| !r.metrics.is_empty() || r.step % 25 == 0) {
        println!("{}", r.csv(task));
    }
    if task == Task::Vqa {
        let pred = vlp::downstream::vqa_predict(&model, &data.val, 1)?;
        let mut by = [(0usize, 0usize); 7];
        for (p, e) in pred.iter().zip(&data.val) {
            let k = e.regions.len();
            by[k].1 += 1;
            if *p == e.best_answer() {
                by[k].0 += 1;
            }
        }
        println!("val accuracy by region count: {:?}", &by[1..]);
    }
    println!("train-set metrics {:?}", evaluate(task, &model, &vlp::downstream::TaskData { train: &data.train, val: &data.train, vocab: &data.vocab }, &cfg)?);
    Ok(())
}
