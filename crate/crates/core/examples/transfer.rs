//! Pre-trained versus random initialisation at a fixed fine-tuning budget.
//!
//! Usage: `cargo run --release --example transfer [pretrain_steps] [finetune_steps] [seeds] [pre_lr] [ft_lr] [ft_warmup]`

use std::time::Instant;

use vlp::data::WorldConfig;
use vlp::downstream::{FinetuneConfig, Task};
use vlp::study::{finetune_score, pretrain_checkpoint, Pair, StudyData};
use vlp::train::{AdamConfig, Checkpoint, PretrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> vlp::Result<()> {
    let pre_steps: u64 = arg(1, 2500);
    let ft_steps: u64 = arg(2, 100);
    let seeds: u64 = arg(3, 5);
    let pre_lr: f64 = arg(4, 3e-3);
    let ft_lr: f64 = arg(5, 3e-3);
    let data = StudyData::generate(2024, &WorldConfig::default(), 2000, 200, 200)?;
    let config = data.toy_config();
    println!("vocab {} answers {}", data.vocab.len(), data.answers.len());
    for seed in 0..seeds {
        let t0 = Instant::now();
        let pc = PretrainConfig {
            steps: pre_steps,
            adam: AdamConfig::with_lr(pre_lr),
            seed,
            ..PretrainConfig::default()
        };
        let cache = std::env::temp_dir().join(format!("vlp_pre_{pre_steps}_{pre_lr}_{seed}.bin"));
        let ckpt = match Checkpoint::load(&cache) {
            Ok(c) => c,
            Err(_) => {
                let c = pretrain_checkpoint(&data, &config, seed, &pc)?;
                c.save(&cache)?;
                c
            }
        };
        println!("seed {seed}: pre-trained in {:.1}s", t0.elapsed().as_secs_f64());
        let tasks: Vec<Task> = match std::env::var("TASKS") {
            Ok(t) => t.split(',').map(|s| s.parse()).collect::<vlp::Result<_>>()?,
            Err(_) => Task::ALL.to_vec(),
        };
        for task in tasks {
            let t1 = Instant::now();
            let fc = FinetuneConfig {
                steps: ft_steps,
                adam: AdamConfig::with_lr(ft_lr),
                schedule: vlp::train::Schedule {
                    warmup: arg(6, 0),
                    decay: std::env::var("FT_DECAY").map_or(Ok(vlp::train::Decay::None), |s| s.parse())?,
                },
                seed,
                ..FinetuneConfig::default()
            };
            let p = Pair {
                seed,
                treated: finetune_score(task, &data, &config, Some(&ckpt), 100 + seed, &fc)?,
                baseline: finetune_score(task, &data, &config, None, 100 + seed, &fc)?,
            };
            println!(
                "  {task:9} pretrained {:.4} random {:.4} {} ({:.1}s)",
                p.treated,
                p.baseline,
                if p.wins(task) { "win" } else { "LOSS" },
                t1.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
