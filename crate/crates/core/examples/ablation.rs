//! Proxy-task ablation: Base (MLM + MOC + ISM) against Base + MSG on
//! caption NLL and against Base + MRPG on question-answering accuracy.
//!
//! Usage: `cargo run --release --example ablation [pretrain_steps] [finetune_steps] [seeds] [lr]`

use vlp::data::WorldConfig;
use vlp::downstream::{FinetuneConfig, Task};
use vlp::proxy::ProxyConfig;
use vlp::study::{finetune_score, pretrain_checkpoint, Pair, StudyData};
use vlp::train::{AdamConfig, Checkpoint, PretrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn proxy(msg: bool, mrpg: bool) -> ProxyConfig {
    ProxyConfig {
        enable_msg: msg,
        enable_mrpg: mrpg,
        ..ProxyConfig::default()
    }
}

fn main() -> vlp::Result<()> {
    let pre_steps: u64 = arg(1, 2500);
    let ft_steps: u64 = arg(2, 100);
    let seeds: u64 = arg(3, 5);
    let lr: f64 = arg(4, 3e-3);
    let data = StudyData::generate(2024, &WorldConfig::default(), 2000, 200, 200)?;
    let config = data.toy_config();
    let variants = [("base", proxy(false, false)), ("msg", proxy(true, false)), ("mrpg", proxy(false, true))];
    for seed in 0..seeds {
        let mut ckpts = Vec::new();
        for (name, p) in &variants {
            let t0 = std::time::Instant::now();
            let cache = std::env::temp_dir().join(format!("vlp_abl_{name}_{pre_steps}_{lr}_{seed}.bin"));
            let ck = match Checkpoint::load(&cache) {
                Ok(c) => c,
                Err(_) => {
                    let pc = PretrainConfig {
                        steps: pre_steps,
                        adam: AdamConfig::with_lr(lr),
                        seed,
                        proxy: p.clone(),
                        ..PretrainConfig::default()
                    };
                    let c = pretrain_checkpoint(&data, &config, seed, &pc)?;
                    c.save(&cache)?;
                    c
                }
            };
            println!("seed {seed}: {name} pre-trained in {:.1}s", t0.elapsed().as_secs_f64());
            ckpts.push(ck);
        }
        let fc = FinetuneConfig {
            steps: ft_steps,
            adam: AdamConfig::with_lr(lr),
            seed,
            ..FinetuneConfig::default()
        };
        let score = |task, ck: &Checkpoint| finetune_score(task, &data, &config, Some(ck), 100 + seed, &fc);
        let cap = Pair {
            seed,
            treated: score(Task::Caption, &ckpts[1])?,
            baseline: score(Task::Caption, &ckpts[0])?,
        };
        let vqa = Pair {
            seed,
            treated: score(Task::Vqa, &ckpts[2])?,
            baseline: score(Task::Vqa, &ckpts[0])?,
        };
        println!(
            "  caption NLL base+msg {:.4} base {:.4} {}",
            cap.treated,
            cap.baseline,
            if cap.wins(Task::Caption) { "improves" } else { "WORSE" }
        );
        println!(
            "  vqa acc base+mrpg {:.4} base {:.4} {}",
            vqa.treated,
            vqa.baseline,
            if vqa.holds(Task::Vqa) { "holds" } else { "DEGRADES" }
        );
    }
    Ok(())
}
