//! Overfit one 8-scene batch with the tiny configuration and report the
//! loss ratio, masked-object accuracy and caption recall.
//!
//! Usage: `cargo run --release --example overfit [steps] [lr] [decay] [seed]`

use vlp::data::WorldConfig;
use vlp::study::overfit;
use vlp::train::{AdamConfig, Decay, PretrainConfig, Schedule};

fn main() -> vlp::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(500, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(2e-2, |s| s.parse().expect("lr"));
    let decay: Decay = args.next().map_or(Ok(Decay::Linear), |s| s.parse())?;
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let world = WorldConfig { n_scenes: 8, ..WorldConfig::default() };
    let cfg = PretrainConfig {
        steps,
        adam: AdamConfig::with_lr(lr),
        schedule: Schedule { warmup: 0, decay },
        seed,
        ..PretrainConfig::default()
    };
    let r = overfit(&world, 3, seed, &cfg)?;
    for row in r.rows.iter().filter(|row| row.step % 50 == 0) {
        let l = row.loss;
        println!(
            "step {:4} total {:.4} mlm {:.3} moc {:.3} mrpg {:.3} ism {:.3} msg {:.3}",
            row.step, l.total, l.mlm, l.moc, l.mrpg, l.ism, l.msg
        );
    }
    println!("first batch: {:.4} -> {:.4} (ratio {:.4})", r.initial_loss, r.final_loss, r.loss_ratio());
    println!("masked-object accuracy, one region at a time: {}/{}", r.moc_correct, r.moc_total);
    println!("captions reproduced: {}/{}", r.captions_exact, r.examples);
    Ok(())
}
