//! Layer run settings the way the command line does: defaults, then a JSON
//! file, then `key=value` overrides, and print the resolved configuration.
//!
//! Usage: `cargo run --example config [key=value ...]`

use vlp::config::RunConfig;

fn main() -> vlp::Result<()> {
    let sets: Vec<String> = std::env::args().skip(1).collect();
    let c = RunConfig::default()
        .merge_json(r#"{"steps": 500, "lr": 0.002}"#)?
        .merge_sets(&sets)?;
    c.validate()?;
    println!("{}", c.to_json());
    println!("pre-training: {:?}", c.pretrain());
    println!("decoding: {:?}", c.decode_config());
    Ok(())
}
