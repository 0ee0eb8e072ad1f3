//! Generate the synthetic dataset, train the desk-scale model and print
//! retrieval metrics with and without reranking.
//!
//! Usage: `cargo run --release --example desk_experiment -- [global-only] [DIR]`
//! with an optional TOML config in `ACTRET_CONFIG`.

use std::time::Instant;

use actret_core::config::RunConfig;
use actret_core::fusion::TokenSet;
use actret_core::pipeline::run_synthetic_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let mut config = match std::env::var_os("ACTRET_CONFIG") {
        Some(p) => RunConfig::from_file(std::path::Path::new(&p))?,
        None => RunConfig::desk(),
    };
    if args.first().map(String::as_str) == Some("global-only") {
        args.remove(0);
        config.fusion.tokens = TokenSet {
            anchored: false,
            global: true,
            contextual: false,
        };
    }
    let dir = match args.first() {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("actret-desk"),
    };
    let start = Instant::now();
    let report = run_synthetic_experiment(&config, &dir, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  val cls mAP {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_map, r.seconds
        )
    })?;
    println!("best epoch {} ({:.4})", report.training.best_epoch, report.training.best_val_map);
    let (raw, rr) = (&report.raw.metrics, &report.reranked.metrics);
    println!("raw      mAP {:.4}  R1 {:.4}  R5 {:.4}", raw.map, raw.rank1, raw.rank5);
    println!("reranked mAP {:.4}  R1 {:.4}  R5 {:.4}", rr.map, rr.rank1, rr.rank5);
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
