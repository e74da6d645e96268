//! Trains the head on the default synthetic dataset and prints ZSL, GZSL and
//! seen-class metrics next to the untrained baseline.
//!
//! Usage: `cargo run --release --example desk_zsl [key=value ...]`

use std::time::Instant;

use clip_decoder::io::{generate_synthetic_dataset, SynthConfig};
use clip_decoder::metrics::render_table;
use clip_decoder::trainer::{evaluate, train, EvalMode, EvalOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("arguments are key=value")?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let data = generate_synthetic_dataset::<f64>(&SynthConfig::default())?;
    let started = Instant::now();
    let trained = train(&data.train, &data.query_bank, &cfg)?;
    println!("trained in {:.1}s, final loss {:?}", started.elapsed().as_secs_f64(), trained.final_loss);
    let untrained = train(&data.train, &data.query_bank, &TrainConfig { epochs: 0, ..cfg.clone() })?;
    let mut rows = Vec::new();
    for (name, ckpt) in [("untrained", &untrained), ("trained", &trained)] {
        for (mode, test) in [
            (EvalMode::Zsl, &data.test_zsl),
            (EvalMode::Gzsl, &data.test_gzsl),
            (EvalMode::Seen, &data.test_gzsl),
            (EvalMode::Seen, &data.train),
        ] {
            let report = evaluate(ckpt, test, &data.query_bank, &EvalOptions::from_config(&cfg, mode))?;
            rows.push((format!("{name} {mode}"), report));
        }
    }
    let table: Vec<(&str, _)> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
    print!("{}", render_table(&table));
    Ok(())
}
