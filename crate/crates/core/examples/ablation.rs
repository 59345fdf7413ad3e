//! Trains the four ablation rows over several seeds and prints all-way
//! 1-shot fine accuracy per run plus per-row means.
//!
//! ```text
//! cargo run --release --example ablation -- --seeds 5 spread_fine=0.1
//! ```

use clap::Parser;
use rayon::prelude::*;

use pehcm::config::RunConfig;
use pehcm::eval::EpisodeMode;
use pehcm::train::{evaluate, load_dataset, train, Ablation};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// `key=value` overrides applied to the default config.
    overrides: Vec<String>,
}

fn main() -> pehcm::Result<()> {
    let args = Args::parse();
    let mut base = RunConfig::default();
    for kv in &args.overrides {
        base.apply_override(kv)?;
    }
    base.episode.mode = EpisodeMode::AllWay;
    let data = load_dataset(&base)?;

    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .iter()
        .flat_map(|&a| (0..args.seeds).map(move |s| (a, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let cfg = RunConfig { seed, ..a.apply(&base) };
            let out = train(&cfg, &data)?;
            let report = evaluate(&out.checkpoint.model, &data, &cfg)?;
            Ok((a, seed, report.mean_acc, report.ci95))
        })
        .collect::<pehcm::Result<Vec<_>>>()?;

    println!("variant,seed,mean_acc,ci95");
    for (a, seed, acc, ci) in &results {
        println!("{},{seed},{acc},{ci}", a.name());
    }
    for a in Ablation::ALL {
        let accs: Vec<f64> = results.iter().filter(|r| r.0 == a).map(|r| r.2).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (accs.len().max(2) - 1) as f64;
        println!("# {:<11} mean {mean:.4} std {:.4}", a.name(), var.sqrt());
    }
    Ok(())
}
