use std::path::PathBuf;

use acp_core::scenario::{load_config, run_scenario, summarize, write_outputs, Scenario};
use anyhow::{bail, Context, Result};
use clap::Parser;

/// Run one scenario file and write per-request and windowed CSV output.
#[derive(Debug, Parser)]
#[command(name = "acp-sim", version)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the scenario's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for requests.csv, summary.csv and params.toml.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let mut sc = load_config(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        let mut config = sc.config.clone();
        config.seed = seed;
        sc = Scenario::new(config).context("applying --seed")?;
    }
    let result = run_scenario(&sc);
    if !result.audit.violations.is_empty() {
        bail!("invariant violations: {}", result.audit.violations.join("; "));
    }
    write_outputs(&sc, &result, &args.out)?;
    if !args.quiet {
        let served: Vec<_> = result.records.iter().filter(|r| r.served()).collect();
        println!(
            "{} {}: {} of {} requests served",
            sc.config.strategy,
            args.config.display(),
            served.len(),
            result.records.len()
        );
        if !served.is_empty() {
            let n = served.len() as f64;
            let tts = served.iter().filter_map(|r| r.tts_s).sum::<f64>() / n * 1e3;
            let fid = served.iter().filter_map(|r| r.fidelity).sum::<f64>() / n;
            println!("mean TTS {tts:.3} ms, mean fidelity {fid:.4}");
        }
        for w in summarize(&result.records, sc.config.summary_window_s) {
            let tts = w.mean_tts_ms.map_or("-".to_string(), |t| format!("{t:.3}"));
            println!("  [{:>7.1}, {:>7.1}) s  TTS {tts:>8} ms  served {:.2}", w.window_start_s, w.window_end_s, w.served_fraction);
        }
        println!("wrote {}", args.out.display());
    }
    Ok(())
}
