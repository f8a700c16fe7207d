use std::path::PathBuf;

use clap::Args;
use epiray::toydiff::{ablation_run, write_curves_csv, AblationConfig, AblationReport};
use serde::Serialize;

use crate::common::*;

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Ablation config JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `variants` (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    variant: String,
    n_params: usize,
    mask_density: f64,
    initial_high_noise: f64,
    final_high_noise: f64,
    initial_full: f64,
    final_full: f64,
    diverged_at: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a AblationConfig,
    ordering: Vec<&'static str>,
    variants: Vec<SummaryRow>,
}

fn summarize(report: &AblationReport) -> Summary<'_> {
    Summary {
        config: &report.config,
        ordering: report.ordering.iter().map(|v| v.name()).collect(),
        variants: report
            .results
            .iter()
            .map(|r| SummaryRow {
                variant: r.variant.name().to_string(),
                n_params: r.n_params,
                mask_density: r.mean_mask_density,
                initial_high_noise: r.initial().high_noise,
                final_high_noise: r.last().high_noise,
                initial_full: r.initial().full,
                final_full: r.last().full,
                diverged_at: r.diverged_at,
            })
            .collect(),
    }
}

pub fn run(args: AblateArgs) -> CliResult<()> {
    require_file(&args.config)?;
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.config.display())))?;
    let mut cfg: AblationConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.config.display())))?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(v) = args.variants {
        cfg.variants = v;
    }
    cfg.validate()?;

    let report = ablation_run(&cfg)?;
    create_dir(&args.out)?;
    let mut csv = Vec::new();
    write_curves_csv(&report, &mut csv)?;
    write_file(&args.out.join("curves.csv"), csv)?;
    let summary = summarize(&report);
    write_json(&args.out.join("summary.json"), &summary)?;
    write_json(&args.out.join("config.json"), &cfg)?;

    println!(
        "{:<16} {:>10} {:>12} {:>12} {:>10}",
        "variant", "density", "high_noise", "full", "diverged"
    );
    for r in &summary.variants {
        println!(
            "{:<16} {:>10.4} {:>12.6} {:>12.6} {:>10}",
            r.variant,
            r.mask_density,
            r.final_high_noise,
            r.final_full,
            r.diverged_at.map_or("-".to_string(), |s| s.to_string())
        );
    }
    println!(
        "ordering (high-noise, best first): {}",
        summary.ordering.join(" < ")
    );
    Ok(())
}
