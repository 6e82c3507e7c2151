use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use varfuse::data::SyntheticConfig;
use varfuse::harness::{
    cmd_ablate, cmd_curves, cmd_synth, cmd_train, format_table, gradcheck, resolve_out, CurveAblation,
    ExperimentConfig, Preset, ABLATION_GRID,
};
use varfuse::Error;

#[derive(Parser)]
#[command(name = "varfuse", version, about = "Variational gated multimodal fusion for multilabel genre tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Start from a named preset (pm-mo-paper, gmu-paper, pm-mo-1024, synthetic).
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` configuration file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycles: Option<usize>,
    /// MMT1 container; synthetic records are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory [default: $VARFUSE_OUT or ./runs].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> varfuse::Result<ExperimentConfig> {
        let mut cfg = match &self.preset {
            Some(name) => Preset::from_name(name)?.config(),
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(cycles) = self.cycles {
            cfg.cycles = cycles;
        }
        if let Some(data) = &self.data {
            cfg.data = Some(data.clone());
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        resolve_out(self.out.as_deref(), cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and test over the configured cycles.
    Train {
        #[command(flatten)]
        common: Common,
        /// Row label in the report.
        #[arg(long, default_value = "PM+MO")]
        label: String,
    },
    /// Run the ablation grid and print its table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rows; the full grid when absent.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Validation curve up to the best epoch plus one.
    Curves {
        #[command(flatten)]
        common: Common,
        /// none, no_batchnorm, no_maxnorm or no_both.
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Write a synthetic MMT1 container.
    Synth {
        #[arg(long, default_value_t = 2000)]
        records: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = varfuse::data::TEXT_DIM)]
        text_dim: usize,
        #[arg(long, default_value_t = varfuse::data::IMAGE_DIM)]
        image_dim: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> varfuse::Result<bool> {
    match cli.command {
        Command::Train { common, label } => {
            let cfg = common.resolve()?;
            let out = common.out_dir(&cfg);
            let report = cmd_train(&cfg, &label, &out)?;
            print!("{}", format_table(&[(label, report.aggregate.clone())]));
            println!(
                "mean epoch {:.2}s, total {:.1}s, artifacts in {}",
                report.timing.mean_epoch_seconds(),
                report.timing.total_seconds,
                out.display()
            );
        }
        Command::Ablate { common, grid } => {
            let cfg = common.resolve()?;
            let out = common.out_dir(&cfg);
            let grid = if grid.is_empty() {
                ABLATION_GRID.iter().map(|s| s.to_string()).collect()
            } else {
                grid
            };
            let rows = cmd_ablate(&cfg, &grid, &out)?;
            let table: Vec<_> = rows.iter().map(|r| (r.variant.clone(), r.report.aggregate.clone())).collect();
            print!("{}", format_table(&table));
            let mut order: Vec<_> = table.iter().map(|(v, r)| (v.as_str(), r.weighted)).collect();
            order.sort_by(|a, b| b.1.total_cmp(&a.1));
            log::info!("weighted-F1 ordering: {order:?}");
        }
        Command::Gradcheck { seed, inject_fault } => {
            let results = gradcheck::run_suite(seed, inject_fault)?;
            let mut ok = true;
            for r in &results {
                let mark = if r.passed() { "ok  " } else { "FAIL" };
                println!("{mark} {:<32} {:.3e}", r.name, r.max_rel_error);
                ok &= r.passed();
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed, tolerance {:e}", results.len(), gradcheck::TOLERANCE);
            return Ok(ok);
        }
        Command::Curves { common, ablation } => {
            let cfg = common.resolve()?;
            let out = common.out_dir(&cfg);
            let ablation = CurveAblation::from_name(&ablation)?;
            let rows = cmd_curves(&cfg, ablation, &out)?;
            print!("{}", varfuse::harness::curve_csv(&rows));
        }
        Command::Synth { records, noise, seed, text_dim, image_dim, output } => {
            let cfg = SyntheticConfig {
                text_dim,
                image_dim,
                ..SyntheticConfig::new(seed, records, noise)
            };
            cmd_synth(&cfg, &output)?;
            println!("wrote {records} records to {}", output.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("varfuse: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
