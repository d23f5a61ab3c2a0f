use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use specverify::harness::{self, io, CalibrateMode, ExperimentConfig};
use specverify::specdec::DraftMode;
use specverify::Error;

#[derive(Parser)]
#[command(
    name = "specverify",
    version,
    about = "Speculative decoding with sparse verification on toy models"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the experiment file, which overrides defaults.
#[derive(Args)]
struct Overrides {
    /// Experiment JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    #[arg(long, global = true)]
    prompt_file: Option<PathBuf>,
    #[arg(long, global = true)]
    target_weights: Option<PathBuf>,
    #[arg(long, global = true)]
    temperature: Option<f32>,
    /// Chain draft length.
    #[arg(long, global = true, conflicts_with = "template")]
    k: Option<usize>,
    /// Tree branching factors per depth, e.g. 2,2.
    #[arg(long, global = true, value_delimiter = ',')]
    template: Option<Vec<usize>>,
    #[arg(long, global = true, default_value_t = 64)]
    max_nodes: usize,
    #[arg(long, global = true)]
    base_length: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    anchors: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f32>,
    #[arg(long, global = true)]
    threshold_map: Option<PathBuf>,
    #[arg(long, global = true)]
    skip_budget: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Anchors,
    Moe,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Decode and emit a metrics record.
    Generate {
        /// Append the metrics record here instead of printing it.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Calibrate anchor layers and/or MoE skip thresholds.
    Calibrate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// One whitespace-separated sequence per line.
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long, default_value_t = 2)]
        num_anchors: usize,
        #[arg(long)]
        max_level: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Per-token retrieval overlap by positional distance (CSV).
    Overlap {
        #[arg(long, default_value_t = 4)]
        max_distance: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical check that decoding reproduces the target distribution.
    Lossless {
        #[arg(long, default_value_t = 200_000)]
        trials: usize,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
    },
    /// Compare plan variants (CSV).
    Bench {
        /// JSON list of {name, sparsity}; defaults to strict and configured.
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Analytical FLOPs per component (CSV).
    Flops {
        #[arg(long)]
        tokens: Option<usize>,
        /// Use these sparsities instead of measuring them.
        #[arg(long, num_args = 3, value_names = ["S_A", "S_F", "S_E"])]
        sparsity: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the counter reconciliation of the measuring run as JSON.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

fn load_config(o: &Overrides) -> specverify::Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.max_tokens {
        cfg.max_tokens = v;
    }
    if let Some(v) = &o.prompt_file {
        cfg.prompt_file = Some(v.clone());
    }
    if let Some(v) = &o.target_weights {
        cfg.target.weights_file = Some(v.clone());
    }
    if let Some(v) = o.temperature {
        cfg.temperature = v;
    }
    if let Some(k) = o.k {
        cfg.mode = DraftMode::Chain { k };
    }
    if let Some(t) = &o.template {
        cfg.mode = DraftMode::Tree {
            template: t.clone(),
            max_nodes: o.max_nodes,
        };
    }
    if let Some(v) = o.base_length {
        cfg.sparsity.base_length = Some(v);
    }
    if let Some(v) = o.rho {
        cfg.sparsity.rho = v;
    }
    if let Some(v) = &o.anchors {
        cfg.sparsity.anchors_file = Some(v.clone());
    }
    if let Some(v) = o.tau {
        cfg.sparsity.ffn_threshold = Some(v);
    }
    if let Some(v) = &o.threshold_map {
        cfg.sparsity.threshold_map_file = Some(v.clone());
    }
    if let Some(v) = o.skip_budget {
        cfg.sparsity.skip_budget = v;
    }
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> specverify::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn append_lines(path: &Path, lines: &[String]) -> specverify::Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn run(cli: Cli) -> specverify::Result<()> {
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Generate { metrics } => {
            let out = harness::generate(&cfg)?;
            let tokens: Vec<String> = out.tokens.iter().map(|t| t.to_string()).collect();
            println!("{}", tokens.join(" "));
            let line = out.record.to_json_line();
            match metrics {
                Some(p) => append_lines(&p, &[line])?,
                None => println!("{line}"),
            }
        }
        Command::Calibrate {
            mode,
            sequences,
            num_anchors,
            max_level,
            out_dir,
        } => {
            let seqs = io::read_sequences(&sequences)?;
            let mode = match mode {
                Mode::Anchors => CalibrateMode::Anchors,
                Mode::Moe => CalibrateMode::Moe,
                Mode::Both => CalibrateMode::Both,
            };
            fs::create_dir_all(&out_dir)?;
            let out = harness::calibrate(&cfg, mode, &seqs, num_anchors, max_level, &out_dir)?;
            for line in &out.summary {
                println!("{line}");
            }
            if let Some((p, _)) = &out.anchors {
                println!("wrote {}", p.display());
            }
            if let Some((p, _)) = &out.thresholds {
                println!("wrote {}", p.display());
            }
        }
        Command::Overlap { max_distance, out } => {
            let (rows, _) = harness::overlap(&cfg, max_distance)?;
            emit(out.as_deref(), &harness::overlap_csv(&rows))?;
        }
        Command::Lossless { trials, threshold } => {
            let r = harness::lossless(&cfg, trials, threshold)?;
            println!(
                "trials={} vocab={} tv={:.6} threshold={} {}",
                r.trials,
                r.vocab,
                r.tv_distance,
                r.threshold,
                if r.pass { "PASS" } else { "FAIL" }
            );
            if !r.pass {
                return Err(Error::Logic(format!(
                    "total variation {} not below {}",
                    r.tv_distance, r.threshold
                )));
            }
        }
        Command::Bench { variants, out, metrics } => {
            let variants = match variants {
                Some(p) => io::load_json(&p)?,
                None => harness::default_variants(&cfg),
            };
            let rows = harness::bench(&cfg, &variants)?;
            emit(out.as_deref(), &harness::bench_csv(&rows))?;
            if let Some(p) = metrics {
                let lines: Vec<String> = rows.iter().map(|r| r.record.to_json_line()).collect();
                append_lines(&p, &lines)?;
            }
        }
        Command::Flops {
            tokens,
            sparsity,
            out,
            ledger,
        } => {
            let s = sparsity.map(|v| (v[0], v[1], v[2]));
            let (rows, breakdown) = harness::flops_table(&cfg, tokens, s)?;
            emit(out.as_deref(), &harness::flops_csv(&rows))?;
            if let (Some(p), Some(b)) = (ledger, breakdown) {
                io::save_json(&p, &b)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Input(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
