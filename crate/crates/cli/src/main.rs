//! `excel` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use excel_core::fixtures::{generate_fixtures, FixtureSpec};
use excel_core::pipeline::{evaluate_dirs, Pipeline, PipelineConfig, RunMode};
use excel_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "excel", version, about = "Patch-text CAMs with text enrichment and visual calibration")]
struct Cli {
    /// Seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CamKind {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    StaticOnly,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random encoder, a knowledge file, a shapes dataset and a
    /// matching config.toml into --out.
    GenFixtures {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        images: usize,
    },
    /// Build the enriched class representation.
    BuildAttrs,
    /// Generate CAMs and pseudo labels.
    Cam {
        #[arg(value_enum)]
        kind: CamKind,
        /// Adapter checkpoint for dynamic CAMs (default: latest in the run).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the adapter and segmentation head.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score label maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// classes.json (default: next to the masks directory).
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Last-layer attention entropy and token relations per policy.
    AttnReport {
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated policies (qk, vv, ic, icb); default from config.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        /// Adapter checkpoint supplying the relation of `icb`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every stage.
    Run {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

fn pipeline(cli: &Cli, edit: impl FnOnce(&mut PipelineConfig)) -> Result<Pipeline> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    edit(&mut config);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Pipeline::new(config, &base, cli.out.as_deref())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenFixtures { classes, images } => {
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| Error::Config("gen-fixtures needs --out".into()))?;
            let seed = cli.seed.unwrap_or(42);
            let spec = FixtureSpec {
                classes: *classes,
                images: *images,
                ..FixtureSpec::default()
            };
            generate_fixtures(out, &spec, seed)?;
            write_text(&out.join("config.toml"), &PipelineConfig::for_fixtures(seed).to_toml()?)?;
            println!("fixtures written to {}", out.display());
        }
        Command::BuildAttrs => {
            let p = pipeline(&cli, |_| {})?;
            let bank = p.build_attributes()?;
            println!(
                "{} class representations ({:?}) written to {}",
                bank.classes(),
                bank.mode,
                p.bank_path().display()
            );
        }
        Command::Cam { kind, checkpoint } => {
            let p = pipeline(&cli, |_| {})?;
            let dir = p.cam_command(matches!(kind, CamKind::Dynamic), checkpoint.as_deref())?;
            println!("pseudo labels written to {}", dir.display());
        }
        Command::Train { resume } => {
            let p = pipeline(&cli, |_| {})?;
            let outcome = p.train_command(resume.as_deref())?;
            if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                println!(
                    "trained to iteration {}: total loss {:.6} -> {:.6}",
                    outcome.state.iteration, first.total, last.total
                );
            }
            println!("checkpoints in {}", p.train_dir().display());
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            classes,
        } => {
            let classes_path = classes.clone().unwrap_or_else(|| {
                gt_dir
                    .parent()
                    .map(|d| d.join("classes.json"))
                    .unwrap_or_else(|| PathBuf::from("classes.json"))
            });
            let text = fs::read_to_string(&classes_path).map_err(|source| Error::Io {
                path: classes_path.clone(),
                source,
            })?;
            let names: Vec<String> = serde_json::from_str::<serde_json::Value>(&text)?["classes"]
                .as_array()
                .ok_or_else(|| Error::Dataset(format!("{} lacks a classes list", classes_path.display())))?
                .iter()
                .map(|v| v.as_str().unwrap_or_default().to_string())
                .collect();
            let report = evaluate_dirs(pred_dir, gt_dir, &names)?;
            print!("{}", report.to_table());
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|source| Error::Io {
                    path: out.clone(),
                    source,
                })?;
                report.save(&out.join("report.json"), &out.join("report.txt"), &[])?;
            }
        }
        Command::AttnReport {
            image,
            policies,
            checkpoint,
        } => {
            let p = pipeline(&cli, |c| {
                if let Some(list) = policies {
                    c.attn_policies = list.clone();
                }
            })?;
            let report = p.attention_report(image, checkpoint.as_deref())?;
            println!("{:<8} {:>12}", "policy", "entropy");
            for r in &report {
                println!("{:<8} {:>12.6}", r.policy, r.entropy);
            }
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|source| Error::Io {
                    path: out.clone(),
                    source,
                })?;
                let value = json!({
                    "provenance": p.provenance("attn-report").to_json(),
                    "policies": report.iter().map(|r| json!({
                        "policy": r.policy,
                        "entropy": r.entropy,
                        "relations": (0..r.relations.rows()).map(|i| r.relations.row(i).to_vec()).collect::<Vec<_>>(),
                    })).collect::<Vec<_>>(),
                });
                let mut text = serde_json::to_string_pretty(&value)?;
                text.push('\n');
                write_text(&out.join("attn_report.json"), &text)?;
            }
        }
        Command::Run { mode } => {
            let p = pipeline(&cli, |c| {
                if let Some(m) = mode {
                    c.mode = match m {
                        Mode::Full => RunMode::Full,
                        Mode::StaticOnly => RunMode::StaticOnly,
                    };
                }
            })?;
            let s = p.run()?;
            println!("config hash {}  seed {}", s.config_hash, s.seed);
            println!("vanilla CAM mIoU  {:.4}", s.vanilla_miou);
            println!("static CAM mIoU   {:.4}", s.static_miou);
            if let Some(v) = s.dynamic_miou {
                println!("dynamic CAM mIoU  {v:.4}");
            }
            if let Some(v) = s.segmentation_miou {
                println!("segmentation mIoU {v:.4}");
            }
            if let (Some(a), Some(b)) = (s.initial_loss, s.final_loss) {
                println!("total loss        {a:.6} -> {b:.6}");
            }
            println!("artifacts in {}", p.out.display());
        }
    }
    Ok(())
}
