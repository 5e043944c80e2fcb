use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hybrid_zero::config::ExperimentConfig;
use hybrid_zero::evaluate::{audit_run, headline_series, load_audit, run_metrics, EntropyRow};
use hybrid_zero::orchestrator::{read_csv, run_training_until, RunDir};
use hybrid_zero::report::{build_report, export, Summary};
use hybrid_zero::store::load_checkpoint;
use hybrid_zero::suite::{run_experiment_suite, Progress, ResultRow, ResultsDir, SuiteSpec};
use hybrid_zero_core::evaluation::value_trajectory;
use hybrid_zero_core::game::Action;
use hybrid_zero_core::oracle::DecisionGraph;

#[derive(Parser)]
#[command(name = "hybrid-zero", version, about = "Self-play training and oracle audits for Tic-Tac-Toe")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, resuming if the run directory has progress.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key.path=value` override, repeatable
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// stop after this epoch
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Audit every checkpoint of a run and record entropy and value error.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// overrides of the run's `evaluation` table, e.g. `gumbel_mode=zero`
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run a named suite from the reproduce directory, or a suite file.
    Suite {
        name: String,
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "reproduce")]
        reproduce: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Value trajectory of a checkpoint along a move sequence.
    InspectValues {
        #[arg(long)]
        checkpoint: PathBuf,
        /// comma-separated cells 0-8
        #[arg(long)]
        actions: String,
        #[arg(long, default_value_t = 0)]
        t_start: usize,
    },
    /// Entropy of the empty-board policy for every checkpoint of a run.
    Entropy {
        #[arg(long)]
        run: PathBuf,
    },
    /// Summary statistics of a finished suite.
    Stats {
        name: String,
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "reproduce")]
        reproduce: PathBuf,
    },
    /// Figure CSV, SVG and summary of a finished suite.
    Export {
        name: String,
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "reproduce")]
        reproduce: PathBuf,
    },
}

fn suite_path(name: &str, reproduce: &Path) -> PathBuf {
    let p = PathBuf::from(name);
    if p.exists() {
        p
    } else {
        reproduce.join(format!("{name}.toml"))
    }
}

fn load_suite(name: &str, reproduce: &Path) -> Result<SuiteSpec> {
    let path = suite_path(name, reproduce);
    SuiteSpec::load(&path).with_context(|| format!("loading suite {}", path.display()))
}

fn print_summary(s: &Summary) {
    println!("{} ({}), metric {}, level {}", s.suite, s.figure, s.metric, s.level.value());
    println!("final window: epochs {:?}..={:?}", s.final_window_epochs.first(), s.final_window_epochs.last());
    for g in &s.groups {
        println!(
            "  {:<20} {:<8} n={} final epoch {} {:.3} ± {:.3}   final window {:.3} ± {:.3}   mean {:.3} [{:.3}, {:.3}]",
            g.arm,
            g.eval,
            g.seeds,
            g.final_epoch,
            g.at_final_epoch.mean,
            g.at_final_epoch.half_width,
            g.final_window.mean,
            g.final_window.half_width,
            g.overall_mean,
            g.min,
            g.max
        );
    }
    if let Some(d) = &s.difference {
        println!(
            "  {} - {} ({}): {:.3} ± {:.3}; ratio {:.3}{}",
            d.minuend.label(),
            d.subtrahend.label(),
            if d.paired { "paired" } else { "unpaired" },
            d.final_window.mean,
            d.final_window.half_width,
            d.factor.factor,
            if d.factor.lower_bound_only { " (lower bound)".to_string() } else { format!(" ± {:.3}", d.factor.uncertainty) }
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, set, out, epochs } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p, &set)?,
                None => ExperimentConfig::from_str("", &set)?,
            };
            let last = epochs.unwrap_or(cfg.schedule.epochs());
            let ckpts = run_training_until(&cfg, &out, last, |r| {
                eprintln!(
                    "epoch {:>5}  loss {:.4} (p {:.4} v {:.4} sim {:.4})  {:.1}s",
                    r.epoch, r.loss_total, r.loss_policy, r.loss_value, r.loss_similarity, r.wall_time_s
                )
            })?;
            println!("{} checkpoints in {}", ckpts.len(), out.display());
        }
        Command::Evaluate { run, set } => {
            let dir = RunDir::new(&run);
            let cfg = dir.load_config()?;
            let mut t = hybrid_zero::config::to_table(&cfg.evaluation);
            for s in &set {
                hybrid_zero::config::apply_override(&mut t, s)?;
            }
            let eval: hybrid_zero::config::EvaluationConfig = toml::Value::Table(t).try_into()?;
            let graph = DecisionGraph::solved();
            let path = audit_run(&dir, &eval, &graph)?;
            run_metrics(&dir, &graph)?;
            for (epoch, h) in headline_series(&load_audit(&path)?) {
                println!("{epoch},{h}");
            }
            eprintln!("audit rows in {}", path.display());
        }
        Command::Suite { name, results, reproduce, set } => {
            let spec = load_suite(&name, &reproduce)?;
            let out = ResultsDir::new(&results);
            let path = run_experiment_suite(&spec, &set, &out, |p| match p {
                Progress::Training { arm, seed } => eprintln!("[{arm} seed {seed}] training"),
                Progress::Epoch { arm, seed, epoch, of } if epoch % 10 == 0 || epoch == of => {
                    eprintln!("[{arm} seed {seed}] epoch {epoch}/{of}")
                }
                Progress::Evaluating { arm, seed, eval } => eprintln!("[{arm} seed {seed}] evaluating {eval}"),
                _ => {}
            })?;
            let dir = path.parent().expect("suite dir").to_path_buf();
            let (summary, _) = export(&dir, spec.suite.as_str(), &spec.report)?;
            print_summary(&summary);
        }
        Command::InspectValues { checkpoint, actions, t_start } => {
            let (_, epoch, net) = load_checkpoint(&checkpoint, None)?;
            let acts = actions
                .split(',')
                .map(|c| Ok(Action::new(c.trim().parse()?)?))
                .collect::<Result<Vec<Action>>>()?;
            let tr = value_trajectory(&net, &acts, t_start)?;
            println!("# epoch {epoch}, t_start {t_start}, filler {:?}", tr.filler.map(|a| a.index()));
            println!("t,value");
            for (t, v) in tr.values.iter().enumerate() {
                println!("{t},{v}");
            }
        }
        Command::Entropy { run } => {
            let dir = RunDir::new(&run);
            run_metrics(&dir, &DecisionGraph::solved())?;
            let rows: Vec<EntropyRow> = read_csv(&dir.entropy_csv())?;
            println!("epoch,entropy");
            for r in rows {
                println!("{},{}", r.epoch, r.entropy);
            }
        }
        Command::Stats { name, results, reproduce } => {
            let spec = load_suite(&name, &reproduce)?;
            let path = ResultsDir::new(&results).suite(spec.suite).join("results.csv");
            let rows: Vec<ResultRow> = read_csv(&path)?;
            if rows.is_empty() {
                bail!("no results in {}", path.display());
            }
            print_summary(&build_report(spec.suite.as_str(), &spec.report, &rows)?.summary);
        }
        Command::Export { name, results, reproduce } => {
            let spec = load_suite(&name, &reproduce)?;
            let dir = ResultsDir::new(&results).suite(spec.suite);
            let (_, files) = export(&dir, spec.suite.as_str(), &spec.report)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
