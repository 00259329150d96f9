//! `gpa`: relation graphs over region proposals, prototype alignment,
//! gradient checks and the synthetic two-domain experiment driver.

use clap::{Args, Parser, Subcommand};
use gpa_core::align::{da_loss_backward, BackwardOptions};
use gpa_core::config::{ExperimentConfig, FlatConfig};
use gpa_core::error::Result;
use gpa_core::experiment::{self, SweepParam};
use gpa_core::graph::RelationGraph;
use gpa_core::io;
use gpa_core::sim::{build_domain_pair, generate_split, streams};
use gpa_core::trainer::GraphChoice;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gpa", version, about = "Graph-based prototype alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Flat key=value config file; omit to run the reference experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides experiment.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let flat = match &self.config {
            Some(path) => FlatConfig::load(path)?,
            None => FlatConfig::empty(),
        };
        let mut cfg = ExperimentConfig::from_flat(flat)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        experiment::ensure_writable(&cfg.out_dir)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a relation graph over boxes and emit its adjacency as CSV.
    Graph {
        /// CSV of boxes, one `x_min,y_min,x_max,y_max` row each.
        #[arg(long)]
        boxes: PathBuf,
        /// Graph kind: iou | gaussian | none.
        #[arg(long, default_value = "iou")]
        kind: String,
        /// Kernel bandwidth (gaussian graphs only).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment loss and feature gradients for a source/target batch pair.
    Align {
        /// Source proposal batch (JSON).
        #[arg(long)]
        source: PathBuf,
        /// Target proposal batch (JSON).
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        /// Graph kind built over each batch's boxes: iou | gaussian | none.
        #[arg(long, default_value = "iou")]
        kind: String,
        #[arg(long)]
        sigma: Option<f64>,
        /// Let gradients flow through the merge weights.
        #[arg(long)]
        confidence_grad: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the alignment and full-objective gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Max allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Generate a two-domain dataset and write it as JSON scenes.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate on every configured seed; write all artifacts.
    Run(ExperimentArgs),
    /// Sensitivity sweep over lambda1, lambda2 or gamma.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Parameter to sweep: lambda1 | lambda2 | gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: String,
    },
    /// The five-way relation-graph ablation.
    AblateGraph(ExperimentArgs),
}

fn graph_from_kind(
    boxes: &[gpa_core::geometry::BBox],
    kind: &str,
    sigma: Option<f64>,
) -> Result<RelationGraph> {
    match GraphChoice::parse(kind)? {
        GraphChoice::Iou => RelationGraph::iou(boxes),
        GraphChoice::None => RelationGraph::identity(boxes.len()),
        GraphChoice::Gaussian => {
            let sigma = sigma.ok_or_else(|| {
                gpa_core::Error::invalid_parameter("sigma", "required for gaussian graphs")
            })?;
            RelationGraph::gaussian(boxes, sigma)
        }
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Graph {
            boxes,
            kind,
            sigma,
            out,
        } => {
            let boxes = io::read_boxes_csv(&boxes)?;
            let graph = graph_from_kind(&boxes, &kind, sigma)?;
            io::write_matrix_csv(&out, graph.adjacency())?;
            println!(
                "graph: {} nodes, kind {}, sparsity {:.4}",
                graph.len(),
                kind,
                graph.sparsity()
            );
        }
        Command::Align {
            source,
            target,
            gamma,
            margin,
            kind,
            sigma,
            confidence_grad,
            out,
        } => {
            let src = io::read_proposal_batch(&source)?;
            let tgt = io::read_proposal_batch(&target)?;
            let src_graph = graph_from_kind(src.boxes(), &kind, sigma)?;
            let tgt_graph = graph_from_kind(tgt.boxes(), &kind, sigma)?;
            let opts = BackwardOptions {
                gamma,
                margin,
                confidence_grad,
                transform: None,
            };
            let loss = da_loss_backward(&src, &src_graph, &tgt, &tgt_graph, &opts)?;
            io::write_alignment_loss(&out, &loss)?;
            println!(
                "alignment: intra {:.6} inter (ss {:.6}, st {:.6}, tt {:.6}) total {:.6}",
                loss.intra, loss.inter_ss, loss.inter_st, loss.inter_tt, loss.total
            );
        }
        Command::Gradcheck { trials, seed, tol } => {
            let report = gpa_core::gradcheck::run(trials, trials, seed, tol);
            println!(
                "gradcheck: {} loss trials + {} objective trials, max rel err {:.3e} (tol {:.1e})",
                report.op_trials, report.pipeline_trials, report.max_rel_err, tol
            );
            for failure in &report.failures {
                eprintln!("FAIL {failure}");
            }
            if !report.passed() {
                return Err(gpa_core::Error::InvalidInput(format!(
                    "{} of {} trials exceeded tolerance",
                    report.failures.len(),
                    report.op_trials + report.pipeline_trials
                )));
            }
        }
        Command::Simulate { config, seed, out } => {
            let flat = match &config {
                Some(path) => FlatConfig::load(path)?,
                None => FlatConfig::empty(),
            };
            let cfg = ExperimentConfig::from_flat(flat)?;
            experiment::ensure_writable(&out)?;
            let (src_spec, tgt_spec) = build_domain_pair(&cfg.world, seed)?;
            for (name, spec, split) in [
                ("source_train", &src_spec, streams::SRC_TRAIN),
                ("source_eval", &src_spec, streams::SRC_EVAL),
                ("target_train", &tgt_spec, streams::TGT_TRAIN),
                ("target_eval", &tgt_spec, streams::TGT_EVAL),
            ] {
                let count = if split % 2 == 0 {
                    cfg.world.train_scenes
                } else {
                    cfg.world.eval_scenes
                };
                let scenes = generate_split(spec, count, seed, split)?;
                experiment::save_split_dir(&out.join(name), spec, &scenes, seed, split)?;
            }
            println!("simulate: wrote 4 splits under {}", out.display());
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let aggregate = experiment::run(&cfg)?;
            println!(
                "run: {} seeds, target accuracy {:.4} +- {:.4} (source {:.4})",
                aggregate.seeds.len(),
                aggregate.mean_tgt_accuracy,
                aggregate.std_tgt_accuracy,
                aggregate.mean_src_accuracy
            );
        }
        Command::Sweep {
            experiment: args,
            param,
            values,
        } => {
            let cfg = args.load()?;
            let param = SweepParam::parse(&param)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|s| io::parse_f64(s))
                .collect::<Result<_>>()?;
            let cells = experiment::sweep(&cfg, param, &values)?;
            println!(
                "sweep: {} cells over {} -> {}",
                cells.len(),
                param.label(),
                cfg.out_dir.join("sweep.csv").display()
            );
        }
        Command::AblateGraph(args) => {
            let cfg = args.load()?;
            let rows = experiment::ablate_graph(&cfg)?;
            println!("graph ablation ({} seeds):", cfg.seeds.len());
            for row in &rows {
                println!(
                    "  {:>8}  lp={}  tgt acc {:.4} +- {:.4}",
                    row.graph,
                    if row.learnable_transform { "yes" } else { "no " },
                    row.mean,
                    row.std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
