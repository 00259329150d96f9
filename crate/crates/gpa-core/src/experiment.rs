//! Experiment orchestration: single runs, multi-seed aggregation,
//! sensitivity sweeps and the relation-graph ablation.
//!
//! A run is fully determined by its config and seed: the world (class
//! structure and domain shift), the splits, the model init and the batch
//! order all come from fixed substreams of the seed. Cells of sweeps and
//! ablations are independent and may execute in parallel; aggregation is
//! a sequential reduction afterwards.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::calibrate_sigma;
use crate::io::{fmt_f64, CsvWriter};
use crate::pca::pca_project;
use crate::sim::{build_domain_pair, generate_split, streams, Scene};
use crate::svg::{scatter_svg, ScatterPoint};
use crate::trainer::{
    evaluate, prepare_scenes, GraphChoice, LossReport, MetricsReport, PreparedScene, TrainConfig,
    Trainer,
};
use ndarray::Axis;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Final state of one seed's run.
#[derive(Debug, Clone, Serialize)]
pub struct SingleRunReport {
    pub seed: u64,
    pub config_hash: String,
    pub final_losses: LossReport,
    pub final_metrics: MetricsReport,
}

/// Mean and (population) standard deviation over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub mean_tgt_accuracy: f64,
    pub std_tgt_accuracy: f64,
    pub mean_src_accuracy: f64,
    pub std_src_accuracy: f64,
    pub mean_per_class_tgt_accuracy: Vec<f64>,
    pub runs: Vec<SingleRunReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything a trained seed needs for evaluation and plotting.
pub struct TrainedRun {
    pub trainer: Trainer,
    pub src_eval: Vec<PreparedScene>,
    pub tgt_eval: Vec<PreparedScene>,
    pub per_epoch: Vec<(LossReport, MetricsReport)>,
}

/// Resolve the per-run training config: variant weights and, when the
/// gaussian graph is selected, a sigma calibrated on this seed's source
/// training boxes by sparsity matching.
pub fn resolve_train_config(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig> {
    let mut train = cfg.train.clone();
    cfg.variant.apply(&mut train);
    train.seed = seed;
    if train.graph == GraphChoice::Gaussian {
        let (src_spec, _) = build_domain_pair(&cfg.world, seed)?;
        let scenes = generate_split(&src_spec, cfg.world.train_scenes.min(8), seed, streams::SRC_TRAIN)?;
        let mut sigmas = Vec::new();
        for scene in &scenes {
            let boxes: Vec<_> = scene.proposals.iter().map(|p| p.bbox).collect();
            sigmas.push(calibrate_sigma(&boxes)?);
        }
        train.sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    }
    Ok(train)
}

/// Generate data, train, and evaluate after every epoch.
pub fn train_run(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    let train_cfg = resolve_train_config(cfg, seed)?;
    let (src_spec, tgt_spec) = build_domain_pair(&cfg.world, seed)?;
    let src_train = generate_split(&src_spec, cfg.world.train_scenes, seed, streams::SRC_TRAIN)?;
    let src_eval = generate_split(&src_spec, cfg.world.eval_scenes, seed, streams::SRC_EVAL)?;
    let tgt_train = generate_split(&tgt_spec, cfg.world.train_scenes, seed, streams::TGT_TRAIN)?;
    let tgt_eval = generate_split(&tgt_spec, cfg.world.eval_scenes, seed, streams::TGT_EVAL)?;

    let src_train = prepare_scenes(&src_train, train_cfg.graph, train_cfg.sigma)?;
    let src_eval = prepare_scenes(&src_eval, train_cfg.graph, train_cfg.sigma)?;
    let tgt_train = prepare_scenes(&tgt_train, train_cfg.graph, train_cfg.sigma)?;
    let tgt_eval = prepare_scenes(&tgt_eval, train_cfg.graph, train_cfg.sigma)?;

    let classes = src_spec.num_classes();
    let mut trainer = Trainer::new(&train_cfg, src_spec.raw_dim, classes)?;
    let mut per_epoch = Vec::with_capacity(train_cfg.epochs);
    for _ in 0..train_cfg.epochs {
        let losses = trainer.train_epoch(&src_train, &tgt_train)?;
        let metrics = evaluate(trainer.model(), &train_cfg, &src_eval, &tgt_eval)?;
        per_epoch.push((losses, metrics));
    }
    Ok(TrainedRun {
        trainer,
        src_eval,
        tgt_eval,
        per_epoch,
    })
}

fn metrics_csv(run: &TrainedRun, config_hash: &str, seed: u64, classes: usize) -> String {
    let mut csv = CsvWriter::new();
    csv.comment(&format!("config={config_hash} seed={seed}"));
    let mut header: Vec<String> = [
        "epoch", "l_det", "l_da_rpn", "l_da_rcnn", "total", "src_acc", "tgt_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for k in 0..classes {
        header.push(format!("tgt_acc_class_{k}"));
    }
    for k in 0..classes {
        header.push(format!("proto_dist_class_{k}"));
    }
    header.push("stage1_sep".to_string());
    csv.row(&header);
    for (epoch, (losses, metrics)) in run.per_epoch.iter().enumerate() {
        let mut row = vec![
            epoch.to_string(),
            fmt_f64(losses.l_det),
            fmt_f64(losses.l_da_rpn),
            fmt_f64(losses.l_da_rcnn),
            fmt_f64(losses.total),
            fmt_f64(metrics.src_accuracy),
            fmt_f64(metrics.tgt_accuracy),
        ];
        row.extend(metrics.per_class_tgt_accuracy.iter().map(|&v| fmt_f64(v)));
        row.extend(metrics.prototype_distance.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(metrics.stage1_separation));
        csv.row(&row);
    }
    csv.finish()
}

/// Embed every evaluation proposal of both domains, project to 2-D.
fn projection_artifacts(run: &TrainedRun) -> Result<(String, String)> {
    let model = run.trainer.model();
    let mut rows = Vec::new();
    let mut tags = Vec::new(); // (class, is_source)
    for (scenes, is_source) in [(&run.src_eval, true), (&run.tgt_eval, false)] {
        for scene in scenes.iter() {
            let cache = model.forward(&scene.raw)?;
            for (i, &label) in scene.labels.iter().enumerate() {
                rows.push(cache.features.row(i).to_owned());
                tags.push((label, is_source));
            }
        }
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).expect("uniform embed dim");
    let projected = pca_project(&stacked)?;

    let mut csv = CsvWriter::new();
    csv.row(&[
        "x".into(),
        "y".into(),
        "class_id".into(),
        "domain".into(),
    ]);
    let mut points = Vec::with_capacity(tags.len());
    for (i, &(class, is_source)) in tags.iter().enumerate() {
        let (x, y) = (projected[[i, 0]], projected[[i, 1]]);
        csv.row(&[
            fmt_f64(x),
            fmt_f64(y),
            class.to_string(),
            if is_source { "source" } else { "target" }.to_string(),
        ]);
        points.push(ScatterPoint {
            x,
            y,
            class_id: class,
            source: is_source,
        });
    }
    let svg = scatter_svg(&points, "final embeddings (2-component projection)");
    Ok((csv.finish(), svg))
}

/// Train one seed and write its artifacts under `dir`.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SingleRunReport> {
    std::fs::create_dir_all(dir)?;
    let run = train_run(cfg, seed)?;
    let config_hash = cfg.hash();
    let classes = cfg.world.foreground_classes + 1;

    std::fs::write(dir.join("metrics.csv"), metrics_csv(&run, &config_hash, seed, classes))?;
    let (proj_csv, proj_svg) = projection_artifacts(&run)?;
    std::fs::write(dir.join("projection.csv"), proj_csv)?;
    std::fs::write(dir.join("projection.svg"), proj_svg)?;

    let (final_losses, final_metrics) = run
        .per_epoch
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidInput("run produced no epochs".into()))?;
    let report = SingleRunReport {
        seed,
        config_hash,
        final_losses,
        final_metrics,
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Run every seed (in parallel) and write the aggregate report last.
pub fn run(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.canonical_dump())?;
    let reports = exec::try_map_indexed(cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        run_single(cfg, seed, &cfg.out_dir.join(format!("seed_{seed}")))
    })?;

    let tgt: Vec<f64> = reports.iter().map(|r| r.final_metrics.tgt_accuracy).collect();
    let src: Vec<f64> = reports.iter().map(|r| r.final_metrics.src_accuracy).collect();
    let (mean_tgt, std_tgt) = mean_std(&tgt);
    let (mean_src, std_src) = mean_std(&src);
    let classes = cfg.world.foreground_classes + 1;
    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        let vals: Vec<f64> = reports
            .iter()
            .map(|r| r.final_metrics.per_class_tgt_accuracy[k])
            .filter(|v| !v.is_nan())
            .collect();
        per_class.push(if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        });
    }

    let aggregate = AggregateReport {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        mean_tgt_accuracy: mean_tgt,
        std_tgt_accuracy: std_tgt,
        mean_src_accuracy: mean_src,
        std_src_accuracy: std_src,
        mean_per_class_tgt_accuracy: per_class,
        runs: reports,
    };
    std::fs::write(
        cfg.out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&aggregate)?,
    )?;
    Ok(aggregate)
}

/// Parameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Gamma,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::InvalidInput(format!(
                "unknown sweep parameter `{other}` (expected lambda1|lambda2|gamma)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Gamma => "gamma",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParam::Lambda1 => cfg.train.lambda1 = value,
            SweepParam::Lambda2 => cfg.train.lambda2 = value,
            SweepParam::Gamma => cfg.train.gamma = value,
        }
    }
}

/// One sweep cell's final numbers.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub tgt_accuracy: f64,
    pub losses: LossReport,
}

/// Run one experiment per value per seed; emit `sweep.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("sweep values must be >= 0".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut cells: Vec<(f64, u64)> = Vec::new();
    for &value in values {
        for &seed in &cfg.seeds {
            cells.push((value, seed));
        }
    }
    let results = exec::try_map_indexed(cells.len(), |i| -> Result<SweepCell> {
        let (value, seed) = cells[i];
        let mut cell_cfg = cfg.clone();
        param.apply(&mut cell_cfg, value);
        // gamma = 0 must be valid: it disables reweighting
        let run = train_run(&cell_cfg, seed)?;
        let (losses, metrics) = run.per_epoch.last().cloned().expect("epochs >= 1");
        Ok(SweepCell {
            value,
            seed,
            tgt_accuracy: metrics.tgt_accuracy,
            losses,
        })
    })?;

    let mut csv = CsvWriter::new();
    csv.comment(&format!(
        "config={} param={} seeds={}",
        cfg.hash(),
        param.label(),
        cfg.seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    csv.row(&[
        "param".into(),
        "value".into(),
        "seed".into(),
        "tgt_acc".into(),
        "l_det".into(),
        "l_da_rpn".into(),
        "l_da_rcnn".into(),
        "total".into(),
    ]);
    for cell in &results {
        csv.row(&[
            param.label().to_string(),
            fmt_f64(cell.value),
            cell.seed.to_string(),
            fmt_f64(cell.tgt_accuracy),
            fmt_f64(cell.losses.l_det),
            fmt_f64(cell.losses.l_da_rpn),
            fmt_f64(cell.losses.l_da_rcnn),
            fmt_f64(cell.losses.total),
        ]);
    }
    csv.write(&cfg.out_dir.join("sweep.csv"))?;
    Ok(results)
}

/// One ablation row: a graph construction variant across all seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub graph: &'static str,
    pub learnable_transform: bool,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// The five graph-construction variants: raw proposals, gaussian with
/// calibrated sigma, gaussian with the learnable transform, IoU, and IoU
/// with the learnable transform. All rows share the config's seeds.
pub fn ablate_graph(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let variants: [(GraphChoice, bool); 5] = [
        (GraphChoice::None, false),
        (GraphChoice::Gaussian, false),
        (GraphChoice::Gaussian, true),
        (GraphChoice::Iou, false),
        (GraphChoice::Iou, true),
    ];
    let mut cells: Vec<(usize, u64)> = Vec::new();
    for (vi, _) in variants.iter().enumerate() {
        for &seed in &cfg.seeds {
            cells.push((vi, seed));
        }
    }
    let results = exec::try_map_indexed(cells.len(), |i| -> Result<f64> {
        let (vi, seed) = cells[i];
        let (graph, lp) = variants[vi];
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.graph = graph;
        cell_cfg.train.learnable_transform = lp;
        let run = train_run(&cell_cfg, seed)?;
        Ok(run.per_epoch.last().expect("epochs >= 1").1.tgt_accuracy)
    })?;

    let seeds_per_variant = cfg.seeds.len();
    let mut rows = Vec::with_capacity(variants.len());
    for (vi, (graph, lp)) in variants.iter().enumerate() {
        let accs: Vec<f64> = results
            [vi * seeds_per_variant..(vi + 1) * seeds_per_variant]
            .to_vec();
        let (mean, std) = mean_std(&accs);
        rows.push(AblationRow {
            graph: graph.label(),
            learnable_transform: *lp,
            accuracies: accs,
            mean,
            std,
        });
    }

    let mut csv = CsvWriter::new();
    csv.comment(&format!(
        "config={} seeds={}",
        cfg.hash(),
        cfg.seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    let mut header = vec![
        "graph".to_string(),
        "learnable_transform".to_string(),
        "mean_tgt_acc".to_string(),
        "std_tgt_acc".to_string(),
    ];
    for seed in &cfg.seeds {
        header.push(format!("tgt_acc_seed_{seed}"));
    }
    csv.row(&header);
    for row in &rows {
        let mut fields = vec![
            row.graph.to_string(),
            row.learnable_transform.to_string(),
            fmt_f64(row.mean),
            fmt_f64(row.std),
        ];
        fields.extend(row.accuracies.iter().map(|&a| fmt_f64(a)));
        csv.row(&fields);
    }
    csv.write(&cfg.out_dir.join("ablation.csv"))?;
    Ok(rows)
}

/// Write a generated split as one JSON file per scene plus a manifest
/// that allows exact regeneration.
pub fn save_split_dir(
    dir: &Path,
    spec: &crate::sim::DomainSpec,
    scenes: &[Scene],
    seed: u64,
    split: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        split: u64,
        scenes: usize,
        spec: &'a crate::sim::DomainSpec,
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&Manifest {
            seed,
            split,
            scenes: scenes.len(),
            spec,
        })?,
    )?;
    for (i, scene) in scenes.iter().enumerate() {
        std::fs::write(
            dir.join(format!("scene_{i:04}.json")),
            serde_json::to_string(scene)?,
        )?;
    }
    Ok(())
}

/// Output directory helper: error early when the target is not writable.
pub fn ensure_writable(dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"ok")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FlatConfig, Variant};

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let flat = FlatConfig::parse(
            "sim.train_scenes = 6\n\
             sim.eval_scenes = 6\n\
             sim.classes = 3\n\
             sim.raw_dim = 5\n\
             train.epochs = 2\n\
             train.hidden_dim = 8\n\
             train.embed_dim = 5\n\
             experiment.seeds = 1,2\n",
        )
        .unwrap();
        let mut cfg = ExperimentConfig::from_flat(flat).unwrap();
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn run_writes_all_artifacts_and_repeats_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let agg = run(&cfg).unwrap();
        assert_eq!(agg.runs.len(), 2);
        for seed in [1u64, 2] {
            let base = dir.path().join(format!("seed_{seed}"));
            for file in ["metrics.csv", "report.json", "projection.csv", "projection.svg"] {
                assert!(base.join(file).exists(), "missing {file}");
            }
        }
        assert!(dir.path().join("aggregate.json").exists());

        let first = std::fs::read(dir.path().join("seed_1/metrics.csv")).unwrap();
        let agg2 = run(&cfg).unwrap();
        let second = std::fs::read(dir.path().join("seed_1/metrics.csv")).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            agg.mean_tgt_accuracy.to_bits(),
            agg2.mean_tgt_accuracy.to_bits()
        );
    }

    #[test]
    fn source_only_reports_zero_alignment_losses() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.variant = Variant::SourceOnly;
        cfg.seeds = vec![3];
        let agg = run(&cfg).unwrap();
        let losses = agg.runs[0].final_losses;
        assert_eq!(losses.l_da_rpn, 0.0);
        assert_eq!(losses.l_da_rcnn, 0.0);
    }

    #[test]
    fn singleton_sweep_matches_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.seeds = vec![1];
        let agg = run(&cfg).unwrap();
        let cells = sweep(&cfg, SweepParam::Lambda1, &[cfg.train.lambda1]).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(
            cells[0].tgt_accuracy.to_bits(),
            agg.runs[0].final_metrics.tgt_accuracy.to_bits()
        );
        assert!(dir.path().join("sweep.csv").exists());
    }

    #[test]
    fn gamma_zero_sweep_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.seeds = vec![1];
        let cells = sweep(&cfg, SweepParam::Gamma, &[0.0]).unwrap();
        assert_eq!(cells.len(), 1);
    }

    #[test]
    fn ablation_emits_five_rows_sharing_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.seeds = vec![1];
        let rows = ablate_graph(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].graph, "none");
        assert!(!rows[0].learnable_transform);
        assert_eq!(rows[3].graph, "iou");
        let text = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(text.lines().count(), 7); // manifest + header + 5 rows
    }
}
