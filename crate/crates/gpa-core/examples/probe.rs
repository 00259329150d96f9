// Temporary diagnostic: where does the rare class's confidence mass sit,
// and does alignment actually close its true cross-domain gap?

use gpa_core::config::{ExperimentConfig, FlatConfig};
use gpa_core::experiment::resolve_train_config;
use gpa_core::sim::{build_domain_pair, generate_split, streams};
use gpa_core::trainer::{evaluate, prepare_scenes, PreparedScene, Trainer};
use ndarray::Array1;

fn rare_stats(model: &gpa_core::model::ToyModel, scenes: &[PreparedScene], class: usize) -> (f64, Array1<f64>) {
    // precision of the rare column's confidence mass + true-label centroid
    let mut mass_true = 0.0;
    let mut mass_all = 0.0;
    let mut centroid = Array1::zeros(model.embed_dim());
    let mut count = 0.0_f64;
    for s in scenes {
        let cache = model.forward(&s.raw).unwrap();
        for (i, &label) in s.labels.iter().enumerate() {
            let p = cache.probs2[[i, class]];
            mass_all += p;
            if label == class {
                mass_true += p;
                centroid = centroid + cache.features.row(i).to_owned();
                count += 1.0;
            }
        }
    }
    (mass_true / mass_all.max(1e-12), centroid / count.max(1.0))
}

fn main() {
    let gamma: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let seed: u64 = std::env::args().nth(2).unwrap().parse().unwrap();
    let flat = FlatConfig::parse(
        "train.learning_rate = 0.02\ntrain.epochs = 48\ntrain.batch_scenes = 16\n\
         train.embed_dim = 16\ntrain.hidden_dim = 32\nsim.class_spread = 3.5\n\
         sim.instances_min = 3\nsim.instances_max = 5\n\
         sim.frequencies = 0.70,0.15,0.10,0.05\nsim.train_scenes = 96\nsim.eval_scenes = 128\n\
         sim.rotation_angle = 0.3\nsim.offset_scale = 3.0\n",
    )
    .unwrap();
    let mut cfg = ExperimentConfig::from_flat(flat).unwrap();
    cfg.train.gamma = gamma;
    let train_cfg = resolve_train_config(&cfg, seed).unwrap();
    let (src_spec, tgt_spec) = build_domain_pair(&cfg.world, seed).unwrap();
    let src_train = prepare_scenes(
        &generate_split(&src_spec, cfg.world.train_scenes, seed, streams::SRC_TRAIN).unwrap(),
        train_cfg.graph,
        train_cfg.sigma,
    )
    .unwrap();
    let tgt_train = prepare_scenes(
        &generate_split(&tgt_spec, cfg.world.train_scenes, seed, streams::TGT_TRAIN).unwrap(),
        train_cfg.graph,
        train_cfg.sigma,
    )
    .unwrap();
    let src_eval = prepare_scenes(
        &generate_split(&src_spec, cfg.world.eval_scenes, seed, streams::SRC_EVAL).unwrap(),
        train_cfg.graph,
        train_cfg.sigma,
    )
    .unwrap();
    let tgt_eval = prepare_scenes(
        &generate_split(&tgt_spec, cfg.world.eval_scenes, seed, streams::TGT_EVAL).unwrap(),
        train_cfg.graph,
        train_cfg.sigma,
    )
    .unwrap();

    let classes = src_spec.num_classes();
    let rare = classes - 1;
    let mut trainer = Trainer::new(&train_cfg, src_spec.raw_dim, classes).unwrap();
    for epoch in 0..train_cfg.epochs {
        trainer.train_epoch(&src_train, &tgt_train).unwrap();
        if epoch % 6 == 0 || epoch == train_cfg.epochs - 1 {
            let (prec_s, cen_s) = rare_stats(trainer.model(), &src_eval, rare);
            let (prec_t, cen_t) = rare_stats(trainer.model(), &tgt_eval, rare);
            let gap = {
                let d = &cen_s - &cen_t;
                d.dot(&d).sqrt()
            };
            let m = evaluate(trainer.model(), &train_cfg, &src_eval, &tgt_eval).unwrap();
            println!(
                "epoch {epoch:2}: precision src {prec_s:.3} tgt {prec_t:.3} | true-gap {gap:.3} | rare tgt acc {:.3} | overall {:.3}",
                m.per_class_tgt_accuracy[rare], m.tgt_accuracy
            );
        }
    }
}
