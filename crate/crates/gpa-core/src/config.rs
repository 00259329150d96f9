//! Flat `key = value` configuration with dotted sections.
//!
//! Every key has a default, so an empty file (or no file) runs the
//! reference experiment. Unknown keys are rejected by name, as are values
//! that fail to parse.

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::sim::WorldParams;
use crate::trainer::{GraphChoice, TrainConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Parsed key/value pairs; consumed while building typed configs.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn empty() -> Self {
        FlatConfig::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig {
                    key: format!("line {}", lineno + 1),
                    reason: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::InvalidConfig {
                    key: format!("line {}", lineno + 1),
                    reason: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::InvalidConfig {
                    key,
                    reason: "duplicate key".into(),
                });
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::InvalidConfig {
                key: key.into(),
                reason: format!("expected a number, got `{v}`"),
            }),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::InvalidConfig {
                key: key.into(),
                reason: format!("expected an integer, got `{v}`"),
            }),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: format!("expected true/false, got `{v}`"),
                }),
            },
        }
    }

    fn take_f64_list(&mut self, key: &str) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(vec![]),
            Some(v) if v.is_empty() => Ok(vec![]),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::InvalidConfig {
                        key: key.into(),
                        reason: format!("expected numbers, got `{s}`"),
                    })
                })
                .collect(),
        }
    }

    fn take_u64_list(&mut self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::InvalidConfig {
                        key: key.into(),
                        reason: format!("expected integers, got `{s}`"),
                    })
                })
                .collect(),
        }
    }

    fn finish(&self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::InvalidConfig {
                key: key.clone(),
                reason: "unknown key".into(),
            });
        }
        Ok(())
    }
}

/// Which alignment configuration a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SourceOnly,
    RpnAlign,
    RcnnAlign,
    TwoStage,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(Variant::SourceOnly),
            "rpn-align" => Ok(Variant::RpnAlign),
            "rcnn-align" => Ok(Variant::RcnnAlign),
            "two-stage" => Ok(Variant::TwoStage),
            other => Err(Error::InvalidConfig {
                key: "experiment.variant".into(),
                reason: format!(
                    "unknown variant `{other}` (expected source-only|rpn-align|rcnn-align|two-stage)"
                ),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::RpnAlign => "rpn-align",
            Variant::RcnnAlign => "rcnn-align",
            Variant::TwoStage => "two-stage",
        }
    }

    /// Force the trade-off weights this variant stands for.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match self {
            Variant::SourceOnly => {
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
            }
            Variant::RpnAlign => cfg.lambda2 = 0.0,
            Variant::RcnnAlign => cfg.lambda1 = 0.0,
            Variant::TwoStage => {}
        }
    }
}

/// Everything one `run`/`sweep`/`ablate-graph` invocation needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub world: WorldParams,
    pub train: TrainConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Build from parsed keys, filling documented defaults.
    pub fn from_flat(mut flat: FlatConfig) -> Result<Self> {
        let world = WorldParams {
            raw_dim: flat.take_usize("sim.raw_dim", 8)?,
            foreground_classes: flat.take_usize("sim.classes", 4)?,
            modes_per_class: flat.take_usize("sim.modes_per_class", 2)?,
            class_spread: flat.take_f64("sim.class_spread", 3.0)?,
            mode_spread: flat.take_f64("sim.mode_spread", 1.2)?,
            appearance_noise: flat.take_f64("sim.appearance_noise", 0.35)?,
            background_overlap: flat.take_f64("sim.background_overlap", 0.35)?,
            rotation_angle: flat.take_f64("sim.rotation_angle", 0.55)?,
            offset_scale: flat.take_f64("sim.offset_scale", 1.6)?,
            frequencies: flat.take_f64_list("sim.frequencies")?,
            scene_extent: flat.take_f64("sim.scene_extent", 64.0)?,
            instance_size: (
                flat.take_f64("sim.instance_size_min", 6.0)?,
                flat.take_f64("sim.instance_size_max", 20.0)?,
            ),
            instances_per_scene: (
                flat.take_usize("sim.instances_min", 2)?,
                flat.take_usize("sim.instances_max", 4)?,
            ),
            proposals_per_instance: (
                flat.take_usize("sim.proposals_min", 2)?,
                flat.take_usize("sim.proposals_max", 4)?,
            ),
            background_proposals: flat.take_usize("sim.background_proposals", 3)?,
            jitter: flat.take_f64("sim.jitter", 0.35)?,
            feature_noise: flat.take_f64("sim.feature_noise", 0.25)?,
            train_scenes: flat.take_usize("sim.train_scenes", 48)?,
            eval_scenes: flat.take_usize("sim.eval_scenes", 64)?,
        };

        let margin = flat.take_f64("train.margin", 1.0)?;
        let graph_str = flat
            .take("train.graph")
            .unwrap_or_else(|| "iou".to_string());
        let train = TrainConfig {
            gamma: flat.take_f64("train.gamma", 2.0)?,
            margin_rpn: flat.take_f64("train.margin_rpn", margin)?,
            margin_rcnn: flat.take_f64("train.margin_rcnn", margin)?,
            lambda1: flat.take_f64("train.lambda1", 1.0)?,
            lambda2: flat.take_f64("train.lambda2", 1.0)?,
            learning_rate: flat.take_f64("train.learning_rate", 0.03)?,
            momentum: flat.take_f64("train.momentum", 0.9)?,
            epochs: flat.take_usize("train.epochs", 48)?,
            warmup_epochs: flat.take_usize("train.warmup_epochs", 6)?,
            batch_scenes: flat.take_usize("train.batch_scenes", 6)?,
            hidden_dim: flat.take_usize("train.hidden_dim", 16)?,
            embed_dim: flat.take_usize("train.embed_dim", 8)?,
            graph: GraphChoice::parse(&graph_str).map_err(|e| Error::InvalidConfig {
                key: "train.graph".into(),
                reason: e.to_string(),
            })?,
            sigma: flat.take_f64("train.sigma", 8.0)?,
            confidence_grad: flat.take_bool("train.confidence_grad", false)?,
            learnable_transform: flat.take_bool("train.learnable_transform", false)?,
            seed: 0, // set per run
        };
        train.validate()?;

        let variant_str = flat
            .take("experiment.variant")
            .unwrap_or_else(|| "two-stage".to_string());
        let variant = Variant::parse(&variant_str)?;
        let seeds = flat.take_u64_list("experiment.seeds", &[1, 2, 3, 4, 5])?;
        if seeds.is_empty() {
            return Err(Error::InvalidConfig {
                key: "experiment.seeds".into(),
                reason: "seed list must not be empty".into(),
            });
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::InvalidConfig {
                key: "experiment.seeds".into(),
                reason: "seed list contains duplicates".into(),
            });
        }
        let out_dir = PathBuf::from(
            flat.take("experiment.out")
                .unwrap_or_else(|| "gpa_out".to_string()),
        );

        flat.finish()?;
        Ok(ExperimentConfig {
            world,
            train,
            variant,
            seeds,
            out_dir,
        })
    }

    /// All resolved keys, sorted, one per line. Feeds the config hash and
    /// the manifest lines of emitted CSVs.
    pub fn canonical_dump(&self) -> String {
        let w = &self.world;
        let t = &self.train;
        let fmt_list = |v: &[f64]| {
            v.iter()
                .map(|&x| fmt_f64(x))
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut lines = vec![
            format!("experiment.seeds = {seeds}"),
            format!("experiment.variant = {}", self.variant.label()),
            format!("sim.appearance_noise = {}", fmt_f64(w.appearance_noise)),
            format!("sim.background_overlap = {}", fmt_f64(w.background_overlap)),
            format!("sim.background_proposals = {}", w.background_proposals),
            format!("sim.class_spread = {}", fmt_f64(w.class_spread)),
            format!("sim.classes = {}", w.foreground_classes),
            format!("sim.eval_scenes = {}", w.eval_scenes),
            format!("sim.feature_noise = {}", fmt_f64(w.feature_noise)),
            format!("sim.frequencies = {}", fmt_list(&w.frequencies)),
            format!("sim.instance_size_max = {}", fmt_f64(w.instance_size.1)),
            format!("sim.instance_size_min = {}", fmt_f64(w.instance_size.0)),
            format!("sim.instances_max = {}", w.instances_per_scene.1),
            format!("sim.instances_min = {}", w.instances_per_scene.0),
            format!("sim.jitter = {}", fmt_f64(w.jitter)),
            format!("sim.mode_spread = {}", fmt_f64(w.mode_spread)),
            format!("sim.modes_per_class = {}", w.modes_per_class),
            format!("sim.offset_scale = {}", fmt_f64(w.offset_scale)),
            format!("sim.proposals_max = {}", w.proposals_per_instance.1),
            format!("sim.proposals_min = {}", w.proposals_per_instance.0),
            format!("sim.raw_dim = {}", w.raw_dim),
            format!("sim.rotation_angle = {}", fmt_f64(w.rotation_angle)),
            format!("sim.scene_extent = {}", fmt_f64(w.scene_extent)),
            format!("sim.train_scenes = {}", w.train_scenes),
            format!("train.batch_scenes = {}", t.batch_scenes),
            format!("train.confidence_grad = {}", t.confidence_grad),
            format!("train.embed_dim = {}", t.embed_dim),
            format!("train.epochs = {}", t.epochs),
            format!("train.warmup_epochs = {}", t.warmup_epochs),
            format!("train.gamma = {}", fmt_f64(t.gamma)),
            format!("train.graph = {}", t.graph.label()),
            format!("train.hidden_dim = {}", t.hidden_dim),
            format!("train.lambda1 = {}", fmt_f64(t.lambda1)),
            format!("train.lambda2 = {}", fmt_f64(t.lambda2)),
            format!("train.learnable_transform = {}", t.learnable_transform),
            format!("train.learning_rate = {}", fmt_f64(t.learning_rate)),
            format!("train.margin_rcnn = {}", fmt_f64(t.margin_rcnn)),
            format!("train.margin_rpn = {}", fmt_f64(t.margin_rpn)),
            format!("train.momentum = {}", fmt_f64(t.momentum)),
            format!("train.sigma = {}", fmt_f64(t.sigma)),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Short hex digest of the canonical dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_dump().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_reference_experiment() {
        let cfg = ExperimentConfig::from_flat(FlatConfig::empty()).unwrap();
        assert_eq!(cfg.variant, Variant::TwoStage);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.train.gamma, 2.0);
        assert_eq!(cfg.train.margin_rpn, 1.0);
        assert_eq!(cfg.train.lambda1, 1.0);
        assert_eq!(cfg.train.graph, GraphChoice::Iou);
    }

    #[test]
    fn unknown_key_is_named() {
        let flat = FlatConfig::parse("train.gama = 2.0\n").unwrap();
        let err = ExperimentConfig::from_flat(flat).unwrap_err();
        assert!(err.to_string().contains("train.gama"), "{err}");
    }

    #[test]
    fn bad_value_is_named() {
        let flat = FlatConfig::parse("train.gamma = soup\n").unwrap();
        let err = ExperimentConfig::from_flat(flat).unwrap_err();
        assert!(err.to_string().contains("train.gamma"), "{err}");
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let flat = FlatConfig::parse("experiment.seeds = 1,2,2\n").unwrap();
        assert!(ExperimentConfig::from_flat(flat).is_err());
    }

    #[test]
    fn margin_sets_both_stages() {
        let flat = FlatConfig::parse("train.margin = 1.5\n").unwrap();
        let cfg = ExperimentConfig::from_flat(flat).unwrap();
        assert_eq!(cfg.train.margin_rpn, 1.5);
        assert_eq!(cfg.train.margin_rcnn, 1.5);
        let flat =
            FlatConfig::parse("train.margin = 1.5\ntrain.margin_rpn = 0.7\n").unwrap();
        let cfg = ExperimentConfig::from_flat(flat).unwrap();
        assert_eq!(cfg.train.margin_rpn, 0.7);
        assert_eq!(cfg.train.margin_rcnn, 1.5);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let flat = FlatConfig::parse("# comment\n\ntrain.epochs = 5\n").unwrap();
        let cfg = ExperimentConfig::from_flat(flat).unwrap();
        assert_eq!(cfg.train.epochs, 5);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_flat(FlatConfig::empty()).unwrap();
        let b = ExperimentConfig::from_flat(FlatConfig::parse("train.gamma = 0.5\n").unwrap())
            .unwrap();
        assert_ne!(a.hash(), b.hash());
        let c = ExperimentConfig::from_flat(FlatConfig::empty()).unwrap();
        assert_eq!(a.hash(), c.hash());
    }
}
