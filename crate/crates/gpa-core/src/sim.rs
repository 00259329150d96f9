//! Synthetic two-domain detection data.
//!
//! Each scene holds ground-truth instances (box, class, appearance vector)
//! and region proposals jittered around them. A proposal's raw feature is
//! the overlap-weighted blend of the instance appearances it covers plus a
//! background vector for the uncovered fraction, so feature quality
//! degrades smoothly as jitter grows. The target domain differs from the
//! source by an orthogonal map plus offset applied to all appearances.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// One appearance cluster: an isotropic Gaussian in raw-feature space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceMode {
    pub mean: Array1<f64>,
    pub scale: f64,
}

/// All appearance modes of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub modes: Vec<AppearanceMode>,
}

/// Orthogonal map plus offset applied to every target-domain appearance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation: Array2<f64>,
    pub offset: Array1<f64>,
}

/// Full generative description of one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub raw_dim: usize,
    /// Foreground classes 1..=K; index 0 of this vec is class 1.
    pub foreground: Vec<ClassAppearance>,
    pub background: ClassAppearance,
    pub shift: Option<DomainShift>,
    /// Foreground class frequencies, positive, summing to 1.
    pub frequencies: Vec<f64>,
    pub scene_extent: f64,
    pub instance_size: (f64, f64),
    pub instances_per_scene: (usize, usize),
    pub proposals_per_instance: (usize, usize),
    pub background_proposals: usize,
    /// Relative center/size noise of proposals; 0 means proposals equal
    /// their ground-truth boxes.
    pub jitter: f64,
    /// Isotropic noise added to every proposal feature.
    pub feature_noise: f64,
}

impl DomainSpec {
    /// Total class count including background.
    pub fn num_classes(&self) -> usize {
        self.foreground.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.raw_dim == 0 {
            return fail("raw_dim must be >= 1".into());
        }
        if self.foreground.is_empty() {
            return fail("need at least one foreground class".into());
        }
        if self.frequencies.len() != self.foreground.len() {
            return fail(format!(
                "{} frequencies for {} classes",
                self.frequencies.len(),
                self.foreground.len()
            ));
        }
        if self.frequencies.iter().any(|&f| f <= 0.0) {
            return fail("class frequencies must be positive".into());
        }
        let sum: f64 = self.frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("class frequencies sum to {sum}, expected 1"));
        }
        for class in self.foreground.iter().chain([&self.background]) {
            if class.modes.is_empty() {
                return fail("every class needs at least one appearance mode".into());
            }
            for mode in &class.modes {
                if mode.mean.len() != self.raw_dim {
                    return fail(format!(
                        "appearance mode has dim {}, expected {}",
                        mode.mean.len(),
                        self.raw_dim
                    ));
                }
                if mode.scale < 0.0 {
                    return fail("mode scale must be >= 0".into());
                }
            }
        }
        if !(self.scene_extent > 0.0) {
            return fail("scene extent must be positive".into());
        }
        let (lo, hi) = self.instance_size;
        if !(lo > 0.0) || hi < lo || hi >= self.scene_extent {
            return fail(format!(
                "instance size range ({lo}, {hi}) must satisfy 0 < lo <= hi < extent"
            ));
        }
        let (ilo, ihi) = self.instances_per_scene;
        if ilo == 0 || ihi < ilo {
            return fail(format!(
                "instances per scene range ({ilo}, {ihi}) must satisfy 1 <= lo <= hi"
            ));
        }
        let (plo, phi) = self.proposals_per_instance;
        if plo == 0 || phi < plo {
            return fail(format!(
                "proposals per instance range ({plo}, {phi}) must satisfy 1 <= lo <= hi"
            ));
        }
        if self.jitter < 0.0 || self.feature_noise < 0.0 {
            return fail("jitter and feature noise must be >= 0".into());
        }
        if let Some(shift) = &self.shift {
            let r = self.raw_dim;
            if shift.rotation.nrows() != r || shift.rotation.ncols() != r || shift.offset.len() != r
            {
                return fail("domain shift dimensions disagree with raw_dim".into());
            }
            let gram = shift.rotation.t().dot(&shift.rotation);
            for i in 0..r {
                for j in 0..r {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    if (gram[[i, j]] - expect).abs() > 1e-8 {
                        return fail("domain shift map is not orthogonal".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth object in a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    /// 1-based foreground class id.
    pub class_id: usize,
    pub appearance: Array1<f64>,
}

/// Region proposal: jittered box plus blended raw feature. The true class
/// (0 for background) is kept for evaluation only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub raw_feature: Array1<f64>,
    pub true_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub instances: Vec<Instance>,
    pub proposals: Vec<Proposal>,
}

fn sample_gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

fn sample_appearance(
    class: &ClassAppearance,
    shift: Option<&DomainShift>,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    let mode = &class.modes[rng.random_range(0..class.modes.len())];
    let noise = sample_gaussian_vec(mode.mean.len(), rng);
    let raw = &mode.mean + &(noise * mode.scale);
    match shift {
        Some(s) => s.rotation.dot(&raw) + &s.offset,
        None => raw,
    }
}

fn sample_class(frequencies: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &f) in frequencies.iter().enumerate() {
        acc += f;
        if u < acc {
            return i + 1;
        }
    }
    frequencies.len()
}

fn sample_box(extent: f64, size: (f64, f64), rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(size.0..=size.1);
    let h = rng.random_range(size.0..=size.1);
    let cx = rng.random_range(w / 2.0..extent - w / 2.0);
    let cy = rng.random_range(h / 2.0..extent - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .expect("positive sizes inside the extent")
}

/// Jitter a ground-truth box. Resamples until the proposal still overlaps
/// its instance; with jitter 0 the box is returned untouched.
fn jitter_box(inst: &BBox, jitter: f64, rng: &mut ChaCha8Rng) -> BBox {
    if jitter == 0.0 {
        return *inst;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (cx, cy) = inst.center();
    let (w, h) = (inst.width(), inst.height());
    for _ in 0..100 {
        let ncx = cx + jitter * w * normal.sample(rng);
        let ncy = cy + jitter * h * normal.sample(rng);
        let nw = w * (jitter * normal.sample(rng)).exp();
        let nh = h * (jitter * normal.sample(rng)).exp();
        let candidate = BBox::new(
            ncx - nw / 2.0,
            ncy - nh / 2.0,
            ncx + nw / 2.0,
            ncy + nh / 2.0,
        )
        .expect("positive size");
        if iou(&candidate, inst) > 0.0 {
            return candidate;
        }
    }
    *inst
}

/// Generate one scene. Deterministic given the stream state.
pub fn generate_scene(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    spec.validate()?;
    let n_instances = rng.random_range(spec.instances_per_scene.0..=spec.instances_per_scene.1);

    let mut instances: Vec<Instance> = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        let class_id = sample_class(&spec.frequencies, rng);
        let appearance =
            sample_appearance(&spec.foreground[class_id - 1], spec.shift.as_ref(), rng);
        // keep instances from piling on top of each other, but give up
        // quickly so dense scenes stay possible
        let mut bbox = sample_box(spec.scene_extent, spec.instance_size, rng);
        for _ in 0..20 {
            if instances.iter().all(|i| iou(&i.bbox, &bbox) < 0.2) {
                break;
            }
            bbox = sample_box(spec.scene_extent, spec.instance_size, rng);
        }
        instances.push(Instance {
            bbox,
            class_id,
            appearance,
        });
    }

    let mut proposals: Vec<(BBox, usize)> = Vec::new();
    for inst in &instances {
        let count = rng.random_range(spec.proposals_per_instance.0..=spec.proposals_per_instance.1);
        for _ in 0..count {
            proposals.push((jitter_box(&inst.bbox, spec.jitter, rng), inst.class_id));
        }
    }
    for _ in 0..spec.background_proposals {
        let mut best = sample_box(spec.scene_extent, spec.instance_size, rng);
        let overlap = |b: &BBox| {
            instances
                .iter()
                .map(|i| iou(&i.bbox, b))
                .fold(0.0_f64, f64::max)
        };
        let mut best_overlap = overlap(&best);
        for _ in 0..50 {
            if best_overlap <= 0.25 {
                break;
            }
            let candidate = sample_box(spec.scene_extent, spec.instance_size, rng);
            let o = overlap(&candidate);
            if o < best_overlap {
                best = candidate;
                best_overlap = o;
            }
        }
        proposals.push((best, 0));
    }

    let mut out = Vec::with_capacity(proposals.len());
    for (bbox, true_class) in proposals {
        let area = bbox.area();
        let mut blend = Array1::zeros(spec.raw_dim);
        let mut covered = 0.0;
        for inst in &instances {
            let w = if area > 0.0 {
                bbox.intersection_area(&inst.bbox) / area
            } else {
                0.0
            };
            if w > 0.0 {
                blend.scaled_add(w, &inst.appearance);
                covered += w;
            }
        }
        let bg_weight = (1.0 - covered).max(0.0);
        let bg_appearance = sample_appearance(&spec.background, spec.shift.as_ref(), rng);
        blend.scaled_add(bg_weight, &bg_appearance);
        let total = covered + bg_weight;
        if total > 0.0 {
            blend.mapv_inplace(|v| v / total);
        }
        if spec.feature_noise > 0.0 {
            let noise = sample_gaussian_vec(spec.raw_dim, rng);
            blend.scaled_add(spec.feature_noise, &noise);
        }
        out.push(Proposal {
            bbox,
            raw_feature: blend,
            true_class,
        });
    }

    Ok(Scene {
        instances,
        proposals: out,
    })
}

/// Generate a reproducible list of scenes. Scene `i` always draws from
/// the substream `(split << 32) | i` of `seed`, so the output is
/// identical whether scenes are generated in parallel or not.
pub fn generate_split(spec: &DomainSpec, n_scenes: usize, seed: u64, split: u64) -> Result<Vec<Scene>> {
    spec.validate()?;
    crate::exec::try_map_indexed(n_scenes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split << 32) | i as u64);
        generate_scene(spec, &mut rng)
    })
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let m = Array2::from_shape_fn((dim, dim), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        });
        if let Some(q) = gram_schmidt(&m) {
            return q;
        }
    }
}

fn gram_schmidt(m: &Array2<f64>) -> Option<Array2<f64>> {
    let dim = m.nrows();
    let mut q = Array2::zeros((dim, dim));
    for j in 0..dim {
        let mut v = m.column(j).to_owned();
        // two passes of re-orthogonalization
        for _ in 0..2 {
            for i in 0..j {
                let qi = q.column(i);
                let proj = qi.dot(&v);
                v.scaled_add(-proj, &qi.to_owned());
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-10 {
            return None;
        }
        v.mapv_inplace(|x| x / norm);
        q.column_mut(j).assign(&v);
    }
    Some(q)
}

/// Rotation by `angle` in `dim/2` random orthogonal planes.
pub fn rotation_by_angle(dim: usize, angle: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let q = random_orthogonal(dim, rng);
    let mut block = Array2::eye(dim);
    let (c, s) = (angle.cos(), angle.sin());
    for p in 0..dim / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        block[[i, i]] = c;
        block[[i, j]] = -s;
        block[[j, i]] = s;
        block[[j, j]] = c;
    }
    q.dot(&block).dot(&q.t())
}

/// Knobs for building a matched source/target spec pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldParams {
    pub raw_dim: usize,
    pub foreground_classes: usize,
    pub modes_per_class: usize,
    /// Spread of class centers in appearance space.
    pub class_spread: f64,
    /// Spread of a class's modes around its center.
    pub mode_spread: f64,
    /// Within-mode appearance noise.
    pub appearance_noise: f64,
    /// 0 keeps background appearances independent of foreground ones; 1
    /// drops them onto foreground modes.
    pub background_overlap: f64,
    pub rotation_angle: f64,
    pub offset_scale: f64,
    /// Empty means uniform frequencies.
    pub frequencies: Vec<f64>,
    pub scene_extent: f64,
    pub instance_size: (f64, f64),
    pub instances_per_scene: (usize, usize),
    pub proposals_per_instance: (usize, usize),
    pub background_proposals: usize,
    pub jitter: f64,
    pub feature_noise: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

/// Substream ids reserved by the experiment layout.
pub mod streams {
    pub const SRC_TRAIN: u64 = 0;
    pub const SRC_EVAL: u64 = 1;
    pub const TGT_TRAIN: u64 = 2;
    pub const TGT_EVAL: u64 = 3;
    pub const WORLD: u64 = 10;
    pub const SHIFT: u64 = 11;
    pub const TRAINER: u64 = 12;
}

/// Build a source/target spec pair sharing class structure; the target
/// differs by the orthogonal shift sampled once from the seed.
pub fn build_domain_pair(params: &WorldParams, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
    if params.foreground_classes == 0 || params.modes_per_class == 0 {
        return Err(Error::InvalidSpec(
            "need at least one class with at least one mode".into(),
        ));
    }
    if params.foreground_classes > params.raw_dim {
        return Err(Error::InvalidSpec(format!(
            "need raw_dim >= classes for the orthogonal class frame ({} < {})",
            params.raw_dim, params.foreground_classes
        )));
    }
    let mut world_rng = ChaCha8Rng::seed_from_u64(seed);
    world_rng.set_stream(streams::WORLD << 32);

    // class centers sit on a randomly oriented orthonormal frame, so every
    // pair of classes is equally far apart; multi-modality and background
    // overlap provide the difficulty
    let frame = random_orthogonal(params.raw_dim, &mut world_rng);
    let mut foreground = Vec::with_capacity(params.foreground_classes);
    let mut all_fg_modes: Vec<Array1<f64>> = Vec::new();
    for k in 0..params.foreground_classes {
        let center = frame.column(k).to_owned() * params.class_spread;
        let modes = (0..params.modes_per_class)
            .map(|_| AppearanceMode {
                mean: &center
                    + &(sample_gaussian_vec(params.raw_dim, &mut world_rng) * params.mode_spread),
                scale: params.appearance_noise,
            })
            .collect::<Vec<_>>();
        all_fg_modes.extend(modes.iter().map(|m| m.mean.clone()));
        foreground.push(ClassAppearance { modes });
    }
    let background_modes = (0..params.modes_per_class)
        .map(|_| {
            let fresh = sample_gaussian_vec(params.raw_dim, &mut world_rng) * params.class_spread;
            let anchor = &all_fg_modes[world_rng.random_range(0..all_fg_modes.len())];
            AppearanceMode {
                mean: fresh * (1.0 - params.background_overlap)
                    + anchor * params.background_overlap,
                scale: params.appearance_noise,
            }
        })
        .collect();
    let background = ClassAppearance {
        modes: background_modes,
    };

    let frequencies = if params.frequencies.is_empty() {
        vec![1.0 / params.foreground_classes as f64; params.foreground_classes]
    } else {
        params.frequencies.clone()
    };

    let source = DomainSpec {
        raw_dim: params.raw_dim,
        foreground,
        background,
        shift: None,
        frequencies,
        scene_extent: params.scene_extent,
        instance_size: params.instance_size,
        instances_per_scene: params.instances_per_scene,
        proposals_per_instance: params.proposals_per_instance,
        background_proposals: params.background_proposals,
        jitter: params.jitter,
        feature_noise: params.feature_noise,
    };
    source.validate()?;

    let mut shift_rng = ChaCha8Rng::seed_from_u64(seed);
    shift_rng.set_stream(streams::SHIFT << 32);
    let rotation = rotation_by_angle(params.raw_dim, params.rotation_angle, &mut shift_rng);
    let direction = sample_gaussian_vec(params.raw_dim, &mut shift_rng);
    let norm = direction.dot(&direction).sqrt().max(1e-12);
    let offset = direction * (params.offset_scale / norm);

    let target = DomainSpec {
        shift: Some(DomainShift { rotation, offset }),
        ..source.clone()
    };
    target.validate()?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(jitter: f64, noise: f64) -> DomainSpec {
        DomainSpec {
            raw_dim: 4,
            foreground: vec![ClassAppearance {
                modes: vec![AppearanceMode {
                    mean: Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0]),
                    scale: 0.0,
                }],
            }],
            background: ClassAppearance {
                modes: vec![AppearanceMode {
                    mean: Array1::zeros(4),
                    scale: 0.0,
                }],
            },
            shift: None,
            frequencies: vec![1.0],
            scene_extent: 64.0,
            instance_size: (6.0, 12.0),
            instances_per_scene: (1, 1),
            proposals_per_instance: (1, 1),
            background_proposals: 0,
            jitter,
            feature_noise: noise,
        }
    }

    #[test]
    fn zero_jitter_zero_noise_is_exact() {
        let spec = unit_spec(0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = generate_scene(&spec, &mut rng).unwrap();
        assert_eq!(scene.proposals.len(), 1);
        assert_eq!(scene.proposals[0].bbox, scene.instances[0].bbox);
        assert_eq!(
            scene.proposals[0].raw_feature,
            scene.instances[0].appearance
        );
    }

    #[test]
    fn degenerate_instance_range_rejected() {
        let mut spec = unit_spec(0.0, 0.0);
        spec.instances_per_scene = (0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            generate_scene(&spec, &mut rng),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn point_mass_frequency_yields_one_class() {
        let mut spec = unit_spec(0.2, 0.1);
        spec.foreground.push(spec.foreground[0].clone());
        spec.foreground.push(spec.foreground[0].clone());
        spec.frequencies = vec![1.0 - 2e-12, 1e-12, 1e-12];
        spec.instances_per_scene = (3, 5);
        let scenes = generate_split(&spec, 30, 9, 0).unwrap();
        for scene in &scenes {
            for inst in &scene.instances {
                assert_eq!(inst.class_id, 1);
            }
        }
    }

    #[test]
    fn foreground_proposals_overlap_their_instance() {
        let mut spec = unit_spec(0.8, 0.1);
        spec.instances_per_scene = (2, 4);
        // fixed count so proposal index maps to its generating instance
        spec.proposals_per_instance = (2, 2);
        spec.background_proposals = 2;
        let scenes = generate_split(&spec, 40, 31, 0).unwrap();
        for scene in &scenes {
            for (idx, p) in scene.proposals.iter().enumerate() {
                if p.true_class == 0 {
                    continue;
                }
                let inst = &scene.instances[idx / 2];
                assert!(iou(&p.bbox, &inst.bbox) > 0.0);
                assert_eq!(p.true_class, inst.class_id);
            }
        }
    }

    #[test]
    fn splits_are_reproducible_and_stream_separated() {
        let spec = unit_spec(0.3, 0.2);
        let a = generate_split(&spec, 12, 77, 1).unwrap();
        let b = generate_split(&spec, 12, 77, 1).unwrap();
        let a_json = serde_json::to_string(&a).unwrap();
        assert_eq!(a_json, serde_json::to_string(&b).unwrap());
        let c = generate_split(&spec, 12, 77, 2).unwrap();
        assert_ne!(a_json, serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn empirical_frequencies_match_spec() {
        let mut spec = unit_spec(0.0, 0.0);
        spec.foreground.push(spec.foreground[0].clone());
        spec.foreground.push(spec.foreground[0].clone());
        spec.frequencies = vec![0.5, 0.3, 0.2];
        spec.instances_per_scene = (5, 5);
        let scenes = generate_split(&spec, 2000, 123, 0).unwrap();
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for scene in &scenes {
            for inst in &scene.instances {
                counts[inst.class_id - 1] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 10_000);
        for (k, &f) in spec.frequencies.iter().enumerate() {
            let sigma = (f * (1.0 - f) / total as f64).sqrt();
            let empirical = counts[k] as f64 / total as f64;
            assert!(
                (empirical - f).abs() <= 3.0 * sigma,
                "class {k}: {empirical} vs {f} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn jitter_degrades_features_monotonically() {
        let mut expected = Vec::new();
        for (gi, jitter) in [0.0, 0.15, 0.35, 0.6].into_iter().enumerate() {
            let spec = unit_spec(jitter, 0.0);
            let scenes = generate_split(&spec, 2500, 55 + gi as u64, 0).unwrap();
            let mut dist = 0.0;
            let mut n = 0usize;
            for scene in &scenes {
                let inst = &scene.instances[0];
                for p in &scene.proposals {
                    let diff = &p.raw_feature - &inst.appearance;
                    dist += diff.dot(&diff).sqrt();
                    n += 1;
                }
            }
            expected.push(dist / n as f64);
        }
        assert_eq!(expected[0], 0.0);
        for w in expected.windows(2) {
            assert!(w[0] < w[1], "jitter grid not monotone: {expected:?}");
        }
    }

    #[test]
    fn orthogonal_sampler_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [2, 5, 8] {
            let q = random_orthogonal(dim, &mut rng);
            let gram = q.t().dot(&q);
            for i in 0..dim {
                for j in 0..dim {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - expect).abs() < 1e-10);
                }
            }
            let r = rotation_by_angle(dim, 0.7, &mut rng);
            let gram = r.t().dot(&r);
            for i in 0..dim {
                assert!((gram[[i, i]] - 1.0).abs() < 1e-10);
            }
        }
    }

    fn world(rotation_angle: f64, offset_scale: f64) -> WorldParams {
        WorldParams {
            raw_dim: 6,
            foreground_classes: 3,
            modes_per_class: 2,
            class_spread: 3.0,
            mode_spread: 0.5,
            appearance_noise: 0.1,
            background_overlap: 0.3,
            rotation_angle,
            offset_scale,
            frequencies: vec![],
            scene_extent: 64.0,
            instance_size: (6.0, 14.0),
            instances_per_scene: (2, 3),
            proposals_per_instance: (1, 1),
            background_proposals: 0,
            jitter: 0.0,
            feature_noise: 0.0,
            train_scenes: 8,
            eval_scenes: 8,
        }
    }

    #[test]
    fn identity_shift_keeps_class_means() {
        let params = world(0.0, 0.0);
        let (src, tgt) = build_domain_pair(&params, 11).unwrap();
        let shift = tgt.shift.as_ref().unwrap();
        // rotation by angle 0 is the identity
        for i in 0..params.raw_dim {
            for j in 0..params.raw_dim {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((shift.rotation[[i, j]] - expect).abs() < 1e-10);
            }
            assert!(shift.offset[i].abs() < 1e-12);
        }
        let src_scenes = generate_split(&src, 800, 11, 0).unwrap();
        let tgt_scenes = generate_split(&tgt, 800, 11, 2).unwrap();
        let mean_of = |scenes: &[Scene], class: usize| {
            let mut sum = Array1::zeros(params.raw_dim);
            let mut n = 0.0;
            for s in scenes {
                for inst in &s.instances {
                    if inst.class_id == class {
                        sum += &inst.appearance;
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        // sampling noise only: mode-pick imbalance plus within-mode noise,
        // far below the class spread of 3.0
        for class in 1..=3 {
            let d = mean_of(&src_scenes, class) - mean_of(&tgt_scenes, class);
            assert!(d.dot(&d).sqrt() < 0.25, "class {class} drifted");
        }
    }

    #[test]
    fn shift_moves_class_means_by_closed_form() {
        let params = world(0.9, 2.0);
        let (src, tgt) = build_domain_pair(&params, 19).unwrap();
        let shift = tgt.shift.as_ref().unwrap();
        let src_scenes = generate_split(&src, 1500, 19, 0).unwrap();
        let tgt_scenes = generate_split(&tgt, 1500, 19, 2).unwrap();
        for class in 1..=3usize {
            // closed-form mean of the class is the average of its mode means
            let modes = &src.foreground[class - 1].modes;
            let mut mu = Array1::zeros(params.raw_dim);
            for m in modes {
                mu += &m.mean;
            }
            mu /= modes.len() as f64;
            let expected = shift.rotation.dot(&mu) + &shift.offset - &mu;
            let expected_norm = expected.dot(&expected).sqrt();

            let mean_of = |scenes: &[Scene]| {
                let mut sum = Array1::zeros(params.raw_dim);
                let mut n = 0.0;
                for s in scenes {
                    for inst in &s.instances {
                        if inst.class_id == class {
                            sum += &inst.appearance;
                            n += 1.0;
                        }
                    }
                }
                sum / n
            };
            let observed = mean_of(&tgt_scenes) - mean_of(&src_scenes);
            let observed_norm = observed.dot(&observed).sqrt();
            assert!(
                (observed_norm - expected_norm).abs() < 0.15,
                "class {class}: observed {observed_norm}, expected {expected_norm}"
            );
        }
    }
}
