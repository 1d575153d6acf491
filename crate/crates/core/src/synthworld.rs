//! Seeded linear-Gaussian surrogate for 3D-model-based sample generation.
//!
//! A sample's features are a linear mix of its class texture, a pose vector
//! and three camera angles, plus observation noise. Class identity lives only
//! in the texture; pose and view are nuisance factors. Keypoints are a linear
//! image of the pose.
//!
//! Two hallucination branches operate on a novel training sample:
//! the view branch re-renders its own texture and pose under fresh camera
//! angles, and the pose branch paints its texture onto base-class donors'
//! poses and angles. Pose transfer occasionally corrupts the texture, which
//! makes some pose candidates misleading.

use std::f64::consts::FRAC_PI_6;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    Branch, Candidate, CandidateId, CandidateState, ClassId, KeypointVec, LabelSpace, Latent,
    PoseVec, Sample, SampleId, TextureVec, ViewAngles, KEYPOINT_DIM,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{child_rng, seeded_rng, SeededRng};

/// Ids of hallucinated samples start here so they never collide with world samples.
pub const GENERATED_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub samples_per_class: usize,
    pub d_tex: usize,
    pub d_pose: usize,
    pub d_feat: usize,
    pub sigma_obs: f64,
    pub sigma_kp: f64,
    pub corruption_prob: f64,
    pub corruption_scale: f64,
    /// Upper bound of the uniform camera-angle range, radians.
    pub max_view_angle: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_base_classes: 10,
            n_novel_classes: 5,
            samples_per_class: 50,
            d_tex: 8,
            d_pose: 6,
            d_feat: 32,
            sigma_obs: 0.1,
            sigma_kp: 0.05,
            corruption_prob: 0.3,
            corruption_scale: 3.0,
            max_view_angle: FRAC_PI_6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_base_classes", self.n_base_classes),
            ("samples_per_class", self.samples_per_class),
            ("d_tex", self.d_tex),
            ("d_pose", self.d_pose),
            ("d_feat", self.d_feat),
        ];
        for (field, v) in positive {
            if v < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.n_novel_classes < 2 {
            return Err(Error::config("n_novel_classes", "must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config(
                "samples_per_class",
                "must be at least 2 to split train and test",
            ));
        }
        let non_negative = [
            ("sigma_obs", self.sigma_obs),
            ("sigma_kp", self.sigma_kp),
            ("corruption_scale", self.corruption_scale),
            ("max_view_angle", self.max_view_angle),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(Error::config("corruption_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Training samples per class after the even split.
    pub fn train_per_class(&self) -> usize {
        self.samples_per_class / 2
    }
}

/// Pool sizes for the two hallucination branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// View-branch candidates per novel sample.
    pub n_views: usize,
    /// Pose-branch candidates per novel sample.
    pub n_poses: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_views: 12,
            n_poses: 40,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 1 {
            return Err(Error::config("gen.n_views", "must be at least 1"));
        }
        if self.n_poses < 1 {
            return Err(Error::config("gen.n_poses", "must be at least 1"));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.n_views + self.n_poses
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub label_space: LabelSpace,
    pub mix_tex: Matrix,
    pub mix_pose: Matrix,
    pub mix_view: Matrix,
    pub kp_map: Matrix,
    /// Texture prototype per class id.
    pub class_textures: Vec<TextureVec>,
    pub train_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    pub config: WorldConfig,
    pub seed: u64,
}

fn gaussian_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn scaled_gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn sample_angles(rng: &mut SeededRng, max_angle: f64) -> ViewAngles {
    let dist = Uniform::new_inclusive(0.0, max_angle).expect("validated angle range");
    ViewAngles {
        alpha: dist.sample(rng),
        beta: dist.sample(rng),
        gamma: dist.sample(rng),
    }
}

/// Builds a world deterministically from `(cfg, seed)`.
pub fn make_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let mut mix_rng = child_rng(seed, "mixing", 0);
    let mix_tex = scaled_gaussian_matrix(&mut mix_rng, cfg.d_feat, cfg.d_tex);
    let mix_pose = scaled_gaussian_matrix(&mut mix_rng, cfg.d_feat, cfg.d_pose);
    let mix_view = scaled_gaussian_matrix(&mut mix_rng, cfg.d_feat, 3);
    let kp_map = scaled_gaussian_matrix(&mut mix_rng, KEYPOINT_DIM, cfg.d_pose);

    let label_space = LabelSpace::dense(cfg.n_base_classes, cfg.n_novel_classes);
    let n_classes = label_space.num_classes();
    let class_textures = (0..n_classes)
        .map(|c| {
            TextureVec(gaussian_vec(
                &mut child_rng(seed, "texture", c as u64),
                cfg.d_tex,
            ))
        })
        .collect();

    let mut world = World {
        label_space,
        mix_tex,
        mix_pose,
        mix_view,
        kp_map,
        class_textures,
        train_samples: Vec::new(),
        test_samples: Vec::new(),
        config: cfg.clone(),
        seed,
    };

    let n_train = cfg.train_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..n_classes {
        let mut rng = child_rng(seed, "samples", class as u64);
        let is_novel = world.label_space.is_novel(class);
        for j in 0..cfg.samples_per_class {
            let id = SampleId((class * cfg.samples_per_class + j) as u64);
            let sample = world.draw_sample(&mut rng, id, class)?;
            if j < n_train {
                train.push(sample);
            } else if is_novel {
                test.push(sample);
            }
        }
    }
    world.train_samples = train;
    world.test_samples = test;
    Ok(world)
}

impl World {
    fn draw_sample(&self, rng: &mut SeededRng, id: SampleId, class: ClassId) -> Result<Sample> {
        let cfg = &self.config;
        let texture = self.class_textures[class].clone();
        let pose = PoseVec(gaussian_vec(rng, cfg.d_pose));
        let view = sample_angles(rng, cfg.max_view_angle);
        let obs_noise = gaussian_vec(rng, cfg.d_feat);
        let kp_noise = gaussian_vec(rng, KEYPOINT_DIM);
        let features = render(self, &texture, &pose, &view, &obs_noise)?;
        let keypoints = keypoints_of(self, &pose, &kp_noise)?;
        Ok(Sample {
            id,
            features,
            label: class,
            keypoints,
            latent: Latent {
                texture,
                pose,
                view,
            },
        })
    }

    pub fn base_train(&self) -> impl Iterator<Item = &Sample> {
        self.train_samples
            .iter()
            .filter(|s| self.label_space.is_base(s.label))
    }

    pub fn novel_train(&self) -> impl Iterator<Item = &Sample> {
        self.train_samples
            .iter()
            .filter(|s| self.label_space.is_novel(s.label))
    }
}

/// `mix_tex·texture + mix_pose·pose + mix_view·angles + sigma_obs·noise`.
pub fn render(
    world: &World,
    texture: &TextureVec,
    pose: &PoseVec,
    view: &ViewAngles,
    noise_draw: &[f64],
) -> Result<Vec<f64>> {
    let d_feat = world.config.d_feat;
    if noise_draw.len() != d_feat {
        return Err(Error::DimensionMismatch {
            what: "observation noise",
            expected: d_feat,
            got: noise_draw.len(),
        });
    }
    let mut out: Vec<f64> = noise_draw
        .iter()
        .map(|z| world.config.sigma_obs * z)
        .collect();
    world.mix_tex.matvec_add(&texture.0, &mut out)?;
    world.mix_pose.matvec_add(&pose.0, &mut out)?;
    world.mix_view.matvec_add(&view.as_array(), &mut out)?;
    Ok(out)
}

/// `kp_map·pose + sigma_kp·noise`, as 15 `(u, v)` points.
pub fn keypoints_of(world: &World, pose: &PoseVec, noise_draw: &[f64]) -> Result<KeypointVec> {
    if noise_draw.len() != KEYPOINT_DIM {
        return Err(Error::DimensionMismatch {
            what: "keypoint noise",
            expected: KEYPOINT_DIM,
            got: noise_draw.len(),
        });
    }
    let mut out: Vec<f64> = noise_draw
        .iter()
        .map(|z| world.config.sigma_kp * z)
        .collect();
    world.kp_map.matvec_add(&pose.0, &mut out)?;
    KeypointVec::new(out)
}

fn generated_sample(
    id: CandidateId,
    features: Vec<f64>,
    label: ClassId,
    keypoints: KeypointVec,
    latent: Latent,
) -> Sample {
    Sample {
        id: SampleId(GENERATED_ID_OFFSET + id.0),
        features,
        label,
        keypoints,
        latent,
    }
}

fn check_novel(world: &World, sample: &Sample) -> Result<()> {
    if !world.label_space.is_novel(sample.label) {
        return Err(Error::InsufficientData(format!(
            "sample {} with label {} is not a novel-class sample",
            sample.id, sample.label
        )));
    }
    Ok(())
}

/// View branch: `n_views` re-renders of `novel_sample` under fresh camera angles.
///
/// Candidate ids are `first_id, first_id + 1, ...`.
pub fn gen_view_set(
    world: &World,
    novel_sample: &Sample,
    gen_cfg: &GenConfig,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Candidate>> {
    check_novel(world, novel_sample)?;
    let cfg = &world.config;
    let mut rng = seeded_rng(seed);
    let latent = &novel_sample.latent;
    (0..gen_cfg.n_views)
        .map(|j| {
            let id = CandidateId(first_id + j as u64);
            let view = sample_angles(&mut rng, cfg.max_view_angle);
            let obs_noise = gaussian_vec(&mut rng, cfg.d_feat);
            let kp_noise = gaussian_vec(&mut rng, KEYPOINT_DIM);
            let features = render(world, &latent.texture, &latent.pose, &view, &obs_noise)?;
            let keypoints = keypoints_of(world, &latent.pose, &kp_noise)?;
            let latent = Latent {
                texture: latent.texture.clone(),
                pose: latent.pose.clone(),
                view,
            };
            Ok(Candidate {
                id,
                sample: generated_sample(id, features, novel_sample.label, keypoints, latent),
                branch: Branch::View,
                source_id: novel_sample.id,
                donor_id: None,
                state: CandidateState::Available,
                cluster_id: None,
            })
        })
        .collect()
}

/// Pose branch: `n_poses` renders of the novel texture on distinct base donors.
pub fn gen_pose_set(
    world: &World,
    novel_sample: &Sample,
    base_samples: &[Sample],
    gen_cfg: &GenConfig,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Candidate>> {
    gen_pose_set_traced(world, novel_sample, base_samples, gen_cfg, seed, first_id)
        .map(|(candidates, _)| candidates)
}

/// Like [`gen_pose_set`], also returning which candidates had their texture corrupted.
///
/// The corruption flags are diagnostics for tests and reports; selection never sees them.
pub fn gen_pose_set_traced(
    world: &World,
    novel_sample: &Sample,
    base_samples: &[Sample],
    gen_cfg: &GenConfig,
    seed: u64,
    first_id: u64,
) -> Result<(Vec<Candidate>, Vec<bool>)> {
    check_novel(world, novel_sample)?;
    if base_samples.len() < gen_cfg.n_poses {
        return Err(Error::InsufficientData(format!(
            "pose branch needs {} distinct base donors, only {} available",
            gen_cfg.n_poses,
            base_samples.len()
        )));
    }
    let cfg = &world.config;
    let mut rng = seeded_rng(seed);
    let donors = index::sample(&mut rng, base_samples.len(), gen_cfg.n_poses);
    let texture = &novel_sample.latent.texture;

    let mut candidates = Vec::with_capacity(gen_cfg.n_poses);
    let mut corrupted = Vec::with_capacity(gen_cfg.n_poses);
    for (j, donor_idx) in donors.into_iter().enumerate() {
        let donor = &base_samples[donor_idx];
        let id = CandidateId(first_id + j as u64);
        // Draw every stream unconditionally so the corruption outcome never
        // shifts later draws.
        let corrupt_draw: f64 = rng.random();
        let perturbation = gaussian_vec(&mut rng, cfg.d_tex);
        let obs_noise = gaussian_vec(&mut rng, cfg.d_feat);
        let kp_noise = gaussian_vec(&mut rng, KEYPOINT_DIM);

        let is_corrupted = corrupt_draw < cfg.corruption_prob;
        let rendered_texture = if is_corrupted {
            TextureVec(
                texture
                    .0
                    .iter()
                    .zip(&perturbation)
                    .map(|(t, u)| t + cfg.corruption_scale * u)
                    .collect(),
            )
        } else {
            texture.clone()
        };
        let view = donor.latent.view;
        let features = render(
            world,
            &rendered_texture,
            &donor.latent.pose,
            &view,
            &obs_noise,
        )?;
        let keypoints = keypoints_of(world, &donor.latent.pose, &kp_noise)?;
        let latent = Latent {
            texture: texture.clone(),
            pose: donor.latent.pose.clone(),
            view,
        };
        candidates.push(Candidate {
            id,
            sample: generated_sample(id, features, novel_sample.label, keypoints, latent),
            branch: Branch::Pose,
            source_id: novel_sample.id,
            donor_id: Some(donor.id),
            state: CandidateState::Available,
            cluster_id: None,
        });
        corrupted.push(is_corrupted);
    }
    Ok((candidates, corrupted))
}

/// The k-shot partition of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotSplit {
    pub train_novel: Vec<Sample>,
    pub train_base: Vec<Sample>,
    pub test_novel: Vec<Sample>,
}

/// Draws `k` training samples per novel class without replacement.
pub fn split_kshot(world: &World, k: usize, seed: u64) -> Result<KShotSplit> {
    if k == 0 {
        return Err(Error::config("k_shot", "must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let mut train_novel = Vec::with_capacity(k * world.label_space.novel_labels.len());
    for &class in &world.label_space.novel_labels {
        let pool: Vec<&Sample> = world
            .train_samples
            .iter()
            .filter(|s| s.label == class)
            .collect();
        if k > pool.len() {
            return Err(Error::InsufficientData(format!(
                "{k}-shot needs {k} training samples of class {class}, only {} available",
                pool.len()
            )));
        }
        for i in index::sample(&mut rng, pool.len(), k) {
            train_novel.push(pool[i].clone());
        }
    }
    Ok(KShotSplit {
        train_novel,
        train_base: world.base_train().cloned().collect(),
        test_novel: world.test_samples.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::validate_world;
    use std::collections::BTreeSet;

    fn tiny_cfg() -> WorldConfig {
        WorldConfig {
            n_base_classes: 4,
            n_novel_classes: 3,
            samples_per_class: 10,
            ..WorldConfig::default()
        }
    }

    /// Hand-listed world with d_tex = 2, d_pose = 2, d_feat = 3.
    fn hand_world() -> World {
        let cfg = WorldConfig {
            n_base_classes: 1,
            n_novel_classes: 2,
            samples_per_class: 2,
            d_tex: 2,
            d_pose: 2,
            d_feat: 3,
            sigma_obs: 0.5,
            sigma_kp: 0.0,
            ..WorldConfig::default()
        };
        let mut w = make_world(&cfg, 0).unwrap();
        w.mix_tex = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]).unwrap();
        w.mix_pose =
            Matrix::from_rows(&[vec![0.5, 0.0], vec![1.0, 1.0], vec![-2.0, 0.25]]).unwrap();
        w.mix_view = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, -1.0],
        ])
        .unwrap();
        w
    }

    #[test]
    fn worlds_are_deterministic() {
        let a = make_world(&tiny_cfg(), 11).unwrap();
        let b = make_world(&tiny_cfg(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = make_world(&tiny_cfg(), 12).unwrap();
        assert_ne!(a.mix_tex, c.mix_tex);
    }

    #[test]
    fn even_split_counts() {
        let cfg = WorldConfig {
            n_novel_classes: 5,
            samples_per_class: 20,
            ..WorldConfig::default()
        };
        let w = make_world(&cfg, 1).unwrap();
        assert_eq!(w.test_samples.len(), 50);
        assert_eq!(w.novel_train().count(), 50);
        assert_eq!(w.base_train().count(), 10 * 10);
        assert!(w
            .test_samples
            .iter()
            .all(|s| w.label_space.is_novel(s.label)));
        assert!(validate_world(&w).is_empty());
    }

    #[test]
    fn noiseless_world_renders_from_latents() {
        let cfg = WorldConfig {
            sigma_obs: 0.0,
            ..tiny_cfg()
        };
        let w = make_world(&cfg, 4).unwrap();
        let zeros = vec![0.0; cfg.d_feat];
        for s in w.train_samples.iter().chain(&w.test_samples) {
            let l = &s.latent;
            let f = render(&w, &l.texture, &l.pose, &l.view, &zeros).unwrap();
            assert_eq!(f, s.features);
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = WorldConfig {
            n_novel_classes: 1,
            ..WorldConfig::default()
        };
        match make_world(&cfg, 0) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "n_novel_classes"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = WorldConfig {
            corruption_prob: 1.5,
            ..WorldConfig::default()
        };
        assert!(make_world(&cfg, 0).is_err());
    }

    #[test]
    fn render_zero_is_zero() {
        let w = hand_world();
        let f = render(
            &w,
            &TextureVec(vec![0.0; 2]),
            &PoseVec(vec![0.0; 2]),
            &ViewAngles::ZERO,
            &[0.0; 3],
        )
        .unwrap();
        assert_eq!(f, vec![0.0; 3]);
    }

    #[test]
    fn render_matches_hand_multiplication() {
        let w = hand_world();
        let t = TextureVec(vec![1.0, -2.0]);
        let p = PoseVec(vec![4.0, 2.0]);
        let v = ViewAngles {
            alpha: 0.1,
            beta: 0.2,
            gamma: 0.3,
        };
        let noise = [2.0, -2.0, 0.0];
        // tex: (1-4, 2, 3-1) = (-3, 2, 2)
        // pose: (2, 6, -8+0.5) = (2, 6, -7.5)
        // view: (0.1, 0.4, -0.3)
        // noise * 0.5: (1, -1, 0)
        let expected = [
            -3.0 + 2.0 + 0.1 + 1.0,
            2.0 + 6.0 + 0.4 - 1.0,
            2.0 - 7.5 - 0.3,
        ];
        let f = render(&w, &t, &p, &v, &noise).unwrap();
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn render_is_additive_in_texture() {
        let w = hand_world();
        let a1 = TextureVec(vec![0.3, -1.2]);
        let a2 = TextureVec(vec![2.0, 0.7]);
        let sum = TextureVec(vec![2.3, -0.5]);
        let p = PoseVec(vec![0.4, -0.9]);
        let v = ViewAngles {
            alpha: 0.2,
            beta: 0.05,
            gamma: 0.4,
        };
        let z = [0.0; 3];
        let lhs = render(&w, &sum, &p, &v, &z).unwrap();
        let r1 = render(&w, &a1, &p, &v, &z).unwrap();
        let r2 = render(&w, &a2, &PoseVec(vec![0.0; 2]), &ViewAngles::ZERO, &z).unwrap();
        for i in 0..3 {
            assert!((lhs[i] - (r1[i] + r2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn render_rejects_bad_dimensions() {
        let w = hand_world();
        let err = render(
            &w,
            &TextureVec(vec![0.0; 3]),
            &PoseVec(vec![0.0; 2]),
            &ViewAngles::ZERO,
            &[0.0; 3],
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        assert!(render(
            &w,
            &TextureVec(vec![0.0; 2]),
            &PoseVec(vec![0.0; 2]),
            &ViewAngles::ZERO,
            &[0.0; 2]
        )
        .is_err());
    }

    #[test]
    fn keypoints_of_zero_pose() {
        let w = hand_world();
        let kp = keypoints_of(&w, &PoseVec(vec![0.0; 2]), &[0.0; KEYPOINT_DIM]).unwrap();
        assert_eq!(kp.points().count(), 15);
        assert!(kp.points().all(|(u, v)| u == 0.0 && v == 0.0));
        assert!(keypoints_of(&w, &PoseVec(vec![0.0; 2]), &[0.0; 29]).is_err());
    }

    #[test]
    fn keypoints_of_hand_map() {
        let cfg = WorldConfig {
            d_pose: 1,
            sigma_kp: 0.0,
            ..tiny_cfg()
        };
        let mut w = make_world(&cfg, 0).unwrap();
        w.kp_map = Matrix::from_fn(KEYPOINT_DIM, 1, |_, _| 1.0);
        let kp = keypoints_of(&w, &PoseVec(vec![2.0]), &[0.7; KEYPOINT_DIM]).unwrap();
        assert_eq!(kp.0, vec![2.0; KEYPOINT_DIM]);
    }

    #[test]
    fn view_set_contract() {
        let cfg = WorldConfig {
            sigma_obs: 0.0,
            ..tiny_cfg()
        };
        let w = make_world(&cfg, 2).unwrap();
        let novel = w.novel_train().next().unwrap().clone();
        let gen = GenConfig {
            n_views: 12,
            n_poses: 5,
        };
        let set = gen_view_set(&w, &novel, &gen, 99, 100).unwrap();
        assert_eq!(set.len(), 12);
        let zeros = vec![0.0; cfg.d_feat];
        for (j, c) in set.iter().enumerate() {
            assert_eq!(c.id, CandidateId(100 + j as u64));
            assert_eq!(c.branch, Branch::View);
            assert_eq!(c.source_id, novel.id);
            assert!(c.donor_id.is_none());
            assert_eq!(c.sample.label, novel.label);
            assert!(c.sample.latent.view.within(0.0, FRAC_PI_6));
            assert_eq!(c.sample.latent.pose, novel.latent.pose);
            let l = &c.sample.latent;
            let f = render(&w, &l.texture, &l.pose, &l.view, &zeros).unwrap();
            assert_eq!(f, c.sample.features);
        }
        assert_eq!(set, gen_view_set(&w, &novel, &gen, 99, 100).unwrap());
        let base = w.base_train().next().unwrap().clone();
        assert!(gen_view_set(&w, &base, &gen, 99, 0).is_err());
    }

    #[test]
    fn pose_set_contract() {
        let cfg = WorldConfig {
            sigma_obs: 0.0,
            corruption_prob: 0.0,
            ..WorldConfig::default()
        };
        let w = make_world(&cfg, 3).unwrap();
        let novel = w.novel_train().next().unwrap().clone();
        let base: Vec<Sample> = w.base_train().cloned().collect();
        let gen = GenConfig::default();
        let set = gen_pose_set(&w, &novel, &base, &gen, 17, 0).unwrap();
        assert_eq!(set.len(), 40);
        let donors: BTreeSet<_> = set.iter().map(|c| c.donor_id.unwrap()).collect();
        assert_eq!(donors.len(), 40);
        let zeros = vec![0.0; cfg.d_feat];
        for c in &set {
            let donor = base.iter().find(|s| Some(s.id) == c.donor_id).unwrap();
            assert_eq!(c.branch, Branch::Pose);
            assert_eq!(c.sample.label, novel.label);
            assert_eq!(c.sample.latent.view, donor.latent.view);
            let f = render(
                &w,
                &novel.latent.texture,
                &donor.latent.pose,
                &donor.latent.view,
                &zeros,
            )
            .unwrap();
            assert_eq!(f, c.sample.features);
        }
    }

    #[test]
    fn zero_scale_corruption_is_identity() {
        let clean = WorldConfig {
            corruption_prob: 0.0,
            ..WorldConfig::default()
        };
        let w0 = make_world(&clean, 8).unwrap();
        let mut w1 = w0.clone();
        w1.config.corruption_prob = 1.0;
        w1.config.corruption_scale = 0.0;
        let novel = w0.novel_train().next().unwrap().clone();
        let base: Vec<Sample> = w0.base_train().cloned().collect();
        let gen = GenConfig::default();
        let a = gen_pose_set(&w0, &novel, &base, &gen, 5, 0).unwrap();
        let (b, flags) = gen_pose_set_traced(&w1, &novel, &base, &gen, 5, 0).unwrap();
        assert_eq!(a, b);
        assert!(flags.iter().all(|&f| f));
    }

    #[test]
    fn too_few_donors_rejected() {
        let w = make_world(&tiny_cfg(), 3).unwrap();
        let novel = w.novel_train().next().unwrap().clone();
        let base: Vec<Sample> = w.base_train().take(3).cloned().collect();
        assert!(matches!(
            gen_pose_set(&w, &novel, &base, &GenConfig::default(), 0, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn shared_donor_shares_keypoints_without_noise() {
        let cfg = WorldConfig {
            sigma_kp: 0.0,
            ..WorldConfig::default()
        };
        let w = make_world(&cfg, 3).unwrap();
        let base: Vec<Sample> = w.base_train().take(40).cloned().collect();
        let novels: Vec<Sample> = w.novel_train().take(2).cloned().collect();
        let gen = GenConfig::default();
        let a = gen_pose_set(&w, &novels[0], &base, &gen, 1, 0).unwrap();
        let b = gen_pose_set(&w, &novels[1], &base, &gen, 2, 100).unwrap();
        for ca in &a {
            let cb = b.iter().find(|c| c.donor_id == ca.donor_id).unwrap();
            assert_eq!(ca.sample.keypoints, cb.sample.keypoints);
        }
    }

    #[test]
    fn kshot_split_contract() {
        let w = make_world(&WorldConfig::default(), 6).unwrap();
        for k in crate::datamodel::DEFAULT_K_SHOTS {
            let split = split_kshot(&w, k, 21).unwrap();
            assert_eq!(split.train_novel.len(), 5 * k);
            for &c in &w.label_space.novel_labels {
                assert_eq!(split.train_novel.iter().filter(|s| s.label == c).count(), k);
            }
            let test_ids: BTreeSet<_> = split.test_novel.iter().map(|s| s.id).collect();
            assert!(split.train_novel.iter().all(|s| !test_ids.contains(&s.id)));
            let ids: BTreeSet<_> = split.train_novel.iter().map(|s| s.id).collect();
            assert_eq!(ids.len(), split.train_novel.len());
        }
        assert_eq!(
            split_kshot(&w, 1, 3).unwrap(),
            split_kshot(&w, 1, 3).unwrap()
        );
        assert_eq!(split_kshot(&w, 1, 3).unwrap().train_novel.len(), 5);
        assert!(split_kshot(&w, 26, 3).is_err());
    }
}
