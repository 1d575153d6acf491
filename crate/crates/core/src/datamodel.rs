//! Shared domain types: labels, latent factors, samples and candidates.
//!
//! Class ids are dense integers `0..|C|`, base classes first. A classifier
//! head for the novel classes indexes them by their position in
//! [`LabelSpace::novel_labels`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::World;

pub type ClassId = usize;

/// Number of keypoints per sample.
pub const NUM_KEYPOINTS: usize = 15;
/// Flattened keypoint dimension, `(u, v)` per point.
pub const KEYPOINT_DIM: usize = 2 * NUM_KEYPOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub base_labels: Vec<ClassId>,
    pub novel_labels: Vec<ClassId>,
}

impl LabelSpace {
    /// Dense layout: base classes `0..n_base`, novel classes after them.
    pub fn dense(n_base: usize, n_novel: usize) -> Self {
        Self {
            base_labels: (0..n_base).collect(),
            novel_labels: (n_base..n_base + n_novel).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base_labels.len() + self.novel_labels.len()
    }

    pub fn is_base(&self, label: ClassId) -> bool {
        self.base_labels.contains(&label)
    }

    pub fn is_novel(&self, label: ClassId) -> bool {
        self.novel_labels.contains(&label)
    }

    pub fn contains(&self, label: ClassId) -> bool {
        self.is_base(label) || self.is_novel(label)
    }

    /// Output index of a novel label in a head of size `|novel_labels|`.
    pub fn novel_index(&self, label: ClassId) -> Result<usize> {
        self.novel_labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::LabelOutOfRange {
                label,
                num_classes: self.novel_labels.len(),
            })
    }

    /// Output index of a base label in a head of size `|base_labels|`.
    pub fn base_index(&self, label: ClassId) -> Result<usize> {
        self.base_labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::LabelOutOfRange {
                label,
                num_classes: self.base_labels.len(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextureVec(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseVec(pub Vec<f64>);

/// Camera rotation angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ViewAngles {
    pub const ZERO: ViewAngles = ViewAngles {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.as_array().iter().all(|a| (lo..=hi).contains(a))
    }
}

/// Fifteen `(u, v)` keypoints stored flattened.
///
/// Deserialization does not check the arity so that [`validate_world`] can
/// report malformed inputs; use [`KeypointVec::new`] to construct checked values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointVec(pub Vec<f64>);

impl KeypointVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != KEYPOINT_DIM {
            return Err(Error::DimensionMismatch {
                what: "keypoint vector",
                expected: KEYPOINT_DIM,
                got: values.len(),
            });
        }
        Ok(Self(values))
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.chunks_exact(2).map(|p| (p[0], p[1]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub texture: TextureVec,
    pub pose: PoseVec,
    pub view: ViewAngles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub features: Vec<f64>,
    pub label: ClassId,
    pub keypoints: KeypointVec,
    pub latent: Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    View,
    Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateState {
    Available,
    Selected,
    Dismissed,
}

/// A hallucinated sample and its selection lifecycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub sample: Sample,
    pub branch: Branch,
    /// Novel training sample whose texture the candidate carries.
    pub source_id: SampleId,
    /// Base sample whose pose the candidate carries (pose branch only).
    pub donor_id: Option<SampleId>,
    pub state: CandidateState,
    pub cluster_id: Option<usize>,
}

impl Candidate {
    pub fn is_available(&self) -> bool {
        self.state == CandidateState::Available
    }

    pub fn label(&self) -> ClassId {
        self.sample.label
    }

    pub fn select(&mut self) -> Result<()> {
        self.transition(CandidateState::Selected)
    }

    pub fn dismiss(&mut self) -> Result<()> {
        self.transition(CandidateState::Dismissed)
    }

    fn transition(&mut self, to: CandidateState) -> Result<()> {
        if self.state != CandidateState::Available || to == CandidateState::Available {
            return Err(Error::InvalidTransition {
                id: self.id.0,
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    /// Branch/donor tagging consistency.
    pub fn is_well_tagged(&self) -> bool {
        match self.branch {
            Branch::Pose => self.donor_id.is_some(),
            Branch::View => self.donor_id.is_none(),
        }
    }
}

/// The ablation variants compared by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    RandomViewsPoses,
    SplViews,
    SplPoses,
    SplPosesClustering,
    SplPosesViews,
    SplBalanced,
    SplAll,
    NearestNeighbor,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Baseline,
        Variant::RandomViewsPoses,
        Variant::SplViews,
        Variant::SplPoses,
        Variant::SplPosesClustering,
        Variant::SplPosesViews,
        Variant::SplBalanced,
        Variant::SplAll,
        Variant::NearestNeighbor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RandomViewsPoses => "random-views-poses",
            Variant::SplViews => "spl-views",
            Variant::SplPoses => "spl-poses",
            Variant::SplPosesClustering => "spl-poses-clustering",
            Variant::SplPosesViews => "spl-poses-views",
            Variant::SplBalanced => "spl-balanced",
            Variant::SplAll => "spl-all",
            Variant::NearestNeighbor => "nearest-neighbor",
        }
    }

    pub fn is_spl(self) -> bool {
        !matches!(
            self,
            Variant::Baseline | Variant::RandomViewsPoses | Variant::NearestNeighbor
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Shot counts evaluated by default.
pub const DEFAULT_K_SHOTS: [usize; 5] = [1, 2, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k_shot: usize,
    pub variant: Variant,
    pub seed: u64,
    pub metric_ks: Vec<usize>,
}

impl EpisodeSpec {
    pub fn validate(&self, num_novel: usize) -> Result<()> {
        if self.k_shot == 0 {
            return Err(Error::config("k_shot", "must be positive"));
        }
        if self.metric_ks.is_empty() {
            return Err(Error::config("metric_ks", "must be non-empty"));
        }
        if let Some(&bad) = self.metric_ks.iter().find(|&&k| k == 0 || k > num_novel) {
            return Err(Error::config(
                "metric_ks",
                format!("top-{bad} is outside 1..={num_novel}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    LabelOverlap,
    EmptyLabelSet,
    UnknownLabel,
    FeatureDim,
    KeypointArity,
    LatentDim,
    MatrixShape,
    NonFinite,
    TrainTestOverlap,
    DuplicateSampleId,
    TestLabelNotNovel,
}

impl ViolationKind {
    pub fn code(self) -> &'static str {
        match self {
            ViolationKind::LabelOverlap => "label-overlap",
            ViolationKind::EmptyLabelSet => "empty-label-set",
            ViolationKind::UnknownLabel => "unknown-label",
            ViolationKind::FeatureDim => "feature-dim",
            ViolationKind::KeypointArity => "keypoint-arity",
            ViolationKind::LatentDim => "latent-dim",
            ViolationKind::MatrixShape => "matrix-shape",
            ViolationKind::NonFinite => "non-finite",
            ViolationKind::TrainTestOverlap => "train-test-overlap",
            ViolationKind::DuplicateSampleId => "duplicate-sample-id",
            ViolationKind::TestLabelNotNovel => "test-label-not-novel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.code(), self.detail)
    }
}

/// Collects every invariant violation in `world`. An empty report means valid.
pub fn validate_world(world: &World) -> Vec<Violation> {
    let mut report = Vec::new();
    let mut push = |kind, detail: String| report.push(Violation { kind, detail });

    let labels = &world.label_space;
    if labels.base_labels.is_empty() {
        push(
            ViolationKind::EmptyLabelSet,
            "base label set is empty".into(),
        );
    }
    if labels.novel_labels.is_empty() {
        push(
            ViolationKind::EmptyLabelSet,
            "novel label set is empty".into(),
        );
    }
    let base: BTreeSet<_> = labels.base_labels.iter().copied().collect();
    for l in &labels.novel_labels {
        if base.contains(l) {
            push(
                ViolationKind::LabelOverlap,
                format!("class {l} is both base and novel"),
            );
        }
    }

    let cfg = &world.config;
    let shapes = [
        ("mix_tex", &world.mix_tex, cfg.d_feat, cfg.d_tex),
        ("mix_pose", &world.mix_pose, cfg.d_feat, cfg.d_pose),
        ("mix_view", &world.mix_view, cfg.d_feat, 3),
        ("kp_map", &world.kp_map, KEYPOINT_DIM, cfg.d_pose),
    ];
    for (name, m, rows, cols) in shapes {
        if m.rows != rows || m.cols != cols || !m.is_well_formed() {
            push(
                ViolationKind::MatrixShape,
                format!(
                    "{name} is {}x{} with {} entries, expected {rows}x{cols}",
                    m.rows,
                    m.cols,
                    m.data.len()
                ),
            );
        } else if m.data.iter().any(|x| !x.is_finite()) {
            push(
                ViolationKind::NonFinite,
                format!("{name} has non-finite entries"),
            );
        }
    }
    for (c, t) in world.class_textures.iter().enumerate() {
        if t.0.len() != cfg.d_tex {
            push(
                ViolationKind::LatentDim,
                format!("class texture {c} has dimension {}", t.0.len()),
            );
        }
    }

    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    let all = world
        .train_samples
        .iter()
        .map(|s| (s, false))
        .chain(world.test_samples.iter().map(|s| (s, true)));
    for (s, is_test) in all {
        let fresh = if !is_test {
            train_ids.insert(s.id)
        } else if train_ids.contains(&s.id) {
            push(
                ViolationKind::TrainTestOverlap,
                format!("sample {} is in both train and test", s.id),
            );
            true
        } else {
            test_ids.insert(s.id)
        };
        if !fresh {
            push(
                ViolationKind::DuplicateSampleId,
                format!("sample id {} appears twice", s.id),
            );
        }
        if !labels.contains(s.label) {
            push(
                ViolationKind::UnknownLabel,
                format!(
                    "sample {} has label {} outside the label space",
                    s.id, s.label
                ),
            );
        }
        if is_test && !labels.is_novel(s.label) {
            push(
                ViolationKind::TestLabelNotNovel,
                format!("test sample {} has non-novel label {}", s.id, s.label),
            );
        }
        if s.features.len() != cfg.d_feat {
            push(
                ViolationKind::FeatureDim,
                format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    cfg.d_feat
                ),
            );
        }
        if s.keypoints.0.len() != KEYPOINT_DIM {
            push(
                ViolationKind::KeypointArity,
                format!(
                    "sample {} has {} keypoint coordinates ({} points), expected {}",
                    s.id,
                    s.keypoints.0.len(),
                    s.keypoints.0.len() / 2,
                    NUM_KEYPOINTS
                ),
            );
        }
        if s.latent.texture.0.len() != cfg.d_tex || s.latent.pose.0.len() != cfg.d_pose {
            push(
                ViolationKind::LatentDim,
                format!("sample {} has mis-sized latents", s.id),
            );
        }
        let finite = s
            .features
            .iter()
            .chain(&s.keypoints.0)
            .chain(&s.latent.texture.0)
            .chain(&s.latent.pose.0)
            .chain(&s.latent.view.as_array())
            .all(|x| x.is_finite());
        if !finite {
            push(
                ViolationKind::NonFinite,
                format!("sample {} has non-finite values", s.id),
            );
        }
    }
    report
}
