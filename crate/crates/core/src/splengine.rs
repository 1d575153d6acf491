//! Self-paced selection of hallucinated candidates.
//!
//! Every iteration ranks each novel class's available candidates by the
//! current head's softmax confidence for that class, admits the top ones,
//! retires them (and, with cluster dismissal, their pose-cluster siblings),
//! then fine-tunes the head on the real k-shot samples plus everything
//! admitted so far.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansConfig};
use crate::datamodel::{
    Branch, Candidate, CandidateId, CandidateState, ClassId, LabelSpace, Sample, SampleId,
};
use crate::error::{Error, Result};
use crate::rng::{child_rng, derive_seed};
use crate::shallownet::{train, Classifier, TrainConfig};
use crate::synthworld::{gen_pose_set, gen_view_set, GenConfig, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchPolicy {
    ViewsOnly,
    PosesOnly,
    Union,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dismissal {
    SelectedOnly,
    ClusterDiscard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplConfig {
    /// Selections per class (per branch under `Balanced`) per iteration.
    pub r: usize,
    pub n_iterations: usize,
    pub epochs_per_iteration: usize,
    pub branch_policy: BranchPolicy,
    pub dismissal: Dismissal,
    /// Optimizer settings for the per-iteration updates; `epochs` is ignored
    /// in favour of `epochs_per_iteration`.
    pub train_cfg: TrainConfig,
    pub clustering: KMeansConfig,
}

impl Default for SplConfig {
    fn default() -> Self {
        Self {
            r: 1,
            n_iterations: 10,
            epochs_per_iteration: 10,
            branch_policy: BranchPolicy::Balanced,
            dismissal: Dismissal::ClusterDiscard,
            train_cfg: TrainConfig::default(),
            clustering: KMeansConfig::default(),
        }
    }
}

impl SplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::config("spl.r", "must be at least 1"));
        }
        if self.n_iterations < 1 {
            return Err(Error::config("spl.n_iterations", "must be at least 1"));
        }
        if self.clustering.k < 1 {
            return Err(Error::config("spl.clustering.k", "must be at least 1"));
        }
        if !(self.clustering.tol.is_finite() && self.clustering.tol >= 0.0) {
            return Err(Error::config(
                "spl.clustering.tol",
                "must be finite and >= 0",
            ));
        }
        self.train_cfg.validate("spl.train_cfg")
    }
}

/// All candidates hallucinated for one novel class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPool {
    pub class: ClassId,
    pub candidates: Vec<Candidate>,
}

impl ClassPool {
    pub fn get(&self, id: CandidateId) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    fn get_mut(&mut self, id: CandidateId) -> Option<&mut Candidate> {
        self.candidates.iter_mut().find(|c| c.id == id)
    }

    pub fn available(&self, branch: Option<Branch>) -> Vec<&Candidate> {
        self.candidates
            .iter()
            .filter(|c| c.is_available() && branch.is_none_or(|b| c.branch == b))
            .collect()
    }

    pub fn counts(&self) -> StateCounts {
        let mut counts = StateCounts::default();
        for c in &self.candidates {
            match c.state {
                CandidateState::Available => counts.available += 1,
                CandidateState::Selected => counts.selected += 1,
                CandidateState::Dismissed => counts.dismissed += 1,
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub available: usize,
    pub selected: usize,
    pub dismissed: usize,
}

impl StateCounts {
    pub fn total(&self) -> usize {
        self.available + self.selected + self.dismissed
    }
}

/// Per-source-sample clustering summary, kept for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolClusterSummary {
    pub source_id: SampleId,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
}

/// Generates the view and pose candidates of every k-shot sample, grouped by class.
///
/// With `clustering` set, each source sample's candidates are clustered once
/// on their keypoints and tagged with a `cluster_id`.
pub fn build_pools(
    world: &World,
    train_novel: &[Sample],
    base_samples: &[Sample],
    gen_cfg: &GenConfig,
    clustering: Option<&KMeansConfig>,
    seed: u64,
) -> Result<(Vec<ClassPool>, Vec<PoolClusterSummary>)> {
    gen_cfg.validate()?;
    let per_sample = gen_cfg.pool_size() as u64;
    let mut pools: Vec<ClassPool> = world
        .label_space
        .novel_labels
        .iter()
        .map(|&class| ClassPool {
            class,
            candidates: Vec::new(),
        })
        .collect();
    let mut summaries = Vec::new();
    for (i, sample) in train_novel.iter().enumerate() {
        let i = i as u64;
        let first = i * per_sample;
        let mut candidates =
            gen_view_set(world, sample, gen_cfg, derive_seed(seed, "view", i), first)?;
        candidates.extend(gen_pose_set(
            world,
            sample,
            base_samples,
            gen_cfg,
            derive_seed(seed, "pose", i),
            first + gen_cfg.n_views as u64,
        )?);
        if let Some(km) = clustering {
            let points: Vec<(CandidateId, Vec<f64>)> = candidates
                .iter()
                .map(|c| (c.id, c.sample.keypoints.0.clone()))
                .collect();
            let k = km.k.min(points.len());
            let fit = kmeans_fit(
                &points,
                k,
                derive_seed(seed, "kmeans", i),
                km.max_iter,
                km.tol,
            )?;
            for c in &mut candidates {
                c.cluster_id = fit.cluster_of(c.id);
            }
            summaries.push(PoolClusterSummary {
                source_id: sample.id,
                k,
                sizes: fit.cluster_sizes(),
                inertia: fit.inertia,
                iterations_run: fit.iterations_run,
            });
        }
        let idx = world.label_space.novel_index(sample.label)?;
        pools[idx].candidates.extend(candidates);
    }
    Ok((pools, summaries))
}

/// Scores candidates by `D'` confidence in their class, best first.
///
/// Ties are ordered by ascending candidate id.
pub fn rank_candidates(
    d_prime: &Classifier,
    candidates: &[&Candidate],
    labels: &LabelSpace,
) -> Result<Vec<(CandidateId, f64)>> {
    let Some(first) = candidates.first() else {
        return Ok(Vec::new());
    };
    let class = first.label();
    let head_index = labels.novel_index(class)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.label() != class {
            return Err(Error::Invariant(format!(
                "ranking mixes labels {class} and {}",
                c.label()
            )));
        }
        if !c.is_available() {
            return Err(Error::Invariant(format!(
                "candidate {} is {:?}, not available for ranking",
                c.id, c.state
            )));
        }
        scored.push((c.id, d_prime.confidence(&c.sample.features, head_index)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

pub fn select_top(ranked: &[(CandidateId, f64)], r: usize) -> Vec<CandidateId> {
    ranked.iter().take(r).map(|&(id, _)| id).collect()
}

/// Head of each non-empty branch ranking.
pub fn select_balanced(
    ranked_views: &[(CandidateId, f64)],
    ranked_poses: &[(CandidateId, f64)],
) -> Result<Vec<CandidateId>> {
    let picks: Vec<CandidateId> = ranked_views
        .first()
        .into_iter()
        .chain(ranked_poses.first())
        .map(|&(id, _)| id)
        .collect();
    if picks.is_empty() {
        return Err(Error::InsufficientData(
            "balanced selection over two empty branches".into(),
        ));
    }
    Ok(picks)
}

/// Marks `selected` as Selected and applies the dismissal rule.
///
/// Returns, for each selected id in order, the ids it caused to be dismissed.
/// Only pose-branch selections dismiss, and only pose-branch siblings that
/// share their source sample and keypoint cluster.
pub fn dismiss(
    pool: &mut ClassPool,
    selected: &[CandidateId],
    dismissal: Dismissal,
) -> Result<Vec<Vec<CandidateId>>> {
    let class = pool.class;
    for &id in selected {
        pool.get_mut(id)
            .ok_or_else(|| {
                Error::Invariant(format!("candidate {id} is not in class pool {class}"))
            })?
            .select()?;
    }
    let mut dismissed = Vec::with_capacity(selected.len());
    for &id in selected {
        let chosen = pool.get(id).expect("selected above");
        if dismissal == Dismissal::SelectedOnly || chosen.branch != Branch::Pose {
            dismissed.push(Vec::new());
            continue;
        }
        let cluster = chosen.cluster_id.ok_or_else(|| {
            Error::config(
                "spl.dismissal",
                format!("cluster dismissal needs clustered pools; candidate {id} has no cluster"),
            )
        })?;
        let source = chosen.source_id;
        let mut retired = Vec::new();
        for c in pool.candidates.iter_mut() {
            if c.is_available()
                && c.branch == Branch::Pose
                && c.source_id == source
                && c.cluster_id == Some(cluster)
            {
                c.dismiss()?;
                retired.push(c.id);
            }
        }
        dismissed.push(retired);
    }
    Ok(dismissed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub iteration: usize,
    pub class: ClassId,
    pub candidate: CandidateId,
    pub branch: Branch,
    pub score: f64,
    pub dismissed_ids: Vec<CandidateId>,
}

/// Pool and training state at the end of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub selections: usize,
    pub skipped_classes: Vec<ClassId>,
    /// `(class, counts)` for every class pool.
    pub pool_counts: Vec<(ClassId, StateCounts)>,
    pub train_set_size: usize,
    pub weight_hash: String,
}

#[derive(Debug, Clone)]
pub struct SplOutcome {
    pub classifier: Classifier,
    pub history: Vec<SelectionEvent>,
    pub iterations: Vec<IterationSummary>,
    pub s_gen_novel: Vec<Sample>,
}

fn rank_class(
    d_prime: &Classifier,
    pool: &ClassPool,
    cfg: &SplConfig,
    labels: &LabelSpace,
) -> Result<Vec<(CandidateId, f64)>> {
    let rank = |branch| rank_candidates(d_prime, &pool.available(branch), labels);
    match cfg.branch_policy {
        BranchPolicy::ViewsOnly => Ok(select_scored(&rank(Some(Branch::View))?, cfg.r)),
        BranchPolicy::PosesOnly => Ok(select_scored(&rank(Some(Branch::Pose))?, cfg.r)),
        BranchPolicy::Union => Ok(select_scored(&rank(None)?, cfg.r)),
        BranchPolicy::Balanced => {
            let views = rank(Some(Branch::View))?;
            let poses = rank(Some(Branch::Pose))?;
            if views.is_empty() && poses.is_empty() {
                return Ok(Vec::new());
            }
            let ids = if cfg.r == 1 {
                select_balanced(&views, &poses)?
            } else {
                let mut ids = select_top(&views, cfg.r);
                ids.extend(select_top(&poses, cfg.r));
                ids
            };
            Ok(ids
                .into_iter()
                .map(|id| {
                    let score = views
                        .iter()
                        .chain(&poses)
                        .find(|(c, _)| *c == id)
                        .map(|&(_, s)| s)
                        .expect("picked from these rankings");
                    (id, score)
                })
                .collect())
        }
    }
}

fn select_scored(ranked: &[(CandidateId, f64)], r: usize) -> Vec<(CandidateId, f64)> {
    ranked.iter().take(r).copied().collect()
}

/// Runs the iterative rank/select/dismiss/update loop.
///
/// Stops after `cfg.n_iterations` or at the first iteration in which every
/// class pool is exhausted.
pub fn spl_run(
    d_prime: &Classifier,
    s_train_novel: &[Sample],
    pools: &mut [ClassPool],
    cfg: &SplConfig,
    labels: &LabelSpace,
    seed: u64,
) -> Result<SplOutcome> {
    cfg.validate()?;
    if d_prime.num_classes() != labels.novel_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "D' head size",
            expected: labels.novel_labels.len(),
            got: d_prime.num_classes(),
        });
    }
    if let Some(p) = pools.iter().find(|p| p.candidates.is_empty()) {
        return Err(Error::InsufficientData(format!(
            "class {} has an empty candidate pool",
            p.class
        )));
    }

    let mut clf = d_prime.clone();
    let mut history = Vec::new();
    let mut iterations = Vec::new();
    let mut s_gen_novel: Vec<Sample> = Vec::new();
    let mut admitted = BTreeSet::new();

    for iteration in 1..=cfg.n_iterations {
        let mut selections = 0;
        let mut skipped = Vec::new();
        for pool in pools.iter_mut() {
            let picks = rank_class(&clf, pool, cfg, labels)?;
            if picks.is_empty() {
                skipped.push(pool.class);
                continue;
            }
            let ids: Vec<CandidateId> = picks.iter().map(|&(id, _)| id).collect();
            let dismissed = dismiss(pool, &ids, cfg.dismissal)?;
            for ((id, score), dismissed_ids) in picks.into_iter().zip(dismissed) {
                if !admitted.insert(id) {
                    return Err(Error::Invariant(format!("candidate {id} selected twice")));
                }
                let cand = pool.get(id).expect("selected from this pool");
                s_gen_novel.push(cand.sample.clone());
                history.push(SelectionEvent {
                    iteration,
                    class: pool.class,
                    candidate: id,
                    branch: cand.branch,
                    score,
                    dismissed_ids,
                });
                selections += 1;
            }
        }
        if selections == 0 {
            break;
        }

        let dataset = labelled(s_train_novel.iter().chain(&s_gen_novel), labels)?;
        let train_cfg = TrainConfig {
            epochs: cfg.epochs_per_iteration,
            shuffle_seed: derive_seed(seed, "spl-train", iteration as u64),
            ..cfg.train_cfg.clone()
        };
        clf = train(&clf, &dataset, &train_cfg)?;

        iterations.push(IterationSummary {
            iteration,
            selections,
            skipped_classes: skipped,
            pool_counts: pools.iter().map(|p| (p.class, p.counts())).collect(),
            train_set_size: dataset.len(),
            weight_hash: clf.weight_hash(),
        });
    }

    Ok(SplOutcome {
        classifier: clf,
        history,
        iterations,
        s_gen_novel,
    })
}

/// `(features, head index)` pairs for novel-class samples.
pub fn labelled<'a>(
    samples: impl Iterator<Item = &'a Sample>,
    labels: &LabelSpace,
) -> Result<Vec<(&'a [f64], usize)>> {
    samples
        .map(|s| Ok((s.features.as_slice(), labels.novel_index(s.label)?)))
        .collect()
}

/// Uniform draws without replacement, `n_picks` per class pool.
pub fn random_augment(pools: &[ClassPool], n_picks: usize, seed: u64) -> Result<Vec<Sample>> {
    if pools.is_empty() {
        return Err(Error::InsufficientData("no candidate pools".into()));
    }
    let mut picks = Vec::with_capacity(pools.len() * n_picks);
    for (i, pool) in pools.iter().enumerate() {
        if n_picks > pool.candidates.len() {
            return Err(Error::InsufficientData(format!(
                "cannot draw {n_picks} candidates from a pool of {} for class {}",
                pool.candidates.len(),
                pool.class
            )));
        }
        let mut rng = child_rng(seed, "random-augment", i as u64);
        for j in index::sample(&mut rng, pool.candidates.len(), n_picks) {
            picks.push(pool.candidates[j].sample.clone());
        }
    }
    Ok(picks)
}
