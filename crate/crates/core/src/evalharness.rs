//! Episodic k-shot evaluation of every ablation variant, and the ablation table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassId, EpisodeSpec, LabelSpace, Sample, SampleId, Variant};
use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::persist;
use crate::rng::derive_seed;
use crate::shallownet::{adapt_head, init_classifier, train, Classifier, TrainConfig};
use crate::splengine::{
    build_pools, labelled, random_augment, spl_run, BranchPolicy, Dismissal, IterationSummary,
    PoolClusterSummary, SelectionEvent, SplConfig,
};
use crate::synthworld::{make_world, split_kshot, GenConfig, World, WorldConfig};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` highest entries of `row`.
///
/// Entries tied with the label's score rank ahead of it when their index is lower.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

pub fn topk_accuracy(logit_rows: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if logit_rows.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "top-k rows vs labels",
            expected: logit_rows.len(),
            got: labels.len(),
        });
    }
    if logit_rows.is_empty() {
        return Err(Error::InsufficientData(
            "top-k accuracy of zero rows".into(),
        ));
    }
    let mut hits = 0usize;
    for (row, &label) in logit_rows.iter().zip(labels) {
        if k == 0 || k > row.len() {
            return Err(Error::config(
                "metric_ks",
                format!("top-{k} on {} classes", row.len()),
            ));
        }
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: row.len(),
            });
        }
        if in_top_k(row, label, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / logit_rows.len() as f64)
}

/// A labelled reference embedding for nearest-neighbour lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub id: SampleId,
    pub embedding: Vec<f64>,
    pub label: ClassId,
}

/// Label of the Euclidean-nearest reference; ties go to the lowest sample id.
pub fn nn_classify(references: &[Reference], query: &[f64]) -> Result<ClassId> {
    nn_scan(references, query).map(|r| r.label)
}

fn nn_scan<'a>(references: &'a [Reference], query: &[f64]) -> Result<&'a Reference> {
    let mut best: Option<(&Reference, f64)> = None;
    for r in references {
        if r.embedding.len() != query.len() {
            return Err(Error::DimensionMismatch {
                what: "nearest-neighbour query",
                expected: r.embedding.len(),
                got: query.len(),
            });
        }
        let d = squared_distance(&r.embedding, query);
        let better = match best {
            None => true,
            Some((b, bd)) => d < bd || (d == bd && r.id < b.id),
        };
        if better {
            best = Some((r, d));
        }
    }
    best.map(|(r, _)| r).ok_or_else(|| {
        Error::InsufficientData("nearest neighbour over an empty reference set".into())
    })
}

/// Per-class scores for the nearest-neighbour variant: minus the distance to
/// the closest reference of each class. The argmax agrees with [`nn_classify`].
fn nn_scores(
    references: &[Reference],
    query: &[f64],
    n_classes: usize,
    labels: &LabelSpace,
) -> Result<Vec<f64>> {
    let mut best = vec![f64::INFINITY; n_classes];
    for r in references {
        let idx = labels.novel_index(r.label)?;
        best[idx] = best[idx].min(squared_distance(&r.embedding, query).sqrt());
    }
    Ok(best.into_iter().map(|d| -d).collect())
}

/// Everything besides the world and `D` that an episode needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub gen: GenConfig,
    pub spl: SplConfig,
    /// Head-initialisation phase on the real k-shot samples.
    pub head_init: TrainConfig,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            spl: SplConfig::default(),
            head_init: TrainConfig::with_epochs(20),
        }
    }
}

impl EpisodeSettings {
    /// Epoch budget of the non-iterative variants, matching head-init plus all SPL iterations.
    pub fn fine_tune_epochs(&self) -> usize {
        self.head_init.epochs + self.spl.n_iterations * self.spl.epochs_per_iteration
    }

    /// Hallucinated picks per class for the random-augmentation variant.
    pub fn random_picks(&self) -> usize {
        self.spl.n_iterations * self.spl.r
    }
}

impl Variant {
    /// Branch policy and dismissal rule of a self-paced variant.
    pub fn spl_policy(self) -> Option<(BranchPolicy, Dismissal)> {
        use BranchPolicy::*;
        use Dismissal::*;
        match self {
            Variant::SplViews => Some((ViewsOnly, SelectedOnly)),
            Variant::SplPoses => Some((PosesOnly, SelectedOnly)),
            Variant::SplPosesClustering => Some((PosesOnly, ClusterDiscard)),
            Variant::SplPosesViews => Some((Union, SelectedOnly)),
            Variant::SplBalanced => Some((Balanced, SelectedOnly)),
            Variant::SplAll => Some((Balanced, ClusterDiscard)),
            Variant::Baseline | Variant::RandomViewsPoses | Variant::NearestNeighbor => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub spec: EpisodeSpec,
    pub topk: Vec<TopK>,
    pub history: Vec<SelectionEvent>,
    pub iterations: Vec<IterationSummary>,
    pub clusters: Vec<PoolClusterSummary>,
    /// Sizes of the real and hallucinated fine-tuning sets.
    pub n_train_real: usize,
    pub n_train_generated: usize,
    pub n_test: usize,
    pub world_seed: u64,
    pub world_config: WorldConfig,
    pub settings: EpisodeSettings,
    pub pretrained_hash: String,
    pub final_hash: Option<String>,
    /// Wall-clock seconds; excluded from reproducible outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_seconds: Option<f64>,
}

impl EpisodeResult {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

/// Trains `D` on the base-class training samples.
pub fn pretrain(
    world: &World,
    hidden: usize,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Classifier> {
    let labels = &world.label_space;
    let base: Vec<(&[f64], usize)> = world
        .base_train()
        .map(|s| Ok((s.features.as_slice(), labels.base_index(s.label)?)))
        .collect::<Result<_>>()?;
    let d = init_classifier(
        world.config.d_feat,
        hidden,
        labels.base_labels.len(),
        init_seed,
    )?;
    train(&d, &base, cfg)
}

fn evaluate_rows(clf: &Classifier, test: &[Sample]) -> Result<Vec<Vec<f64>>> {
    test.iter().map(|s| clf.logits(&s.features)).collect()
}

fn audit_disjoint(test: &[Sample], train: &[&Sample]) -> Result<()> {
    let test_ids: BTreeSet<SampleId> = test.iter().map(|s| s.id).collect();
    if let Some(s) = train.iter().find(|s| test_ids.contains(&s.id)) {
        return Err(Error::Invariant(format!(
            "test sample {} leaked into the training data",
            s.id
        )));
    }
    Ok(())
}

/// Runs one k-shot episode of `spec.variant` and scores it on the novel test set.
pub fn run_episode(
    world: &World,
    spec: &EpisodeSpec,
    settings: &EpisodeSettings,
    pretrained: &Classifier,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let labels = &world.label_space;
    let n_novel = labels.novel_labels.len();
    spec.validate(n_novel)?;
    settings.gen.validate()?;
    settings.spl.validate()?;
    settings.head_init.validate("head_init")?;
    if pretrained.d_feat() != world.config.d_feat {
        return Err(Error::DimensionMismatch {
            what: "pretrained classifier input",
            expected: world.config.d_feat,
            got: pretrained.d_feat(),
        });
    }

    let k = spec.k_shot as u64;
    let split = split_kshot(world, spec.k_shot, derive_seed(spec.seed, "split", k))?;
    let pool_seed = derive_seed(spec.seed, "pools", k);
    let head_seed = derive_seed(spec.seed, "head", k);
    let head_init = TrainConfig {
        shuffle_seed: derive_seed(spec.seed, "head-init", k),
        ..settings.head_init.clone()
    };

    let mut history = Vec::new();
    let mut iterations = Vec::new();
    let mut clusters = Vec::new();
    let mut generated: Vec<Sample> = Vec::new();
    let mut candidate_samples: Vec<Sample> = Vec::new();

    let rows: Vec<Vec<f64>>;
    let final_hash;
    match spec.variant {
        Variant::NearestNeighbor => {
            let references: Vec<Reference> = split
                .train_novel
                .iter()
                .map(|s| {
                    Ok(Reference {
                        id: s.id,
                        embedding: pretrained.hidden_embedding(&s.features)?,
                        label: s.label,
                    })
                })
                .collect::<Result<_>>()?;
            rows = split
                .test_novel
                .iter()
                .map(|s| {
                    nn_scores(
                        &references,
                        &pretrained.hidden_embedding(&s.features)?,
                        n_novel,
                        labels,
                    )
                })
                .collect::<Result<_>>()?;
            final_hash = None;
        }
        Variant::Baseline | Variant::RandomViewsPoses => {
            let d_prime = adapt_head(pretrained, n_novel, head_seed)?;
            if spec.variant == Variant::RandomViewsPoses {
                let (pools, _) = build_pools(
                    world,
                    &split.train_novel,
                    &split.train_base,
                    &settings.gen,
                    None,
                    pool_seed,
                )?;
                generated = random_augment(
                    &pools,
                    settings.random_picks(),
                    derive_seed(spec.seed, "random", k),
                )?;
                candidate_samples = pools
                    .into_iter()
                    .flat_map(|p| p.candidates)
                    .map(|c| c.sample)
                    .collect();
            }
            let data = labelled(split.train_novel.iter().chain(&generated), labels)?;
            let cfg = TrainConfig {
                epochs: settings.fine_tune_epochs(),
                ..head_init
            };
            let tuned = train(&d_prime, &data, &cfg)?;
            rows = evaluate_rows(&tuned, &split.test_novel)?;
            final_hash = Some(tuned.weight_hash());
        }
        v => {
            let (branch_policy, dismissal) = v.spl_policy().expect("self-paced variant");
            let spl_cfg = SplConfig {
                branch_policy,
                dismissal,
                ..settings.spl.clone()
            };
            let d_prime = adapt_head(pretrained, n_novel, head_seed)?;
            let reals = labelled(split.train_novel.iter(), labels)?;
            let d_prime = train(&d_prime, &reals, &head_init)?;
            let clustering =
                (dismissal == Dismissal::ClusterDiscard).then_some(&spl_cfg.clustering);
            let (mut pools, summaries) = build_pools(
                world,
                &split.train_novel,
                &split.train_base,
                &settings.gen,
                clustering,
                pool_seed,
            )?;
            let outcome = spl_run(
                &d_prime,
                &split.train_novel,
                &mut pools,
                &spl_cfg,
                labels,
                derive_seed(spec.seed, "spl", k),
            )?;
            rows = evaluate_rows(&outcome.classifier, &split.test_novel)?;
            final_hash = Some(outcome.classifier.weight_hash());
            history = outcome.history;
            iterations = outcome.iterations;
            clusters = summaries;
            generated = outcome.s_gen_novel;
            candidate_samples = pools
                .into_iter()
                .flat_map(|p| p.candidates)
                .map(|c| c.sample)
                .collect();
        }
    }

    let touched: Vec<&Sample> = split
        .train_novel
        .iter()
        .chain(&generated)
        .chain(&candidate_samples)
        .collect();
    audit_disjoint(&split.test_novel, &touched)?;

    let truth: Vec<usize> = split
        .test_novel
        .iter()
        .map(|s| labels.novel_index(s.label))
        .collect::<Result<_>>()?;
    let topk = spec
        .metric_ks
        .iter()
        .map(|&mk| {
            Ok(TopK {
                k: mk,
                accuracy: topk_accuracy(&rows, &truth, mk)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(EpisodeResult {
        spec: spec.clone(),
        topk,
        history,
        iterations,
        clusters,
        n_train_real: split.train_novel.len(),
        n_train_generated: generated.len(),
        n_test: split.test_novel.len(),
        world_seed: world.seed,
        world_config: world.config.clone(),
        settings: settings.clone(),
        pretrained_hash: pretrained.weight_hash(),
        final_hash,
        timing_seconds: Some(start.elapsed().as_secs_f64()),
    })
}

/// Where an ablation gets its worlds and pretrained classifiers.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum WorldSource {
    /// One world and `D` shared by every seed.
    Fixed {
        world: World,
        classifier: Classifier,
    },
    /// A fresh world and pretraining per seed.
    PerSeed {
        config: WorldConfig,
        hidden: usize,
        pretrain: TrainConfig,
    },
}

impl WorldSource {
    /// World and `D` for an episode seed.
    pub fn materialize(&self, seed: u64) -> Result<(World, Classifier)> {
        match self {
            WorldSource::Fixed { world, classifier } => Ok((world.clone(), classifier.clone())),
            WorldSource::PerSeed {
                config,
                hidden,
                pretrain: cfg,
            } => {
                let world = make_world(config, derive_seed(seed, "world", 0))?;
                let cfg = TrainConfig {
                    shuffle_seed: derive_seed(seed, "pretrain-shuffle", 0),
                    ..cfg.clone()
                };
                let d = pretrain(&world, *hidden, &cfg, derive_seed(seed, "pretrain-init", 0))?;
                Ok((world, d))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub metric_ks: Vec<usize>,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("episodes.variants", self.variants.is_empty()),
            ("episodes.k_list", self.k_list.is_empty()),
            ("episodes.seeds", self.seeds.is_empty()),
            ("episodes.metric_ks", self.metric_ks.is_empty()),
        ];
        for (field, empty) in lists {
            if empty {
                return Err(Error::config(field, "must be non-empty"));
            }
        }
        if self.k_list.contains(&0) {
            return Err(Error::config(
                "episodes.k_list",
                "shot counts must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub k: usize,
    pub metric_k: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Episodes in `(variant, k, seed)` order.
    pub episodes: Vec<EpisodeResult>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    /// CSV text: header row, `.` decimal separator, six decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "k", "metric_k", "mean_acc", "std_acc", "n_seeds"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.k.to_string(),
                r.metric_k.to_string(),
                format!("{:.6}", r.mean_acc),
                format!("{:.6}", r.std_acc),
                r.n_seeds.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn row(&self, variant: Variant, k: usize, metric_k: usize) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.k == k && r.metric_k == metric_k)
    }

    /// Per-seed accuracies of one cell, in plan seed order.
    pub fn accuracies(&self, variant: Variant, k: usize, metric_k: usize) -> Vec<f64> {
        self.episodes
            .iter()
            .filter(|e| e.spec.variant == variant && e.spec.k_shot == k)
            .filter_map(|e| e.accuracy(metric_k))
            .collect()
    }

    /// Human-readable summary, one line per row.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} k={:<3} top-{} {:>7.2}% ± {:.2} (n={})",
                r.variant.name(),
                r.k,
                r.metric_k,
                100.0 * r.mean_acc,
                100.0 * r.std_acc,
                r.n_seeds
            );
        }
        out
    }
}

/// File name of an episode written by [`ablate`].
pub fn episode_file_name(spec: &EpisodeSpec) -> String {
    format!(
        "episode_{}_k{}_seed{}.json",
        spec.variant.name(),
        spec.k_shot,
        spec.seed
    )
}

/// Runs every `(variant, k, seed)` episode and aggregates accuracies across seeds.
///
/// Seeds run in parallel; results are merged in plan order, so output is
/// independent of scheduling. With `out_dir` set, writes `ablation.csv` and
/// one JSON per episode (without timings).
pub fn ablate(
    source: &WorldSource,
    plan: &AblationPlan,
    settings: &EpisodeSettings,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    plan.validate()?;
    let per_seed: Vec<Vec<EpisodeResult>> = plan
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<EpisodeResult>> {
            let (world, d) = source
                .materialize(seed)
                .map_err(|e| e.context(format!("preparing world for seed {seed}")))?;
            let mut results = Vec::new();
            for &variant in &plan.variants {
                for &k in &plan.k_list {
                    let spec = EpisodeSpec {
                        k_shot: k,
                        variant,
                        seed,
                        metric_ks: plan.metric_ks.clone(),
                    };
                    let r = run_episode(&world, &spec, settings, &d)
                        .map_err(|e| e.context(format!("episode {variant} k={k} seed={seed}")))?;
                    results.push(r);
                }
            }
            Ok(results)
        })
        .collect::<Result<_>>()?;

    let mut episodes = Vec::new();
    let mut rows = Vec::new();
    for (vi, &variant) in plan.variants.iter().enumerate() {
        for (ki, &k) in plan.k_list.iter().enumerate() {
            let cell: Vec<&EpisodeResult> = per_seed
                .iter()
                .map(|results| &results[vi * plan.k_list.len() + ki])
                .collect();
            for &mk in &plan.metric_ks {
                let accs: Vec<f64> = cell.iter().filter_map(|e| e.accuracy(mk)).collect();
                let (mean_acc, std_acc) = mean_std(&accs);
                rows.push(AblationRow {
                    variant,
                    k,
                    metric_k: mk,
                    mean_acc,
                    std_acc,
                    n_seeds: accs.len(),
                });
            }
            episodes.extend(cell.into_iter().cloned());
        }
    }
    let table = AblationTable { rows, episodes };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv()?)?;
        for e in &table.episodes {
            let reproducible = EpisodeResult {
                timing_seconds: None,
                ..e.clone()
            };
            persist::write_json(&dir.join(episode_file_name(&e.spec)), &reproducible)?;
        }
    }
    Ok(table)
}
