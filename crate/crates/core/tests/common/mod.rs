#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use spl_core::datamodel::{Branch, CandidateId, CandidateState, EpisodeSpec, Variant};
use spl_core::evalharness::{pretrain, EpisodeSettings};
use spl_core::rng::derive_seed;
use spl_core::shallownet::{adapt_head, train, Classifier, TrainConfig};
use spl_core::splengine::{
    build_pools, labelled, spl_run, BranchPolicy, ClassPool, Dismissal, SplConfig, SplOutcome,
};
use spl_core::synthworld::{make_world, split_kshot, World, WorldConfig};

pub fn world_and_d(seed: u64, pretrain_epochs: usize) -> (World, Classifier) {
    let world = make_world(&WorldConfig::default(), derive_seed(seed, "world", 0)).unwrap();
    let cfg = TrainConfig {
        shuffle_seed: derive_seed(seed, "pretrain-shuffle", 0),
        ..TrainConfig::with_epochs(pretrain_epochs)
    };
    let d = pretrain(&world, 64, &cfg, derive_seed(seed, "pretrain-init", 0)).unwrap();
    (world, d)
}

pub fn spec(variant: Variant, k: usize, seed: u64) -> EpisodeSpec {
    EpisodeSpec {
        k_shot: k,
        variant,
        seed,
        metric_ks: vec![1, 2],
    }
}

/// One self-paced episode replayed step by step, keeping the pools before and after.
pub struct Replay {
    pub cfg: SplConfig,
    pub n_real: usize,
    pub initial: Vec<ClassPool>,
    pub pools: Vec<ClassPool>,
    pub head_hash: String,
    pub outcome: SplOutcome,
}

pub fn replay(
    world: &World,
    d: &Classifier,
    spec: &EpisodeSpec,
    settings: &EpisodeSettings,
) -> Replay {
    let (branch_policy, dismissal) = spec.variant.spl_policy().unwrap();
    let cfg = SplConfig {
        branch_policy,
        dismissal,
        ..settings.spl.clone()
    };
    let labels = &world.label_space;
    let k = spec.k_shot as u64;
    let split = split_kshot(world, spec.k_shot, derive_seed(spec.seed, "split", k)).unwrap();
    let head = adapt_head(
        d,
        labels.novel_labels.len(),
        derive_seed(spec.seed, "head", k),
    )
    .unwrap();
    let head_cfg = TrainConfig {
        shuffle_seed: derive_seed(spec.seed, "head-init", k),
        ..settings.head_init.clone()
    };
    let reals = labelled(split.train_novel.iter(), labels).unwrap();
    let head = train(&head, &reals, &head_cfg).unwrap();
    let clustering = (dismissal == Dismissal::ClusterDiscard).then_some(&cfg.clustering);
    let (mut pools, _) = build_pools(
        world,
        &split.train_novel,
        &split.train_base,
        &settings.gen,
        clustering,
        derive_seed(spec.seed, "pools", k),
    )
    .unwrap();
    let initial = pools.clone();
    let outcome = spl_run(
        &head,
        &split.train_novel,
        &mut pools,
        &cfg,
        labels,
        derive_seed(spec.seed, "spl", k),
    )
    .unwrap();
    Replay {
        cfg,
        n_real: split.train_novel.len(),
        initial,
        pools,
        head_hash: head.weight_hash(),
        outcome,
    }
}

/// Checks every structural property of a self-paced run; returns the first violation.
pub fn check_spl_invariants(r: &Replay) -> Result<(), String> {
    let o = &r.outcome;
    let mut origin: BTreeMap<CandidateId, (usize, Branch, u64, Option<usize>)> = BTreeMap::new();
    for (p, pool) in r.initial.iter().enumerate() {
        for c in &pool.candidates {
            if c.state != CandidateState::Available {
                return Err(format!("candidate {} starts {:?}", c.id.0, c.state));
            }
            origin.insert(c.id, (p, c.branch, c.source_id.0, c.cluster_id));
        }
    }
    let class_pos: BTreeMap<usize, usize> = r
        .initial
        .iter()
        .enumerate()
        .map(|(i, p)| (p.class, i))
        .collect();

    let mut seen = BTreeSet::new();
    let mut retired = BTreeSet::new();
    for e in &o.history {
        let Some(&(p, branch, source, cluster)) = origin.get(&e.candidate) else {
            return Err(format!(
                "event references unknown candidate {}",
                e.candidate.0
            ));
        };
        if class_pos.get(&e.class) != Some(&p) {
            return Err(format!(
                "candidate {} selected for the wrong class",
                e.candidate.0
            ));
        }
        if branch != e.branch {
            return Err(format!(
                "candidate {} reported on the wrong branch",
                e.candidate.0
            ));
        }
        if !(0.0..=1.0).contains(&e.score) {
            return Err(format!("score {} outside [0,1]", e.score));
        }
        if !seen.insert(e.candidate) || retired.contains(&e.candidate) {
            return Err(format!(
                "candidate {} selected twice or after dismissal",
                e.candidate.0
            ));
        }
        for d in &e.dismissed_ids {
            let &(dp, db, ds, dc) = &origin[d];
            let sibling = dp == p
                && db == Branch::Pose
                && branch == Branch::Pose
                && ds == source
                && dc == cluster;
            if r.cfg.dismissal == Dismissal::SelectedOnly || !sibling {
                return Err(format!(
                    "candidate {} dismissed without being a cluster sibling",
                    d.0
                ));
            }
            if seen.contains(d) || !retired.insert(*d) {
                return Err(format!("candidate {} dismissed after being used", d.0));
            }
        }
        let allowed = match r.cfg.branch_policy {
            BranchPolicy::ViewsOnly => branch == Branch::View,
            BranchPolicy::PosesOnly => branch == Branch::Pose,
            BranchPolicy::Union | BranchPolicy::Balanced => true,
        };
        if !allowed {
            return Err(format!(
                "{branch:?} candidate admitted under {:?}",
                r.cfg.branch_policy
            ));
        }
    }

    let mut per_slot: BTreeMap<(usize, usize, Option<Branch>), usize> = BTreeMap::new();
    for e in &o.history {
        let key = match r.cfg.branch_policy {
            BranchPolicy::Balanced => Some(e.branch),
            _ => None,
        };
        *per_slot.entry((e.iteration, e.class, key)).or_default() += 1;
    }
    if let Some((slot, n)) = per_slot.iter().find(|&(_, &n)| n > r.cfg.r) {
        return Err(format!(
            "{n} selections in slot {slot:?} exceed r = {}",
            r.cfg.r
        ));
    }

    let mut cumulative = 0;
    let mut prev_hash = r.head_hash.clone();
    let mut prev_counts: Option<Vec<(usize, usize)>> = None;
    for it in &o.iterations {
        let made = o
            .history
            .iter()
            .filter(|e| e.iteration == it.iteration)
            .count();
        if made != it.selections {
            return Err(format!(
                "iteration {} reports {} selections, history has {made}",
                it.iteration, it.selections
            ));
        }
        cumulative += made;
        if it.train_set_size != r.n_real + cumulative {
            return Err(format!(
                "iteration {} trains on {} samples, expected {}",
                it.iteration,
                it.train_set_size,
                r.n_real + cumulative
            ));
        }
        if made > 0 && it.weight_hash == prev_hash {
            return Err(format!(
                "iteration {} left the weights unchanged",
                it.iteration
            ));
        }
        prev_hash = it.weight_hash.clone();
        let mut counts = Vec::new();
        for (class, c) in &it.pool_counts {
            let p = class_pos[class];
            if c.total() != r.initial[p].candidates.len() {
                return Err(format!("class {class} pool size changed to {}", c.total()));
            }
            counts.push((c.selected, c.available));
        }
        if let Some(prev) = &prev_counts {
            for (a, b) in prev.iter().zip(&counts) {
                if b.0 < a.0 || b.1 > a.1 {
                    return Err(format!(
                        "admission not monotone at iteration {}",
                        it.iteration
                    ));
                }
            }
        }
        prev_counts = Some(counts);
    }
    let mut open: BTreeMap<CandidateId, (usize, Branch)> = origin
        .iter()
        .map(|(&id, &(p, b, _, _))| (id, (p, b)))
        .collect();
    for it in &o.iterations {
        let events: Vec<_> = o
            .history
            .iter()
            .filter(|e| e.iteration == it.iteration)
            .collect();
        for (p, pool) in r.initial.iter().enumerate() {
            let slots: Vec<Vec<Branch>> = match r.cfg.branch_policy {
                BranchPolicy::ViewsOnly => vec![vec![Branch::View]],
                BranchPolicy::PosesOnly => vec![vec![Branch::Pose]],
                BranchPolicy::Union => vec![vec![Branch::View, Branch::Pose]],
                BranchPolicy::Balanced => vec![vec![Branch::View], vec![Branch::Pose]],
            };
            for branches in slots {
                let avail = open
                    .values()
                    .filter(|&&(q, b)| q == p && branches.contains(&b))
                    .count();
                let made = events
                    .iter()
                    .filter(|e| e.class == pool.class && branches.contains(&e.branch))
                    .count();
                if made != r.cfg.r.min(avail) {
                    return Err(format!(
                        "iteration {} class {} admitted {made} of {avail} open {branches:?} candidates, expected {}",
                        it.iteration, pool.class, r.cfg.r.min(avail)
                    ));
                }
            }
        }
        for e in events {
            open.remove(&e.candidate);
            for d in &e.dismissed_ids {
                open.remove(d);
            }
        }
    }

    if o.history.len() != o.s_gen_novel.len() {
        return Err("generated set differs from the selection history".into());
    }

    for pool in &r.pools {
        for c in &pool.candidates {
            let expected = if seen.contains(&c.id) {
                CandidateState::Selected
            } else if retired.contains(&c.id) {
                CandidateState::Dismissed
            } else {
                CandidateState::Available
            };
            if c.state != expected {
                return Err(format!(
                    "candidate {} ends {:?}, history implies {expected:?}",
                    c.id.0, c.state
                ));
            }
        }
    }
    Ok(())
}

/// Worst relative gap between analytic gradients and central differences
/// (step 1e-5) on a random network with `d ≤ 6`, `h ≤ 5`, `c ≤ 4`, batch `≤ 5`.
pub fn gradient_gap(seed: u64) -> f64 {
    use rand::Rng;
    use spl_core::shallownet::init_classifier;

    let mut rng = spl_core::rng::seeded_rng(seed);
    let d = rng.random_range(1..=6);
    let h = rng.random_range(1..=5);
    let c = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let mut clf = init_classifier(d, h, c, rng.random()).unwrap();
    for v in clf.b1.iter_mut().chain(clf.b2.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let batch: Vec<(&[f64], usize)> = xs
        .iter()
        .map(|x| x.as_slice())
        .zip(ys.iter().copied())
        .collect();

    let (_, g) = clf.loss_and_grads(&batch).unwrap();
    let analytic: Vec<f64> = [&g.w1.data[..], &g.b1, &g.w2.data, &g.b2].concat();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for block in 0..4 {
        let len = clf.param_blocks_mut()[block].len();
        for i in 0..len {
            let orig = clf.param_blocks_mut()[block][i];
            clf.param_blocks_mut()[block][i] = orig + step;
            let up = clf.loss_and_grads(&batch).unwrap().0;
            clf.param_blocks_mut()[block][i] = orig - step;
            let down = clf.loss_and_grads(&batch).unwrap().0;
            clf.param_blocks_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[flat];
            let gap = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(gap);
            flat += 1;
        }
    }
    worst
}

/// Top-k accuracy by full sort; ties rank the lower index first.
pub fn topk_oracle(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order[..k].contains(&label)
        })
        .count();
    hits as f64 / rows.len() as f64
}
