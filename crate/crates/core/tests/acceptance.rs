//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use spl_core::clustering::kmeans_fit;
use spl_core::datamodel::{CandidateId, Variant};
use spl_core::evalharness::{ablate, topk_accuracy, AblationPlan, EpisodeSettings, WorldSource};
use spl_core::rng::seeded_rng;
use spl_core::shallownet::{adam_step, AdamState, TrainConfig};
use spl_core::synthworld::WorldConfig;

struct Verdict {
    pass: bool,
    detail: String,
}

// Written past the test harness capture so every line lands in the log.
#[allow(clippy::explicit_write)]
fn report(id: usize, name: &str, v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    writeln!(
        std::io::stdout(),
        "acceptance {id} {status} {name}: {}",
        v.detail
    )
    .unwrap();
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let worst = (0..25).map(common::gradient_gap).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Verdict {
        pass: worst < 1e-4 && elapsed < Duration::from_secs(5),
        detail: format!("worst relative gap {worst:.2e} over 25 instances in {elapsed:.2?}"),
    }
}

fn adam_oracle() -> Verdict {
    let cfg = TrainConfig::default();
    let mut theta = [0.0];
    let mut state = AdamState::new(1);
    let mut worst: f64 = 0.0;
    let (mut m, mut v, mut expected) = (0.0, 0.0, 0.0);
    let mut first = 0.0;
    for t in 1..=3 {
        adam_step(&mut [&mut theta[..]], &[&[1.0][..]], &mut state, &cfg).unwrap();
        m = cfg.beta1 * m + (1.0 - cfg.beta1);
        v = cfg.beta2 * v + (1.0 - cfg.beta2);
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        expected -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        worst = worst.max((theta[0] - expected).abs());
        if t == 1 {
            first = theta[0];
        }
    }
    Verdict {
        pass: worst <= 1e-12 && (first + 9.99999999e-4).abs() < 1e-10,
        detail: format!("3-step gap {worst:.1e}, first step {first:.12e}"),
    }
}

fn kmeans_oracle() -> Verdict {
    let start = Instant::now();
    let mut monotone = 0;
    for seed in 0..50u64 {
        let mut rng = seeded_rng(seed);
        let points: Vec<(CandidateId, Vec<f64>)> = (0..60)
            .map(|i| {
                (
                    CandidateId(i),
                    (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let fit = kmeans_fit(&points, 4, seed, 100, 0.0).unwrap();
        if fit.inertia_trace.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let centres = [[0.0, 0.0], [10.0, 0.0], [5.0, 75f64.sqrt()]];
    let mut recovered = 0;
    for seed in 0..50u64 {
        let mut rng = seeded_rng(1000 + seed);
        let mut points = Vec::new();
        let mut truth = BTreeMap::new();
        for (b, c) in centres.iter().enumerate() {
            for _ in 0..20 {
                let id = CandidateId(points.len() as u64);
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                points.push((id, vec![c[0] + 0.1 * x, c[1] + 0.1 * y]));
                truth.insert(id, b);
            }
        }
        let fit = kmeans_fit(&points, 3, seed, 100, 1e-6).unwrap();
        let mut mapping = BTreeMap::new();
        let consistent = fit
            .assignments
            .iter()
            .all(|(id, cluster)| *mapping.entry(*cluster).or_insert(truth[id]) == truth[id]);
        if consistent && mapping.len() == 3 {
            recovered += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        pass: monotone == 50 && recovered == 50 && elapsed < Duration::from_secs(5),
        detail: format!("monotone {monotone}/50, blob recovery {recovered}/50 in {elapsed:.2?}"),
    }
}

fn spl_invariants() -> Verdict {
    let settings = EpisodeSettings::default();
    let mut failures = Vec::new();
    let mut events = 0;
    for seed in 0..20u64 {
        let (world, d) = common::world_and_d(seed, 200);
        let replay = common::replay(
            &world,
            &d,
            &common::spec(Variant::SplAll, 1, seed),
            &settings,
        );
        events += replay.outcome.history.len();
        if let Err(e) = common::check_spl_invariants(&replay) {
            failures.push(format!("seed {seed}: {e}"));
        }
    }
    Verdict {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("20 episodes, {events} selection events replayed")
        } else {
            failures.join("; ")
        },
    }
}

struct Ordering {
    baseline: f64,
    random: f64,
    spl_all: f64,
    nn: f64,
    elapsed: Duration,
}

fn desk_scale_ordering() -> Ordering {
    let start = Instant::now();
    let source = WorldSource::PerSeed {
        config: WorldConfig::default(),
        hidden: 64,
        pretrain: TrainConfig::with_epochs(600),
    };
    let plan = AblationPlan {
        variants: vec![
            Variant::Baseline,
            Variant::RandomViewsPoses,
            Variant::SplAll,
            Variant::NearestNeighbor,
        ],
        k_list: vec![1],
        seeds: (0..20).collect(),
        metric_ks: vec![1],
    };
    let table = ablate(&source, &plan, &EpisodeSettings::default(), None).unwrap();
    let mean = |v| 100.0 * table.row(v, 1, 1).unwrap().mean_acc;
    Ordering {
        baseline: mean(Variant::Baseline),
        random: mean(Variant::RandomViewsPoses),
        spl_all: mean(Variant::SplAll),
        nn: mean(Variant::NearestNeighbor),
        elapsed: start.elapsed(),
    }
}

fn ordering_verdict(o: &Ordering) -> Verdict {
    Verdict {
        pass: o.spl_all > o.random
            && o.random > o.baseline
            && o.spl_all - o.baseline >= 5.0
            && o.elapsed < Duration::from_secs(180),
        detail: format!(
            "top-1 spl-all {:.2}, random {:.2}, baseline {:.2} (gap {:.2}) in {:.2?}",
            o.spl_all,
            o.random,
            o.baseline,
            o.spl_all - o.baseline,
            o.elapsed
        ),
    }
}

fn nn_verdict(o: &Ordering) -> Verdict {
    Verdict {
        pass: o.nn >= o.baseline - 2.0,
        detail: format!(
            "top-1 nearest-neighbor {:.2}, baseline {:.2}",
            o.nn, o.baseline
        ),
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn determinism() -> Verdict {
    let source = WorldSource::PerSeed {
        config: WorldConfig::default(),
        hidden: 32,
        pretrain: TrainConfig::with_epochs(30),
    };
    let plan = AblationPlan {
        variants: Variant::ALL.to_vec(),
        k_list: vec![1, 2],
        seeds: vec![0, 1, 2],
        metric_ks: vec![1, 2],
    };
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            ablate(
                &source,
                &plan,
                &EpisodeSettings::default(),
                Some(dir.path()),
            )
            .unwrap();
            dir_bytes(dir.path())
        })
        .collect();
    let json = runs[0].keys().filter(|k| k.ends_with(".json")).count();
    let has_csv = runs[0].contains_key("ablation.csv");
    Verdict {
        pass: runs[0] == runs[1] && has_csv && json == 9 * 2 * 3,
        detail: format!(
            "{} files compared byte for byte, {json} episode JSONs",
            runs[0].len()
        ),
    }
}

fn topk_metric() -> Verdict {
    let mut rng = seeded_rng(8);
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            (0..5)
                .map(|_| (rng.random_range(0..8) as f64) / 4.0)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
    let accs: Vec<f64> = (1..=5)
        .map(|k| topk_accuracy(&rows, &labels, k).unwrap())
        .collect();
    let monotone = accs.windows(2).all(|w| w[0] <= w[1]) && accs[4] == 1.0;
    let oracle = (1..=5).all(|k| accs[k - 1] == common::topk_oracle(&rows, &labels, k));
    let hand_rows = vec![
        vec![3.0, 1.0, 2.0],
        vec![1.0, 2.0, 3.0],
        vec![3.0, 2.0, 1.0],
    ];
    let hand = topk_accuracy(&hand_rows[..1], &[0], 1).unwrap() == 1.0
        && topk_accuracy(&hand_rows[1..], &[0, 0], 2).unwrap() == 0.5
        && topk_accuracy(&hand_rows, &[0, 0, 0], 2).unwrap() == 2.0 / 3.0;
    Verdict {
        pass: monotone && oracle && hand,
        detail: format!(
            "top-1..5 {accs:.3?}, hand example {}",
            if hand { "exact" } else { "wrong" }
        ),
    }
}

#[test]
fn acceptance() {
    let ordering = desk_scale_ordering();
    let verdicts = [
        ("gradient oracle", gradient_oracle()),
        ("adam oracle", adam_oracle()),
        ("k-means", kmeans_oracle()),
        ("self-paced invariants", spl_invariants()),
        ("desk-scale ordering", ordering_verdict(&ordering)),
        ("nearest-neighbour sanity", nn_verdict(&ordering)),
        ("ablation determinism", determinism()),
        ("top-k metric", topk_metric()),
    ];
    writeln!(std::io::stdout()).unwrap();
    for (i, (name, v)) in verdicts.iter().enumerate() {
        report(i + 1, name, v);
    }
    let failed: Vec<usize> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| !v.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
