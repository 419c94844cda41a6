//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::{bpr_mf_gradient_error, nas_gradient_error, random_model};
use nas_rec::baselines::{build_nas_star, train_bpr_mf_from};
use nas_rec::data::{
    binarize_relevance, split, DatasetSplit, Interaction, InteractionSet, SocialGraph,
};
use nas_rec::eval::{dcg_at_n, evaluate, ndcg_at_n, user_metrics, EvalReport, Recommender};
use nas_rec::model::{attention_scores, attention_weights, AttentionMode};
use nas_rec::nn::softmax;
use nas_rec::snapshot::ModelSnapshot;
use nas_rec::synth::{attention_diagnostics, generate, SyntheticDataset, SyntheticSpec};
use nas_rec::train::{
    bpr_loss, mf_pretrain, pretrain_shallow_then_deepen, train, EpochLog, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Vec::new();
    for mode in [
        AttentionMode::Softmax,
        AttentionMode::Unit,
        AttentionMode::Mean,
    ] {
        let mut w: f64 = 0.0;
        let mut checked = 0;
        while checked < 20 {
            let (d, h, k) = (
                rng.gen_range(1..=8),
                rng.gen_range(1..=3),
                rng.gen_range(1..=5),
            );
            let model = random_model(d, h, k, mode, &mut rng);
            let friends: Vec<usize> = (1..=k).collect();
            if let Some(e) = nas_gradient_error(&model, &friends) {
                w = w.max(e);
                checked += 1;
            }
        }
        worst.push((format!("{mode:?}"), w));
    }
    let mut w: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=8);
        w = w.max(bpr_mf_gradient_error(d, 0.01, &mut rng));
    }
    worst.push(("BprMf".into(), w));
    let elapsed = started.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        max < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {} in {:.1}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn attention_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=6);
        let model = random_model(d, rng.gen_range(1..=3), k, AttentionMode::Softmax, &mut rng);
        let u = model.factors.users.row(0).to_vec();
        let effects: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = effects.iter().map(Vec::as_slice).collect();
        let gamma = attention_weights(&u, &refs, &model.params);
        if gamma.iter().any(|&g| g < 0.0) || (gamma.iter().sum::<f64>() - 1.0).abs() >= 1e-12 {
            failures.push(format!("trial {trial}: not a distribution"));
        }
        let (_, phi) = attention_scores(&u, &refs, model.params.attention.as_ref().unwrap());
        let c = rng.gen_range(-50.0..50.0);
        let shifted = softmax(&phi.iter().map(|p| p + c).collect::<Vec<_>>());
        if gamma
            .iter()
            .zip(&shifted)
            .any(|(a, b)| (a - b).abs() >= 1e-12)
        {
            failures.push(format!("trial {trial}: shift"));
        }
        let same: Vec<&[f64]> = vec![refs[0]; k];
        let uniform = attention_weights(&u, &same, &model.params);
        if uniform.iter().any(|g| (g - 1.0 / k as f64).abs() >= 1e-12) {
            failures.push(format!("trial {trial}: identical effects"));
        }
        let friends: Vec<usize> = (1..=k).collect();
        let mut permuted = friends.clone();
        for i in (1..permuted.len()).rev() {
            permuted.swap(i, rng.gen_range(0..=i));
        }
        let a = model.score_all(0, &friends);
        let b = model.score_all(0, &permuted);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() >= 1e-12) {
            failures.push(format!("trial {trial}: permutation"));
        }
    }
    let detail = if failures.is_empty() {
        "1000 inputs: distribution, shift, uniform, permutation".to_string()
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    verdict(failures.is_empty(), detail)
}

// 3 -------------------------------------------------------------------------

struct Table(Vec<Vec<f64>>);

impl Recommender for Table {
    fn n_users(&self) -> usize {
        self.0.len()
    }
    fn n_items(&self) -> usize {
        self.0[0].len()
    }
    fn k_max(&self) -> usize {
        0
    }
    fn score_all(&self, user: usize, _: &[usize]) -> Vec<f64> {
        self.0[user].clone()
    }
}

/// Full sort and direct summation, per user.
fn brute_force(
    scores: &[f64],
    seen: &BTreeSet<usize>,
    relevant: &BTreeSet<usize>,
    n: usize,
) -> (f64, f64) {
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|i| !seen.contains(i)).collect();
    ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(n).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..relevant.len().min(n) {
        idcg += 1.0 / (pos as f64 + 2.0).log2();
    }
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    let mut users = 0;
    for _ in 0..100 {
        let m = rng.gen_range(1..=50);
        let n_users = rng.gen_range(1..=5);
        let scores: Vec<Vec<f64>> = (0..n_users)
            .map(|_| (0..m).map(|_| rng.gen_range(0..10) as f64).collect())
            .collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for u in 0..n_users {
            for i in 0..m {
                let r = rng.gen_range(1..=5) as f64;
                match rng.gen_range(0..5) {
                    0 => train.push(Interaction {
                        user: u,
                        item: i,
                        rating: r,
                    }),
                    1 | 2 => test.push(Interaction {
                        user: u,
                        item: i,
                        rating: r,
                    }),
                    _ => {}
                }
            }
        }
        let train = InteractionSet::new(n_users, m, train).unwrap();
        let labels = binarize_relevance(&InteractionSet::new(n_users, m, test).unwrap());
        let got = user_metrics(
            &Table(scores.clone()),
            &train,
            &labels,
            &SocialGraph::empty(n_users),
            10,
            0,
        );
        let sets = train.item_sets();
        for u in 0..n_users {
            if let Some(metrics) = got[u] {
                users += 1;
                let seen = sets[u].iter().copied().collect();
                if metrics != brute_force(&scores[u], &seen, &labels.relevant[u], 10) {
                    mismatches += 1;
                }
            }
        }
    }
    let dcg1 = dcg_at_n(&[true], 10);
    let ndcg3 = ndcg_at_n(&[false, false, true], 1, 10);
    verdict(
        mismatches == 0 && dcg1 == 1.0 && ndcg3 == 0.5,
        format!("{mismatches} mismatches over {users} users; DCG {dcg1}, NDCG {ndcg3}"),
    )
}

// 4, 5, 6 -------------------------------------------------------------------

fn planted(seed: u64) -> SyntheticDataset {
    generate(&SyntheticSpec {
        n: 300,
        m: 500,
        alpha: 0.8,
        friends_per_user: 10,
        influential_per_user: 5,
        seed,
        ..SyntheticSpec::default()
    })
    .expect("valid spec")
}

fn model_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 16,
        h: 1,
        k_max: 10,
        neg_per_pos: 4,
        batch_size: 512,
        lr: 3e-3,
        epochs: 20,
        seed,
        mf_epochs: 30,
        ..TrainConfig::default()
    }
}

fn test_ndcg(model: &dyn Recommender, s: &DatasetSplit, graph: &SocialGraph, seed: u64) -> f64 {
    let labels = binarize_relevance(&s.test);
    evaluate(model, "m", &s.train, &labels, graph, 10, &[seed])
        .unwrap()
        .ndcg_mean
}

struct SeedResult {
    nas: f64,
    star: f64,
    bpr: f64,
    gamma_influential: f64,
    gamma_other: f64,
}

fn ordering_runs() -> (Vec<SeedResult>, Duration) {
    let started = Instant::now();
    let mut out = Vec::new();
    for seed in SEEDS {
        let data = planted(seed);
        let s = split(&data.ratings, 0.75, 0.10, seed).unwrap();
        let cfg = model_config(seed);
        let mf = mf_pretrain(&s.train, cfg.d, cfg.mf_epochs, cfg.mf_lr, cfg.mf_reg, seed).unwrap();
        let nas = train(&cfg, &s, &data.graph, mf.factors.clone())
            .unwrap()
            .best;
        let star = build_nas_star(&cfg, &s, &data.graph, mf.factors.clone(), false)
            .unwrap()
            .best;
        let bpr = train_bpr_mf_from(&cfg, &s, mf.factors).unwrap().best;
        let diag = attention_diagnostics(&nas, &data.graph, &data.influencers);
        out.push(SeedResult {
            nas: test_ndcg(&nas, &s, &data.graph, seed),
            star: test_ndcg(&star, &s, &data.graph, seed),
            bpr: test_ndcg(&bpr, &s, &data.graph, seed),
            gamma_influential: diag.influential,
            gamma_other: diag.other,
        });
    }
    (out, started.elapsed())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn model_ordering(runs: &[SeedResult], elapsed: Duration) -> Verdict {
    let (nas, star, bpr) = (
        mean(runs.iter().map(|r| r.nas)),
        mean(runs.iter().map(|r| r.star)),
        mean(runs.iter().map(|r| r.bpr)),
    );
    let wins = runs.iter().filter(|r| r.nas > r.star).count();
    verdict(
        nas > star && nas > bpr && wins >= 4 && elapsed < Duration::from_secs(600),
        format!(
            "NDCG@10 NAS {nas:.4}, NAS* {star:.4}, BPR-MF {bpr:.4}; NAS > NAS* in {wins}/5 seeds; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn attention_diagnosis(runs: &[SeedResult]) -> Verdict {
    let wins = runs
        .iter()
        .filter(|r| r.gamma_influential > r.gamma_other)
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r.gamma_influential, r.gamma_other))
        .collect();
    verdict(
        wins >= 4,
        format!(
            "influential > other in {wins}/5 seeds (mean gamma {})",
            pairs.join(" ")
        ),
    )
}

fn best_val_ndcg(log: &[EpochLog]) -> f64 {
    log.iter()
        .filter_map(|e| e.val_ndcg)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn pretraining_direction() -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let data = planted(100 + seed);
        let s = split(&data.ratings, 0.75, 0.10, seed).unwrap();
        let cfg = TrainConfig {
            h: 3,
            epochs: 10,
            pretrain_epochs: Some(10),
            ..model_config(seed)
        };
        let mf = mf_pretrain(&s.train, cfg.d, cfg.mf_epochs, cfg.mf_lr, cfg.mf_reg, seed).unwrap();
        let warm = pretrain_shallow_then_deepen(
            &cfg,
            &s,
            &data.graph,
            mf.factors.clone(),
            AttentionMode::Softmax,
        )
        .unwrap()
        .deep;
        let cold = train(&cfg, &s, &data.graph, mf.factors).unwrap();
        let (w, c) = (best_val_ndcg(&warm.log), best_val_ndcg(&cold.log));
        if w > c {
            wins += 1;
        }
        pairs.push(format!("{w:.4}/{c:.4}"));
    }
    verdict(
        wins >= 3,
        format!(
            "deepened > random init in {wins}/5 seeds (val NDCG@10 {})",
            pairs.join(" ")
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn sequential_run() -> (Vec<u8>, String, String) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| {
        let data = generate(&SyntheticSpec {
            n: 80,
            m: 120,
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = split(&data.ratings, 0.75, 0.10, 5).unwrap();
        let cfg = TrainConfig {
            d: 6,
            h: 2,
            epochs: 3,
            pretrain_epochs: Some(2),
            ..model_config(5)
        };
        let mf = mf_pretrain(&s.train, cfg.d, cfg.mf_epochs, cfg.mf_lr, cfg.mf_reg, 5).unwrap();
        let model =
            pretrain_shallow_then_deepen(&cfg, &s, &data.graph, mf.factors, AttentionMode::Softmax)
                .unwrap()
                .deep
                .best;
        let labels = binarize_relevance(&s.test);
        let report: EvalReport = evaluate(
            &model,
            "nas",
            &s.train,
            &labels,
            &data.graph,
            10,
            &[0, 1, 2],
        )
        .unwrap();
        (
            ModelSnapshot::from(model).to_bytes(),
            report.to_csv(),
            report.to_json(),
        )
    })
}

fn determinism() -> Verdict {
    let a = sequential_run();
    let b = sequential_run();
    verdict(
        a == b,
        format!(
            "snapshot {} bytes, reports {} bytes, identical: {}",
            a.0.len(),
            a.1.len() + a.2.len(),
            a == b
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn mf_sanity() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (40, 60);
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let triples = (0..n)
        .flat_map(|u| (0..m).map(move |i| (u, i)))
        .filter(|_| rng.gen_bool(0.5))
        .map(|(u, i)| Interaction {
            user: u,
            item: i,
            rating: 3.0 * a[u] * b[i],
        })
        .collect();
    let data = InteractionSet::new(n, m, triples).unwrap();
    let out = mf_pretrain(&data, 1, 300, 0.01, 0.0, 8).unwrap();
    let rmse = *out.rmse.last().unwrap();
    let elapsed = started.elapsed();
    verdict(
        rmse < 0.05 && elapsed < Duration::from_secs(30),
        format!("train RMSE {rmse:.5} in {:.2}s", elapsed.as_secs_f64()),
    )
}

// 9 -------------------------------------------------------------------------

fn bpr_arithmetic() -> Verdict {
    let at_zero = bpr_loss(0.0, 0.0);
    let zero_ok = (at_zero - std::f64::consts::LN_2).abs() < 1e-12;
    let grid: Vec<f64> = (0..100)
        .map(|i| bpr_loss(-10.0 + 20.0 * i as f64 / 99.0, 0.0))
        .collect();
    let monotone = grid.windows(2).all(|w| w[1] < w[0]);
    verdict(
        zero_ok && monotone,
        format!(
            "loss(0) - ln2 = {:.1e}; strictly decreasing over 100 margins: {monotone}",
            at_zero - std::f64::consts::LN_2
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        println!(
            "{} criterion {id} ({name}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "attention invariants", attention_invariants());
    report(3, "metric oracle", metric_oracle());
    let (runs, elapsed) = ordering_runs();
    report(4, "model ordering", model_ordering(&runs, elapsed));
    report(5, "pretraining direction", pretraining_direction());
    report(6, "attention diagnosis", attention_diagnosis(&runs));
    report(7, "determinism", determinism());
    report(8, "mf sanity", mf_sanity());
    report(9, "bpr arithmetic", bpr_arithmetic());
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(id, _, _)| *id)
        .collect();
    println!(
        "{} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
