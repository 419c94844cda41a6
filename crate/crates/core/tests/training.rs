mod common;

use common::random_model;
use nas_rec::data::{split, FriendContext, Interaction, InteractionSet};
use nas_rec::model::{AttentionMode, NasGradients};
use nas_rec::nn::Matrix;
use nas_rec::synth::{generate, SyntheticDataset, SyntheticSpec};
use nas_rec::train::{
    bpr_loss, bpr_loss_grad, deepen, epoch_triples, init_nas, mf_pretrain, nas_batch_gradient,
    sample_negatives, train_model, TrainConfig, TrainTriple,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_data(seed: u64) -> SyntheticDataset {
    generate(&SyntheticSpec {
        n: 60,
        m: 90,
        ratings_per_user: 15,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 6,
        h: 1,
        k_max: 10,
        neg_per_pos: 3,
        batch_size: 64,
        lr: 1e-3,
        epochs: 10,
        seed,
        mf_epochs: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let data = small_data(1);
    let s = split(&data.ratings, 0.7, 0.1, 1).unwrap();
    let config = TrainConfig {
        lr: 0.0,
        epochs: 2,
        ..small_config(1)
    };
    let mf = mf_pretrain(
        &s.train,
        config.d,
        config.mf_epochs,
        config.mf_lr,
        config.mf_reg,
        1,
    )
    .unwrap();
    let start = init_nas(&config, mf.factors, AttentionMode::Softmax);
    let out = train_model(start.clone(), &config, &s, &data.graph).unwrap();
    assert_eq!(out.last, start);
}

fn flat(g: &NasGradients, n_users: usize, n_items: usize, d: usize) -> Vec<f64> {
    let mut out = g.params.flatten();
    for (rows, n) in [(&g.users, n_users), (&g.items, n_items)] {
        let mut dense = vec![0.0; n * d];
        for (&r, v) in rows {
            dense[r * d..(r + 1) * d].copy_from_slice(v);
        }
        out.extend(dense);
    }
    out
}

#[test]
fn batch_gradient_is_the_sum_of_triple_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let d = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=4);
        let mut model = random_model(d, rng.gen_range(1..=2), k, AttentionMode::Softmax, &mut rng);
        model.factors.items = common::random_matrix(5, d, 1.0, &mut rng);
        // Users 0 and 1 with different friend lists.
        let friends = vec![
            FriendContext {
                user: 0,
                friend_ids: (1..=k).collect(),
            },
            FriendContext {
                user: 1,
                friend_ids: vec![0],
            },
        ];
        let batch: Vec<TrainTriple> = (0..rng.gen_range(1..=8))
            .map(|_| TrainTriple {
                user: rng.gen_range(0..2),
                pos_item: rng.gen_range(0..5),
                neg_item: rng.gen_range(0..5),
            })
            .collect();
        let (loss, grads) = nas_batch_gradient(&model, &batch, &friends);

        let mut expected_loss = 0.0;
        let mut expected = NasGradients::zeros(&model.params);
        for t in &batch {
            let (sp, sn, cache) = model.forward(t.user, t.pos_item, t.neg_item, &friends[t.user]);
            expected_loss += bpr_loss(sp, sn);
            let g = bpr_loss_grad(sp, sn);
            model.backward(&cache, g, -g, &mut expected);
        }
        let (nu, ni) = (model.factors.n_users(), model.factors.n_items());
        let a = flat(&grads, nu, ni, d);
        let b = flat(&expected, nu, ni, d);
        assert!(
            (loss - expected_loss).abs() < 1e-10 * (1.0 + loss.abs()),
            "trial {trial}"
        );
        for (x, y) in a.iter().zip(&b) {
            assert!(
                (x - y).abs() < 1e-10 * (1.0 + y.abs()),
                "trial {trial}: {x} vs {y}"
            );
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_data(2);
    let s = split(&data.ratings, 0.7, 0.1, 2).unwrap();
    let config = TrainConfig {
        epochs: 3,
        ..small_config(2)
    };
    let run = || {
        let mf = mf_pretrain(
            &s.train,
            config.d,
            config.mf_epochs,
            config.mf_lr,
            config.mf_reg,
            2,
        )
        .unwrap();
        let out = train_model(
            init_nas(&config, mf.factors, AttentionMode::Softmax),
            &config,
            &s,
            &data.graph,
        )
        .unwrap();
        let losses: Vec<u64> = out.log.iter().map(|e| e.mean_loss.to_bits()).collect();
        (out.last, out.best_epoch, losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_over_the_first_epochs() {
    let mut decreasing = 0;
    for seed in 0..5 {
        let data = generate(&SyntheticSpec {
            n: 200,
            m: 150,
            ratings_per_user: 20,
            seed: 10 + seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = split(&data.ratings, 0.7, 0.1, seed).unwrap();
        let config = TrainConfig {
            neg_per_pos: 5,
            ..small_config(seed)
        };
        let mf = mf_pretrain(
            &s.train,
            config.d,
            config.mf_epochs,
            config.mf_lr,
            config.mf_reg,
            seed,
        )
        .unwrap();
        let out = train_model(
            init_nas(&config, mf.factors, AttentionMode::Softmax),
            &config,
            &s,
            &data.graph,
        )
        .unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.mean_loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(
        decreasing >= 4,
        "only {decreasing} of 5 seeds decreased monotonically"
    );
}

#[test]
fn negatives_are_uniform_over_unrated_items() {
    let positives = [3, 7, 11];
    let n_items = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = sample_negatives(&positives, 100_000, n_items, &mut rng).unwrap();
    let mut counts = vec![0usize; n_items];
    for i in draws {
        counts[i] += 1;
    }
    assert!(positives.iter().all(|&p| counts[p] == 0));
    let cells = n_items - positives.len();
    let expected = 100_000.0 / cells as f64;
    let chi2: f64 = (0..n_items)
        .filter(|i| !positives.contains(i))
        .map(|i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((cells - 1) as f64)
        .unwrap()
        .inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn epoch_triples_pair_every_rating_with_fresh_negatives() {
    let data = small_data(3);
    let sets = data.ratings.item_sets();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let triples = epoch_triples(&data.ratings, &sets, 4, &mut rng);
    assert_eq!(triples.len(), 4 * data.ratings.len());
    for t in &triples {
        assert!(sets[t.user].binary_search(&t.pos_item).is_ok());
        assert!(sets[t.user].binary_search(&t.neg_item).is_err());
    }
}

#[test]
fn deepening_copies_the_shallow_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shallow = random_model(5, 1, 3, AttentionMode::Softmax, &mut rng);
    let deep = deepen(&shallow, 3, &mut rng);
    assert_eq!(deep.h(), 3);
    let (s, p) = (&shallow.params, &deep.params);
    assert_eq!(p.effects_embed, s.effects_embed);
    assert_eq!(p.effects_out, s.effects_out);
    assert_eq!(p.attention, s.attention);
    assert_eq!(p.extraction_embed, s.extraction_embed);
    assert_eq!(p.effects_hidden[0], s.effects_hidden[0]);
    assert_eq!(p.extraction_hidden[0], s.extraction_hidden[0]);
    assert_ne!(p.effects_hidden[1], p.effects_hidden[2]);
    assert_eq!(deep.factors, shallow.factors);
}

#[test]
fn deepened_model_starts_below_random_init() {
    let mut wins = 0;
    for seed in 0..5 {
        let data = small_data(20 + seed);
        let s = split(&data.ratings, 0.7, 0.1, seed).unwrap();
        let shallow_cfg = small_config(seed);
        let deep_cfg = TrainConfig {
            h: 3,
            ..shallow_cfg.clone()
        };
        let mf = mf_pretrain(&s.train, 6, 20, 0.01, 0.01, seed).unwrap();
        let shallow = train_model(
            init_nas(&shallow_cfg, mf.factors.clone(), AttentionMode::Softmax),
            &shallow_cfg,
            &s,
            &data.graph,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let warm = deepen(&shallow.best, 3, &mut rng);
        let cold = init_nas(&deep_cfg, mf.factors, AttentionMode::Softmax);

        let mut triples = epoch_triples(&s.train, &s.train.item_sets(), 3, &mut rng);
        triples.shuffle(&mut rng);
        let batch = &triples[..512.min(triples.len())];
        let friends: Vec<FriendContext> = (0..s.train.n_users())
            .map(|u| nas_rec::data::friend_context(&data.graph, u, deep_cfg.k_max, seed))
            .collect();
        let (warm_loss, _) = nas_batch_gradient(&warm, batch, &friends);
        let (cold_loss, _) = nas_batch_gradient(&cold, batch, &friends);
        if warm_loss <= cold_loss {
            wins += 1;
        }
    }
    assert!(
        wins >= 3,
        "deepened start was better in only {wins} of 5 seeds"
    );
}

#[test]
fn rank_one_matrix_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<f64> = (0..20).map(|_| rng.gen_range(1.0..2.0)).collect();
    let b: Vec<f64> = (0..20).map(|_| rng.gen_range(1.0..2.0)).collect();
    let triples = (0..20)
        .flat_map(|u| (0..20).map(move |i| (u, i)))
        .map(|(user, item)| Interaction {
            user,
            item,
            rating: a[user] * b[item],
        })
        .collect();
    let data = InteractionSet::new(20, 20, triples).unwrap();
    let out = mf_pretrain(&data, 1, 200, 0.01, 0.0, 0).unwrap();
    let rmse = *out.rmse.last().unwrap();
    assert!(rmse < 0.05, "rmse {rmse}");
    assert!(out.rmse[0] > rmse);
}

#[test]
fn invalid_configs_list_every_problem() {
    let bad = TrainConfig {
        d: 0,
        lr: f64::NAN,
        bpr_reg: -1.0,
        ..TrainConfig::default()
    };
    assert_eq!(bad.problems().len(), 3);
    let ok = Matrix::zeros(1, 1);
    assert_eq!(ok.shape(), (1, 1));
}
