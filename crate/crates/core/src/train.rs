//! Matrix-factorization pretraining, BPR loss, negative sampling and the
//! mini-batch Adam loop shared by every ranking model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    binarize_relevance, friend_context, DatasetSplit, FriendContext, InteractionSet, SocialGraph,
};
use crate::error::{NasError, Result};
use crate::eval::{evaluate, Recommender};
use crate::model::{AttentionMode, Dense, LatentFactors, NasGradients, NasModel, NasParameters};
use crate::nn::{adam_step, adam_step_rows, axpy, dot, sigmoid, softplus, AdamState, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    pub h: usize,
    pub k_max: usize,
    /// Negatives drawn per observed item.
    pub neg_per_pos: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epochs of the one-hidden-layer phase before deepening; defaults to `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub seed: u64,
    pub mf_epochs: usize,
    pub mf_lr: f64,
    pub mf_reg: f64,
    /// L2 weight of the BPR-MF baseline.
    pub bpr_reg: f64,
    pub finetune_embeddings: bool,
    /// Cutoff of the validation metrics tracked per epoch.
    pub eval_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 50,
            h: 3,
            k_max: 30,
            neg_per_pos: 9,
            batch_size: 512,
            lr: 1e-4,
            epochs: 20,
            pretrain_epochs: None,
            seed: 0,
            mf_epochs: 30,
            mf_lr: 0.01,
            mf_reg: 0.01,
            bpr_reg: 0.01,
            finetune_embeddings: true,
            eval_n: 10,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("d", self.d),
            ("h", self.h),
            ("k_max", self.k_max),
            ("neg_per_pos", self.neg_per_pos),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("mf_epochs", self.mf_epochs),
            ("eval_n", self.eval_n),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("{name} must be at least 1"));
            }
        }
        if self.pretrain_epochs == Some(0) {
            out.push("pretrain_epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!(
                "lr must be a finite non-negative number (got {})",
                self.lr
            ));
        }
        if !(self.mf_lr > 0.0 && self.mf_lr.is_finite()) {
            out.push(format!("mf_lr must be positive (got {})", self.mf_lr));
        }
        for (name, v) in [("mf_reg", self.mf_reg), ("bpr_reg", self.bpr_reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be non-negative (got {v})"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NasError::Config(problems.join("; ")))
        }
    }
}

/// Independent RNG stream `stream` of the run seeded with `seed`.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const MF_INIT: u64 = 1;
    pub const MF_ORDER: u64 = 2;
    pub const PARAM_INIT: u64 = 3;
    pub const TRIPLES: u64 = 4;
    pub const DEEPEN: u64 = 5;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfOutcome {
    pub factors: LatentFactors,
    /// Train RMSE before training and after every epoch.
    pub rmse: Vec<f64>,
}

fn mf_rmse(train: &InteractionSet, users: &Matrix, items: &Matrix) -> f64 {
    let sse: f64 = train
        .iter()
        .map(|t| {
            let e = t.rating - dot(users.row(t.user), items.row(t.item));
            e * e
        })
        .sum();
    (sse / train.len() as f64).sqrt()
}

/// SGD on `sum (r_ui - u_u·v_i)^2 + reg (|u_u|^2 + |v_i|^2)` over the
/// observed ratings.
///
/// Factors start uniform in `[0, 2s]` with `s = sqrt(mean_rating / d)`, so the
/// initial inner products already sit at the mean rating.
pub fn mf_pretrain(
    train: &InteractionSet,
    d: usize,
    epochs: usize,
    lr: f64,
    reg: f64,
    seed: u64,
) -> Result<MfOutcome> {
    if train.is_empty() {
        return Err(NasError::Data(
            "matrix factorization needs at least one rating".into(),
        ));
    }
    let mean = train.iter().map(|t| t.rating).sum::<f64>() / train.len() as f64;
    let scale = (mean.abs() / d as f64).sqrt().max(1e-3);
    let mut rng = rng_stream(seed, streams::MF_INIT);
    let mut init = |rows: usize| {
        let data = (0..rows * d)
            .map(|_| rng.gen_range(0.0..2.0 * scale))
            .collect();
        Matrix::from_vec(rows, d, data)
    };
    let mut users = init(train.n_users());
    let mut items = init(train.n_items());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = rng_stream(seed, streams::MF_ORDER);
    let triples = train.triples();
    let initial = mf_rmse(train, &users, &items);
    let mut rmse = vec![initial];
    let mut u_old = vec![0.0; d];
    for epoch in 0..epochs {
        order.shuffle(&mut order_rng);
        for &idx in &order {
            let t = triples[idx];
            let err = t.rating - dot(users.row(t.user), items.row(t.item));
            u_old.copy_from_slice(users.row(t.user));
            {
                let u = users.row_mut(t.user);
                let v = items.row(t.item);
                for c in 0..d {
                    u[c] += lr * (err * v[c] - reg * u[c]);
                }
            }
            let v = items.row_mut(t.item);
            for c in 0..d {
                v[c] += lr * (err * u_old[c] - reg * v[c]);
            }
        }
        let r = mf_rmse(train, &users, &items);
        debug!("mf epoch {} rmse {r:.6}", epoch + 1);
        if !r.is_finite() || r > 10.0 * initial.max(1e-12) {
            return Err(NasError::Training(format!(
                "matrix factorization diverged at epoch {} (rmse {r} vs initial {initial}); use a smaller mf_lr",
                epoch + 1
            )));
        }
        rmse.push(r);
    }
    info!(
        "mf pretraining: rmse {:.4} -> {:.4} over {epochs} epochs",
        initial,
        rmse.last().unwrap()
    );
    Ok(MfOutcome {
        factors: LatentFactors::new(users, items),
        rmse,
    })
}

/// `-log sigmoid(pos - neg)`, evaluated as `log(1 + exp(-(pos - neg)))`.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus(score_neg - score_pos)
}

/// Derivative of [`bpr_loss`] w.r.t. the margin `pos - neg`.
pub fn bpr_loss_grad(score_pos: f64, score_neg: f64) -> f64 {
    -sigmoid(score_neg - score_pos)
}

/// `count` uniform draws from the items outside the sorted `positives`, by
/// rejection. `None` when the user has rated every item.
pub fn sample_negatives<R: Rng + ?Sized>(
    positives: &[usize],
    count: usize,
    n_items: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    if positives.len() >= n_items {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cand = rng.gen_range(0..n_items);
        if positives.binary_search(&cand).is_err() {
            out.push(cand);
        }
    }
    Some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTriple {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// One shuffled epoch of triples: every train rating paired with
/// `neg_per_pos` fresh negatives.
pub fn epoch_triples<R: Rng + ?Sized>(
    train: &InteractionSet,
    item_sets: &[Vec<usize>],
    neg_per_pos: usize,
    rng: &mut R,
) -> Vec<TrainTriple> {
    let mut out = Vec::with_capacity(train.len() * neg_per_pos);
    let mut warned = vec![false; train.n_users()];
    for t in train.iter() {
        match sample_negatives(&item_sets[t.user], neg_per_pos, train.n_items(), rng) {
            Some(negs) => out.extend(negs.into_iter().map(|neg_item| TrainTriple {
                user: t.user,
                pos_item: t.item,
                neg_item,
            })),
            None if !warned[t.user] => {
                warn!("user {} has rated every item; skipped", t.user);
                warned[t.user] = true;
            }
            None => {}
        }
    }
    out.shuffle(rng);
    out
}

/// Models trained by the shared loop.
pub(crate) trait Learner: Recommender + Clone + Send {
    type Optimizer;

    fn optimizer(&self) -> Self::Optimizer;

    /// Mean-gradient Adam step over one batch. Returns the summed loss.
    fn step(
        &mut self,
        batch: &[TrainTriple],
        friends: &[FriendContext],
        opt: &mut Self::Optimizer,
        config: &TrainConfig,
    ) -> Result<f64>;

    fn tag(&self) -> &'static str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub seconds: f64,
}

/// `epoch,mean_loss,val_recall@N,val_ndcg@N,seconds`
pub fn epoch_log_csv(log: &[EpochLog], n: usize) -> String {
    let mut out = format!("epoch,mean_loss,val_recall@{n},val_ndcg@{n},seconds\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3}",
            e.epoch,
            e.mean_loss,
            opt(e.val_recall),
            opt(e.val_ndcg),
            e.seconds
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Snapshot with the best validation NDCG (the last epoch when
    /// validation is unavailable).
    pub best: M,
    pub last: M,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub(crate) fn friend_table(
    graph: &SocialGraph,
    n_users: usize,
    k_max: usize,
    seed: u64,
) -> Vec<FriendContext> {
    (0..n_users)
        .map(|u| {
            if u < graph.n_users() {
                friend_context(graph, u, k_max, seed)
            } else {
                FriendContext {
                    user: u,
                    friend_ids: Vec::new(),
                }
            }
        })
        .collect()
}

pub(crate) fn fit<L: Learner>(
    mut model: L,
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &SocialGraph,
) -> Result<TrainOutcome<L>> {
    config.validate()?;
    let train = &split.train;
    if train.is_empty() {
        return Err(NasError::Data("training partition is empty".into()));
    }
    let item_sets = train.item_sets();
    let val_labels = binarize_relevance(&split.validation);
    let has_validation = val_labels.relevant.iter().any(|r| !r.is_empty());
    let mut triple_rng = rng_stream(config.seed, streams::TRIPLES);
    let mut opt = model.optimizer();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, L)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let triples = epoch_triples(train, &item_sets, config.neg_per_pos, &mut triple_rng);
        let friend_seed = config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let friends = if model.k_max() == 0 {
            Vec::new()
        } else {
            friend_table(graph, model.n_users(), model.k_max(), friend_seed)
        };
        let mut loss_sum = 0.0;
        for (b, batch) in triples.chunks(config.batch_size).enumerate() {
            let loss = model.step(batch, &friends, &mut opt, config)?;
            if !loss.is_finite() {
                return Err(NasError::Training(format!(
                    "{}: non-finite loss in epoch {epoch}, batch {b} (triples {}..{})",
                    model.tag(),
                    b * config.batch_size,
                    b * config.batch_size + batch.len()
                )));
            }
            loss_sum += loss;
        }
        let mean_loss = loss_sum / triples.len().max(1) as f64;
        let (val_recall, val_ndcg) = if has_validation {
            let r = evaluate(
                &model,
                model.tag(),
                train,
                &val_labels,
                graph,
                config.eval_n,
                &[config.seed],
            )?;
            (Some(r.recall_mean), Some(r.ndcg_mean))
        } else {
            (None, None)
        };
        let seconds = started.elapsed().as_secs_f64();
        debug!(
            "{} epoch {epoch}: loss {mean_loss:.5} val ndcg {:?} ({seconds:.2}s)",
            model.tag(),
            val_ndcg
        );
        log.push(EpochLog {
            epoch,
            mean_loss,
            val_recall,
            val_ndcg,
            seconds,
        });
        let score = val_ndcg.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => !has_validation || score > *b,
        };
        if improved {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    info!("{}: best validation epoch {best_epoch}", model.tag());
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        log,
    })
}

pub struct NasOptimizer {
    blocks: Vec<AdamState>,
    users: AdamState,
    items: AdamState,
}

/// Loss and gradient of one batch for the attention model: summed loss and
/// summed (not yet averaged) gradients.
///
/// Triples are grouped by user so that each user's forward pass is shared by
/// all of their triples in the batch; groups run in parallel and are merged
/// in ascending user order, so the result does not depend on the thread
/// count.
pub fn nas_batch_gradient(
    model: &NasModel,
    batch: &[TrainTriple],
    friends: &[FriendContext],
) -> (f64, NasGradients) {
    let mut groups: BTreeMap<usize, Vec<&TrainTriple>> = BTreeMap::new();
    for t in batch {
        groups.entry(t.user).or_default().push(t);
    }
    let groups: Vec<(usize, Vec<&TrainTriple>)> = groups.into_iter().collect();
    let d = model.d();
    let parts: Vec<(f64, NasGradients)> = groups
        .par_iter()
        .map(|(user, triples)| {
            let ctx: &[usize] = friends.get(*user).map_or(&[], |c| &c.friend_ids);
            let pass = model.forward_user(*user, ctx);
            let z = pass.z();
            let mut grads = NasGradients::zeros(&model.params);
            let mut d_z = vec![0.0; d];
            let mut loss = 0.0;
            for t in triples {
                let v_pos = model.factors.items.row(t.pos_item);
                let v_neg = model.factors.items.row(t.neg_item);
                let (sp, sn) = (dot(z, v_pos), dot(z, v_neg));
                loss += bpr_loss(sp, sn);
                let g = bpr_loss_grad(sp, sn);
                axpy(g, v_pos, &mut d_z);
                axpy(-g, v_neg, &mut d_z);
                grads.add_item_row(t.pos_item, g, z);
                grads.add_item_row(t.neg_item, -g, z);
            }
            model.backward_user(&pass, &d_z, &mut grads);
            (loss, grads)
        })
        .collect();
    let mut total = NasGradients::zeros(&model.params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.merge(g);
    }
    (loss, total)
}

impl Recommender for NasModel {
    fn n_users(&self) -> usize {
        self.factors.n_users()
    }

    fn n_items(&self) -> usize {
        self.factors.n_items()
    }

    fn k_max(&self) -> usize {
        self.k_max
    }

    fn score_all(&self, user: usize, friends: &[usize]) -> Vec<f64> {
        NasModel::score_all(self, user, friends)
    }
}

impl Learner for NasModel {
    type Optimizer = NasOptimizer;

    fn optimizer(&self) -> NasOptimizer {
        NasOptimizer {
            blocks: self
                .params
                .blocks()
                .iter()
                .map(|(_, b)| AdamState::new(b.len()))
                .collect(),
            users: AdamState::new(self.factors.users.as_slice().len()),
            items: AdamState::new(self.factors.items.as_slice().len()),
        }
    }

    fn step(
        &mut self,
        batch: &[TrainTriple],
        friends: &[FriendContext],
        opt: &mut NasOptimizer,
        config: &TrainConfig,
    ) -> Result<f64> {
        let (loss, mut grads) = nas_batch_gradient(self, batch, friends);
        grads.scale(1.0 / batch.len() as f64);
        let lr = config.lr;
        for (((name, params), (_, g)), state) in self
            .params
            .blocks_mut()
            .into_iter()
            .zip(grads.params.blocks())
            .zip(opt.blocks.iter_mut())
        {
            adam_step(&name, params, g, state, lr)?;
        }
        if config.finetune_embeddings {
            let d = self.d();
            let rows = grads.users.iter().map(|(&r, g)| (r, g.as_slice()));
            adam_step_rows(
                "users",
                self.factors.users.as_mut_slice(),
                d,
                rows,
                &mut opt.users,
                lr,
            )?;
            let rows = grads.items.iter().map(|(&r, g)| (r, g.as_slice()));
            adam_step_rows(
                "items",
                self.factors.items.as_mut_slice(),
                d,
                rows,
                &mut opt.items,
                lr,
            )?;
        }
        Ok(loss)
    }

    fn tag(&self) -> &'static str {
        match self.mode {
            AttentionMode::Softmax => "nas",
            AttentionMode::Unit | AttentionMode::Mean => "nas_star",
        }
    }
}

/// Fresh network over the given factors, initialized from the config seed.
pub fn init_nas(config: &TrainConfig, factors: LatentFactors, mode: AttentionMode) -> NasModel {
    let mut rng = rng_stream(config.seed, streams::PARAM_INIT);
    let params = NasParameters::init(
        factors.d(),
        config.h,
        mode == AttentionMode::Softmax,
        &mut rng,
    );
    NasModel::new(factors, params, mode, config.k_max)
}

/// Trains an already-built model with the shared loop.
pub fn train_model(
    model: NasModel,
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &SocialGraph,
) -> Result<TrainOutcome<NasModel>> {
    fit(model, config, split, graph)
}

/// Random-init attention model on top of `factors`, trained with BPR.
pub fn train(
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &SocialGraph,
    factors: LatentFactors,
) -> Result<TrainOutcome<NasModel>> {
    config.validate()?;
    check_factors(config, split, &factors)?;
    fit(
        init_nas(config, factors, AttentionMode::Softmax),
        config,
        split,
        graph,
    )
}

pub(crate) fn check_factors(
    config: &TrainConfig,
    split: &DatasetSplit,
    factors: &LatentFactors,
) -> Result<()> {
    if factors.d() != config.d
        || factors.n_users() != split.train.n_users()
        || factors.n_items() != split.train.n_items()
    {
        return Err(NasError::Config(format!(
            "factors are {}x{} (users) / {}x{} (items) but the config and data need d={} with {} users and {} items",
            factors.n_users(),
            factors.d(),
            factors.n_items(),
            factors.d(),
            config.d,
            split.train.n_users(),
            split.train.n_items()
        )));
    }
    Ok(())
}

/// Builds an `h`-layer model from a one-layer one: the first hidden layer of
/// both MLPs and every depth-independent block are copied, the extra hidden
/// layers are freshly initialized.
pub fn deepen<R: Rng + ?Sized>(shallow: &NasModel, h: usize, rng: &mut R) -> NasModel {
    assert!(h >= shallow.h(), "deepen cannot remove layers");
    let d = shallow.d();
    let fresh = NasParameters::init(d, h, false, rng);
    let extend = |copied: &[Dense], fresh: &[Dense]| -> Vec<Dense> {
        copied
            .iter()
            .cloned()
            .chain(fresh[copied.len()..].iter().cloned())
            .collect()
    };
    let s = &shallow.params;
    let params = NasParameters {
        d,
        effects_embed: s.effects_embed.clone(),
        effects_hidden: extend(&s.effects_hidden, &fresh.effects_hidden),
        effects_out: s.effects_out.clone(),
        attention: s.attention.clone(),
        extraction_embed: s.extraction_embed.clone(),
        extraction_hidden: extend(&s.extraction_hidden, &fresh.extraction_hidden),
    };
    NasModel::new(shallow.factors.clone(), params, shallow.mode, shallow.k_max)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Present when `h >= 2`.
    pub shallow: Option<TrainOutcome<NasModel>>,
    pub deep: TrainOutcome<NasModel>,
}

/// Trains a one-hidden-layer model first, then deepens it to `config.h`
/// layers and trains again. With `h = 1` this is plain [`train`].
pub fn pretrain_shallow_then_deepen(
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &SocialGraph,
    factors: LatentFactors,
    mode: AttentionMode,
) -> Result<PretrainOutcome> {
    config.validate()?;
    check_factors(config, split, &factors)?;
    if config.h == 1 {
        let deep = fit(init_nas(config, factors, mode), config, split, graph)?;
        return Ok(PretrainOutcome {
            shallow: None,
            deep,
        });
    }
    let phase1 = TrainConfig {
        h: 1,
        epochs: config.pretrain_epochs.unwrap_or(config.epochs),
        ..config.clone()
    };
    let shallow = fit(init_nas(&phase1, factors, mode), &phase1, split, graph)?;
    let mut rng = rng_stream(config.seed, streams::DEEPEN);
    let start = deepen(&shallow.best, config.h, &mut rng);
    let deep = fit(start, config, split, graph)?;
    Ok(PretrainOutcome {
        shallow: Some(shallow),
        deep,
    })
}
