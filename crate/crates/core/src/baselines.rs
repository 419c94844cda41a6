//! Comparison models sharing the training loop and the evaluation harness:
//! plain BPR matrix factorization and the attention-free ablation.

use crate::data::{DatasetSplit, FriendContext, SocialGraph};
use crate::error::Result;
use crate::eval::Recommender;
use crate::model::{AttentionMode, LatentFactors, NasModel};
use crate::nn::{adam_step_rows, axpy, dot, AdamState};
use crate::train::{
    bpr_loss, bpr_loss_grad, check_factors, fit, init_nas, mf_pretrain, Learner, TrainConfig,
    TrainOutcome, TrainTriple,
};

use std::collections::BTreeMap;

/// `score(u, i) = u_u · v_i`; friends are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct BprMfModel {
    pub factors: LatentFactors,
}

impl BprMfModel {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.factors.users.row(user), self.factors.items.row(item))
    }
}

/// Regularized BPR loss of one triple and its gradients w.r.t. `u`, `v+`, `v-`.
pub fn bpr_mf_triple(u: &[f64], v_pos: &[f64], v_neg: &[f64], reg: f64) -> (f64, [Vec<f64>; 3]) {
    let (sp, sn) = (dot(u, v_pos), dot(u, v_neg));
    let norm2 = |x: &[f64]| dot(x, x);
    let loss = bpr_loss(sp, sn) + reg * (norm2(u) + norm2(v_pos) + norm2(v_neg));
    let g = bpr_loss_grad(sp, sn);
    let mut du: Vec<f64> = u.iter().map(|x| 2.0 * reg * x).collect();
    axpy(g, v_pos, &mut du);
    axpy(-g, v_neg, &mut du);
    let mut dp: Vec<f64> = v_pos.iter().map(|x| 2.0 * reg * x).collect();
    axpy(g, u, &mut dp);
    let mut dn: Vec<f64> = v_neg.iter().map(|x| 2.0 * reg * x).collect();
    axpy(-g, u, &mut dn);
    (loss, [du, dp, dn])
}

impl Recommender for BprMfModel {
    fn n_users(&self) -> usize {
        self.factors.n_users()
    }

    fn n_items(&self) -> usize {
        self.factors.n_items()
    }

    fn k_max(&self) -> usize {
        0
    }

    fn score_all(&self, user: usize, _friends: &[usize]) -> Vec<f64> {
        self.factors.items.matvec(self.factors.users.row(user))
    }
}

pub struct BprMfOptimizer {
    users: AdamState,
    items: AdamState,
}

impl Learner for BprMfModel {
    type Optimizer = BprMfOptimizer;

    fn optimizer(&self) -> BprMfOptimizer {
        BprMfOptimizer {
            users: AdamState::new(self.factors.users.as_slice().len()),
            items: AdamState::new(self.factors.items.as_slice().len()),
        }
    }

    fn step(
        &mut self,
        batch: &[TrainTriple],
        _friends: &[FriendContext],
        opt: &mut BprMfOptimizer,
        config: &TrainConfig,
    ) -> Result<f64> {
        let d = self.factors.d();
        let mut users: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for t in batch {
            let (l, [du, dp, dn]) = bpr_mf_triple(
                self.factors.users.row(t.user),
                self.factors.items.row(t.pos_item),
                self.factors.items.row(t.neg_item),
                config.bpr_reg,
            );
            loss += l;
            axpy(
                scale,
                &du,
                users.entry(t.user).or_insert_with(|| vec![0.0; d]),
            );
            axpy(
                scale,
                &dp,
                items.entry(t.pos_item).or_insert_with(|| vec![0.0; d]),
            );
            axpy(
                scale,
                &dn,
                items.entry(t.neg_item).or_insert_with(|| vec![0.0; d]),
            );
        }
        let rows = users.iter().map(|(&r, g)| (r, g.as_slice()));
        adam_step_rows(
            "users",
            self.factors.users.as_mut_slice(),
            d,
            rows,
            &mut opt.users,
            config.lr,
        )?;
        let rows = items.iter().map(|(&r, g)| (r, g.as_slice()));
        adam_step_rows(
            "items",
            self.factors.items.as_mut_slice(),
            d,
            rows,
            &mut opt.items,
            config.lr,
        )?;
        Ok(loss)
    }

    fn tag(&self) -> &'static str {
        "bpr_mf"
    }
}

/// BPR-MF trained from the given factors.
pub fn train_bpr_mf_from(
    config: &TrainConfig,
    split: &DatasetSplit,
    factors: LatentFactors,
) -> Result<TrainOutcome<BprMfModel>> {
    config.validate()?;
    check_factors(config, split, &factors)?;
    let graph = SocialGraph::empty(split.train.n_users());
    fit(BprMfModel { factors }, config, split, &graph)
}

/// BPR-MF starting from the same matrix-factorization pretraining as the
/// social models.
pub fn train_bpr_mf(
    config: &TrainConfig,
    split: &DatasetSplit,
) -> Result<TrainOutcome<BprMfModel>> {
    config.validate()?;
    let mf = mf_pretrain(
        &split.train,
        config.d,
        config.mf_epochs,
        config.mf_lr,
        config.mf_reg,
        config.seed,
    )?;
    train_bpr_mf_from(config, split, mf.factors)
}

/// The ablation without attention: every friend weight is 1 (`mean = false`)
/// or 1/k (`mean = true`), and no attention parameters exist.
pub fn build_nas_star(
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &SocialGraph,
    factors: LatentFactors,
    mean: bool,
) -> Result<TrainOutcome<NasModel>> {
    config.validate()?;
    check_factors(config, split, &factors)?;
    let mode = if mean {
        AttentionMode::Mean
    } else {
        AttentionMode::Unit
    };
    fit(init_nas(config, factors, mode), config, split, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    #[test]
    fn triple_gradient_matches_finite_differences() {
        let u = vec![0.3, -0.7, 1.1];
        let p = vec![0.5, 0.2, -0.4];
        let n = vec![-0.1, 0.9, 0.6];
        let reg = 0.05;
        let (_, [du, dp, dn]) = bpr_mf_triple(&u, &p, &n, reg);
        let theta: Vec<f64> = u.iter().chain(&p).chain(&n).copied().collect();
        let analytic: Vec<f64> = du.iter().chain(&dp).chain(&dn).copied().collect();
        let loss = |t: &[f64]| bpr_mf_triple(&t[0..3], &t[3..6], &t[6..9], reg).0;
        assert!(grad_check(loss, &theta, &analytic, 1e-5) < 1e-6);
    }
}
