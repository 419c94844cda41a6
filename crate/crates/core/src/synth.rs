//! Planted-influence synthetic datasets.
//!
//! Every user has an own taste vector. A designated subset of each user's
//! friends is influential, and the user's effective preference is
//! `(1 - alpha) · own + alpha · mean(effective preference of influential friends)`,
//! solved by fixed-point iteration. Users rate the items they like most
//! (Gumbel top-k on preference scores) and the rating is a clipped,
//! rounded, noisy version of the score.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_interactions, write_social_graph, FileFormat, IdMap, Interaction, InteractionSet,
    SocialGraph,
};
use crate::error::{NasError, Result};
use crate::model::NasModel;
use crate::nn::{dot, Matrix};
use crate::train::rng_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub d_true: usize,
    pub friends_per_user: usize,
    pub influential_per_user: usize,
    /// Weight of the influential friends in a user's preference, in `[0, 1]`.
    pub alpha: f64,
    /// Standard deviation of the rating noise, in rating units.
    pub noise: f64,
    /// Ratings of the most active users.
    pub ratings_per_user: usize,
    /// Ratings of the least active users. Activity is log-uniform between
    /// this and `ratings_per_user`; `None` gives every user the same count.
    pub min_ratings_per_user: Option<usize>,
    /// Softness of the choice of which items get rated; lower is greedier.
    pub temperature: f64,
    /// Rating before noise is `rating_offset + rating_scale · p_u · v_i`.
    pub rating_offset: f64,
    /// Friendships without influence only join users whose own tastes have
    /// at most this cosine similarity; `None` leaves them unconstrained.
    pub acquaintance_max_cosine: Option<f64>,
    pub rating_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 300,
            m: 500,
            d_true: 8,
            friends_per_user: 10,
            influential_per_user: 5,
            alpha: 0.8,
            noise: 0.3,
            ratings_per_user: 20,
            min_ratings_per_user: None,
            temperature: 0.5,
            rating_offset: 1.0,
            acquaintance_max_cosine: None,
            rating_scale: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n", self.n),
            ("m", self.m),
            ("d_true", self.d_true),
            ("friends_per_user", self.friends_per_user),
            ("ratings_per_user", self.ratings_per_user),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.friends_per_user >= self.n.max(1) {
            problems.push("friends_per_user must be below n".into());
        }
        if self.influential_per_user > self.friends_per_user {
            problems.push("influential_per_user cannot exceed friends_per_user".into());
        }
        if let Some(lo) = self.min_ratings_per_user {
            if lo == 0 || lo > self.ratings_per_user {
                problems.push("min_ratings_per_user must lie in [1, ratings_per_user]".into());
            }
        }
        if self.ratings_per_user > self.m {
            problems.push("ratings_per_user cannot exceed m".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must lie in [0, 1] (got {})", self.alpha));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push("noise must be non-negative".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push("temperature must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NasError::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub ratings: InteractionSet,
    pub graph: SocialGraph,
    /// Ground-truth influential friends per user, sorted.
    pub influencers: Vec<Vec<usize>>,
    /// Unit-norm effective preferences, one row per user.
    pub preferences: Matrix,
    pub items: Matrix,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

type EdgeKey = (usize, usize);

fn edge_key(a: usize, b: usize) -> EdgeKey {
    (a.min(b), a.max(b))
}

/// Random `degree`-regular simple graph restricted to `allowed` edges:
/// configuration-model pairing followed by degree-preserving swaps that
/// remove self-loops, repeated edges and disallowed edges. Edges that cannot
/// be repaired are dropped.
fn regular_graph<R: Rng + ?Sized>(
    n: usize,
    degree: usize,
    allowed: &dyn Fn(EdgeKey) -> bool,
    rng: &mut R,
) -> Vec<EdgeKey> {
    let mut stubs: Vec<usize> = (0..n)
        .flat_map(|u| std::iter::repeat_n(u, degree))
        .collect();
    stubs.shuffle(rng);
    let mut edges: Vec<EdgeKey> = stubs
        .chunks_exact(2)
        .map(|c| edge_key(c[0], c[1]))
        .collect();
    let mut counts: HashMap<EdgeKey, usize> = HashMap::new();
    for &e in &edges {
        *counts.entry(e).or_insert(0) += 1;
    }
    let usable = |e: EdgeKey| e.0 != e.1 && allowed(e);
    let mut bad: Vec<usize> = (0..edges.len())
        .filter(|&i| !usable(edges[i]) || counts[&edges[i]] > 1)
        .collect();
    let mut attempts = 0;
    while let Some(&i) = bad.last() {
        if !usable(edges[i]) || counts[&edges[i]] > 1 {
            attempts += 1;
            if attempts > 100 * edges.len().max(1) {
                break;
            }
            let j = rng.gen_range(0..edges.len());
            let ((a, b), (c, d)) = (edges[i], edges[j]);
            let (x, y) = if rng.gen::<bool>() {
                (edge_key(a, c), edge_key(b, d))
            } else {
                (edge_key(a, d), edge_key(b, c))
            };
            let free = |e: EdgeKey| usable(e) && counts.get(&e).copied().unwrap_or(0) == 0;
            if i == j || x == y || !free(x) || !free(y) {
                continue;
            }
            for e in [edges[i], edges[j]] {
                *counts.get_mut(&e).expect("counted") -= 1;
            }
            for e in [x, y] {
                *counts.entry(e).or_insert(0) += 1;
            }
            edges[i] = x;
            edges[j] = y;
        }
        bad.pop();
    }
    let mut seen = HashSet::new();
    edges
        .into_iter()
        .filter(|&e| usable(e) && seen.insert(e))
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, 0);
    let (n, m, d) = (spec.n, spec.m, spec.d_true);

    let own = gaussian_matrix(n, d, &mut rng);
    let items = gaussian_matrix(m, d, &mut rng);
    // Influence ties are mutual; the remaining friendships carry no influence.
    let influence = regular_graph(n, spec.influential_per_user, &|_| true, &mut rng);
    let influence_set: HashSet<EdgeKey> = influence.iter().copied().collect();
    let cosine = |a: usize, b: usize| {
        let (x, y) = (own.row(a), own.row(b));
        dot(x, y) / (dot(x, x) * dot(y, y)).sqrt().max(f64::MIN_POSITIVE)
    };
    let max_cos = spec.acquaintance_max_cosine.unwrap_or(f64::INFINITY);
    let plain = regular_graph(
        n,
        spec.friends_per_user - spec.influential_per_user,
        &|e| !influence_set.contains(&e) && cosine(e.0, e.1) <= max_cos,
        &mut rng,
    );
    let influence_graph = SocialGraph::from_edges(n, influence.iter().copied())?;
    let influencers: Vec<Vec<usize>> = (0..n)
        .map(|u| influence_graph.neighbors(u).to_vec())
        .collect();
    let graph = SocialGraph::from_edges(n, influence.into_iter().chain(plain))?;

    // p = (1 - alpha) own + alpha · mean_{f in I(u)} p_f
    let mut prefs = own.clone();
    for _ in 0..500 {
        let mut next = Matrix::zeros(n, d);
        let mut delta = 0.0f64;
        for u in 0..n {
            let row = next.row_mut(u);
            let inf = &influencers[u];
            if inf.is_empty() {
                row.copy_from_slice(own.row(u));
            } else {
                let w = spec.alpha / inf.len() as f64;
                for c in 0..d {
                    let social: f64 = inf.iter().map(|&f| prefs.get(f, c)).sum();
                    row[c] = (1.0 - spec.alpha) * own.get(u, c) + w * social;
                }
            }
            for c in 0..d {
                delta = delta.max((row[c] - prefs.get(u, c)).abs());
            }
        }
        prefs = next;
        if delta < 1e-12 {
            break;
        }
    }
    for u in 0..n {
        let row = prefs.row_mut(u);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }

    let mut triples = Vec::with_capacity(n * spec.ratings_per_user);
    for u in 0..n {
        let scores = items.matvec(prefs.row(u));
        // Gumbel top-k samples k items without replacement with
        // probabilities proportional to exp(score / temperature).
        let mut keyed: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let g: f64 = -(-rng.gen::<f64>().max(1e-300).ln()).ln();
                (s / spec.temperature + g, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let count = match spec.min_ratings_per_user {
            Some(lo) if lo < spec.ratings_per_user => {
                let (a, b) = ((lo as f64).ln(), (spec.ratings_per_user as f64 + 1.0).ln());
                (rng.gen_range(a..b).exp().floor() as usize).clamp(lo, spec.ratings_per_user)
            }
            _ => spec.ratings_per_user,
        };
        for &(_, item) in keyed.iter().take(count) {
            let noisy = spec.rating_offset
                + spec.rating_scale * scores[item]
                + spec.noise * rng.sample::<f64, _>(StandardNormal);
            let rating = noisy.round().clamp(1.0, 5.0);
            triples.push(Interaction {
                user: u,
                item,
                rating,
            });
        }
    }
    let ratings = InteractionSet::new(n, m, triples)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        ratings,
        graph,
        influencers,
        preferences: prefs,
        items,
    })
}

impl SyntheticDataset {
    /// Writes `ratings.tsv`, `graph.tsv`, `influencers.tsv` and `spec.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NasError::io(dir, e))?;
        let users = IdMap::sequential(self.spec.n);
        let items = IdMap::sequential(self.spec.m);
        write_interactions(
            &dir.join("ratings.tsv"),
            &self.ratings,
            &users,
            &items,
            FileFormat::Tsv,
        )?;
        write_social_graph(&dir.join("graph.tsv"), &self.graph, &users, FileFormat::Tsv)?;
        let path = dir.join("influencers.tsv");
        let file = fs::File::create(&path).map_err(|e| NasError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (u, inf) in self.influencers.iter().enumerate() {
            for f in inf {
                writeln!(w, "{u}\t{f}").map_err(|e| NasError::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| NasError::io(&path, e))?;
        let path = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&path, json).map_err(|e| NasError::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    /// Mean over users of the average weight on influential friends.
    pub influential: f64,
    /// Mean over users of the average weight on the other friends.
    pub other: f64,
    /// Users with friends in both groups.
    pub users: usize,
}

/// Compares the trained attention weights on ground-truth influential
/// friends against the remaining friends. Uses the full neighbor list of
/// every user.
pub fn attention_diagnostics(
    model: &NasModel,
    graph: &SocialGraph,
    influencers: &[Vec<usize>],
) -> AttentionDiagnostics {
    let mut inf_sum = 0.0;
    let mut other_sum = 0.0;
    let mut users = 0;
    for (u, inf) in influencers.iter().enumerate() {
        let friends = graph.neighbors(u);
        let pass = model.forward_user(u, friends);
        let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (f, w) in friends.iter().zip(&pass.weights) {
            if inf.binary_search(f).is_ok() {
                a += w;
                na += 1;
            } else {
                b += w;
                nb += 1;
            }
        }
        if na > 0 && nb > 0 {
            inf_sum += a / na as f64;
            other_sum += b / nb as f64;
            users += 1;
        }
    }
    let denom = users.max(1) as f64;
    AttentionDiagnostics {
        influential: inf_sum / denom,
        other: other_sum / denom,
        users,
    }
}
