//! Rating and friendship ingestion, id remapping, train/validation/test
//! splitting, relevance labels and per-user friend contexts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Sparse user-item ratings with dense 0-based ids.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    triples: Vec<Interaction>,
}

impl InteractionSet {
    pub fn new(n_users: usize, n_items: usize, triples: Vec<Interaction>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.user >= n_users || t.item >= n_items {
                return Err(NasError::Data(format!(
                    "interaction ({}, {}) out of range for {n_users} users x {n_items} items",
                    t.user, t.item
                )));
            }
            if !t.rating.is_finite() {
                return Err(NasError::Data(format!(
                    "non-finite rating for ({}, {})",
                    t.user, t.item
                )));
            }
            if !seen.insert((t.user, t.item)) {
                return Err(NasError::Data(format!(
                    "duplicate interaction ({}, {})",
                    t.user, t.item
                )));
            }
        }
        Ok(InteractionSet {
            n_users,
            n_items,
            triples,
        })
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        InteractionSet {
            n_users,
            n_items,
            triples: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Interaction] {
        &self.triples
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.triples.iter()
    }

    /// Ratings grouped per user, in file order.
    pub fn by_user(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n_users];
        for t in &self.triples {
            out[t.user].push((t.item, t.rating));
        }
        out
    }

    /// Sorted item ids per user.
    pub fn item_sets(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for t in &self.triples {
            out[t.user].push(t.item);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    /// Fraction of the n x m matrix that is observed, in percent.
    pub fn density_percent(&self) -> f64 {
        if self.n_users == 0 || self.n_items == 0 {
            return 0.0;
        }
        100.0 * self.triples.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Tsv,
    Csv,
}

impl FileFormat {
    /// `.csv` means comma separated; anything else is tab/whitespace separated.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Tsv,
        }
    }

    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            FileFormat::Tsv => line.split_whitespace().collect(),
            FileFormat::Csv => line.split(',').map(str::trim).collect(),
        }
    }

    fn separator(&self) -> char {
        match self {
            FileFormat::Tsv => '\t',
            FileFormat::Csv => ',',
        }
    }
}

/// Bidirectional map between original string ids and dense indices,
/// in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    originals: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_originals(originals: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(originals.len());
        for (i, id) in originals.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(NasError::Data(format!("id `{id}` mapped twice")));
            }
        }
        Ok(IdMap { originals, index })
    }

    /// Identity mapping `"0" -> 0, "1" -> 1, ...`.
    pub fn sequential(len: usize) -> Self {
        Self::from_originals((0..len).map(|i| i.to_string()).collect())
            .expect("sequential ids are unique")
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.originals.len();
        self.originals.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn original(&self, dense: usize) -> &str {
        &self.originals[dense]
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    /// Sidecar format: `original_id<TAB>dense_index` per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| NasError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, id) in self.originals.iter().enumerate() {
            writeln!(w, "{id}\t{i}").map_err(|e| NasError::io(path, e))?;
        }
        w.flush().map_err(|e| NasError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in data_lines(&text) {
            let mut parts = line.split('\t');
            let (Some(id), Some(idx), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(
                    path,
                    lineno,
                    "expected `original_id<TAB>dense_index`",
                ));
            };
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad dense index `{idx}`")))?;
            pairs.push((idx, id.to_string()));
        }
        pairs.sort_by_key(|(i, _)| *i);
        for (expect, (i, _)) in pairs.iter().enumerate() {
            if *i != expect {
                return Err(NasError::Data(format!(
                    "{}: dense indices are not contiguous (missing {expect})",
                    path.display()
                )));
            }
        }
        Self::from_originals(pairs.into_iter().map(|(_, id)| id).collect())
    }
}

#[derive(Clone, Debug)]
pub struct LoadedInteractions {
    pub set: InteractionSet,
    pub users: IdMap,
    pub items: IdMap,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| NasError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> NasError {
    NasError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-blank, non-comment lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
}

fn parse_rating_row<'a>(
    path: &Path,
    format: FileFormat,
    lineno: usize,
    line: &'a str,
) -> Result<(&'a str, &'a str, f64)> {
    let fields = format.fields(line);
    if fields.len() < 3 {
        return Err(parse_err(
            path,
            lineno,
            format!(
                "expected `user item rating`, found {} field(s)",
                fields.len()
            ),
        ));
    }
    let rating: f64 = fields[2]
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("bad rating `{}`", fields[2])))?;
    if !rating.is_finite() {
        return Err(parse_err(path, lineno, "rating is not finite"));
    }
    Ok((fields[0], fields[1], rating))
}

/// Reads `user<sep>item<sep>rating` rows, assigning dense ids in order of
/// first appearance. Extra trailing columns are ignored.
pub fn load_interactions(path: &Path, format: FileFormat) -> Result<LoadedInteractions> {
    let text = read_text(path)?;
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut triples = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in data_lines(&text) {
        let (u, i, rating) = parse_rating_row(path, format, lineno, line)?;
        let user = users.get_or_insert(u);
        let item = items.get_or_insert(i);
        if let Some(first) = seen.insert((user, item), lineno) {
            return Err(NasError::Data(format!(
                "{}:{lineno}: duplicate rating for user `{u}` item `{i}` (first seen on line {first})",
                path.display()
            )));
        }
        triples.push(Interaction { user, item, rating });
    }
    let set = InteractionSet::new(users.len(), items.len(), triples)?;
    Ok(LoadedInteractions { set, users, items })
}

/// Reads a ratings file whose ids must already be present in the given maps.
pub fn load_interactions_with_maps(
    path: &Path,
    format: FileFormat,
    users: &IdMap,
    items: &IdMap,
) -> Result<InteractionSet> {
    let text = read_text(path)?;
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in data_lines(&text) {
        let (u, i, rating) = parse_rating_row(path, format, lineno, line)?;
        let user = users
            .get(u)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown user `{u}`")))?;
        let item = items
            .get(i)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown item `{i}`")))?;
        if !seen.insert((user, item)) {
            return Err(NasError::Data(format!(
                "{}:{lineno}: duplicate rating for user `{u}` item `{i}`",
                path.display()
            )));
        }
        triples.push(Interaction { user, item, rating });
    }
    InteractionSet::new(users.len(), items.len(), triples)
}

pub fn write_interactions(
    path: &Path,
    set: &InteractionSet,
    users: &IdMap,
    items: &IdMap,
    format: FileFormat,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| NasError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let sep = format.separator();
    for t in set.iter() {
        writeln!(
            w,
            "{}{sep}{}{sep}{}",
            users.original(t.user),
            items.original(t.item),
            t.rating
        )
        .map_err(|e| NasError::io(path, e))?;
    }
    w.flush().map_err(|e| NasError::io(path, e))
}

/// Undirected friendship graph with sorted, deduplicated neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocialGraph {
    neighbors: Vec<Vec<usize>>,
}

impl SocialGraph {
    /// Symmetrizes, deduplicates and drops self-loops.
    pub fn from_edges(
        n_users: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n_users];
        for (a, b) in edges {
            if a >= n_users || b >= n_users {
                return Err(NasError::Data(format!(
                    "edge ({a}, {b}) out of range for {n_users} users"
                )));
            }
            if a == b {
                continue;
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(SocialGraph {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn empty(n_users: usize) -> Self {
        SocialGraph {
            neighbors: vec![Vec::new(); n_users],
        }
    }

    pub fn n_users(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, user: usize) -> &[usize] {
        &self.neighbors[user]
    }

    pub fn degree(&self, user: usize) -> usize {
        self.neighbors[user].len()
    }

    /// Undirected edges as `(a, b)` with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(a, ns)| {
            ns.iter()
                .all(|&b| b != a && self.neighbors[b].binary_search(&a).is_ok())
        })
    }
}

#[derive(Clone, Debug)]
pub struct GraphLoad {
    pub graph: SocialGraph,
    /// Rows whose endpoints are not in the user mapping.
    pub dropped: usize,
}

/// Reads `user<sep>user` rows. Endpoints that the user mapping does not know
/// are dropped and counted.
pub fn load_social_graph(path: &Path, format: FileFormat, users: &IdMap) -> Result<GraphLoad> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    let mut dropped = 0;
    for (lineno, line) in data_lines(&text) {
        let fields = format.fields(line);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(path, lineno, "expected `user user`"));
        }
        match (users.get(fields[0]), users.get(fields[1])) {
            (Some(a), Some(b)) => edges.push((a, b)),
            _ => dropped += 1,
        }
    }
    Ok(GraphLoad {
        graph: SocialGraph::from_edges(users.len(), edges)?,
        dropped,
    })
}

pub fn write_social_graph(
    path: &Path,
    graph: &SocialGraph,
    users: &IdMap,
    format: FileFormat,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| NasError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let sep = format.separator();
    for (a, b) in graph.edges() {
        writeln!(w, "{}{sep}{}", users.original(a), users.original(b))
            .map_err(|e| NasError::io(path, e))?;
    }
    w.flush().map_err(|e| NasError::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub seed: u64,
}

/// Per-user stratified random split. Users with fewer than three ratings keep
/// all of them in train.
pub fn split(
    data: &InteractionSet,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(NasError::Config(format!(
            "split fractions must be positive with train + validation < 1 (got {train_frac} + {val_frac})"
        )));
    }
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); data.n_users()];
    for (idx, t) in data.iter().enumerate() {
        per_user[t.user].push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 0 = train, 1 = validation, 2 = test
    let mut part = vec![0u8; data.len()];
    for idxs in &mut per_user {
        let c = idxs.len();
        if c < 3 {
            continue;
        }
        idxs.shuffle(&mut rng);
        let n_train = ((c as f64 * train_frac).round() as usize).clamp(1, c);
        let n_val = ((c as f64 * val_frac).round() as usize).min(c - n_train);
        for &i in &idxs[n_train..n_train + n_val] {
            part[i] = 1;
        }
        for &i in &idxs[n_train + n_val..] {
            part[i] = 2;
        }
    }
    let mut buckets: [Vec<Interaction>; 3] = Default::default();
    for (t, p) in data.iter().zip(&part) {
        buckets[*p as usize].push(*t);
    }
    let [train, validation, test] = buckets;
    let mk = |v| InteractionSet::new(data.n_users(), data.n_items(), v);
    Ok(DatasetSplit {
        train: mk(train)?,
        validation: mk(validation)?,
        test: mk(test)?,
        seed,
    })
}

/// Which ratings a user's mean is computed over when binarizing relevance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanSource {
    /// The partition being labeled.
    #[default]
    Labeled,
    Train,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceLabels {
    pub relevant: Vec<BTreeSet<usize>>,
    pub means: Vec<Option<f64>>,
}

impl RelevanceLabels {
    pub fn n_users(&self) -> usize {
        self.relevant.len()
    }
}

/// Per-user mean rating, `None` for users without ratings.
pub fn user_means(data: &InteractionSet) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; data.n_users()];
    let mut counts = vec![0usize; data.n_users()];
    for t in data.iter() {
        sums[t.user] += t.rating;
        counts[t.user] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// An item is relevant iff its rating strictly exceeds the user's mean over
/// the labeled set.
pub fn binarize_relevance(data: &InteractionSet) -> RelevanceLabels {
    binarize_relevance_with_means(data, &user_means(data))
}

pub fn binarize_relevance_with_means(
    data: &InteractionSet,
    means: &[Option<f64>],
) -> RelevanceLabels {
    let mut relevant = vec![BTreeSet::new(); data.n_users()];
    for t in data.iter() {
        if let Some(mean) = means[t.user] {
            if t.rating > mean {
                relevant[t.user].insert(t.item);
            }
        }
    }
    RelevanceLabels {
        relevant,
        means: means.to_vec(),
    }
}

/// Relevance labels for `labeled`, with the per-user mean taken from the
/// partition selected by `source`.
pub fn relevance_for(
    split: &DatasetSplit,
    labeled: &InteractionSet,
    source: MeanSource,
) -> RelevanceLabels {
    match source {
        MeanSource::Labeled => binarize_relevance(labeled),
        MeanSource::Train => binarize_relevance_with_means(labeled, &user_means(&split.train)),
        MeanSource::All => {
            let mut all: Vec<Interaction> = split.train.triples().to_vec();
            all.extend_from_slice(split.validation.triples());
            all.extend_from_slice(split.test.triples());
            let all = InteractionSet {
                n_users: labeled.n_users(),
                n_items: labeled.n_items(),
                triples: all,
            };
            binarize_relevance_with_means(labeled, &user_means(&all))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FriendContext {
    pub user: usize,
    pub friend_ids: Vec<usize>,
}

impl FriendContext {
    pub fn k(&self) -> usize {
        self.friend_ids.len()
    }
}

/// All neighbors when the degree is at most `k_max`, otherwise a uniform
/// sample of `k_max` of them drawn from a stream keyed by `(seed, user)`.
pub fn friend_context(graph: &SocialGraph, user: usize, k_max: usize, seed: u64) -> FriendContext {
    let ns = graph.neighbors(user);
    let friend_ids = if ns.len() <= k_max {
        ns.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        let mut picked = rand::seq::index::sample(&mut rng, ns.len(), k_max).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| ns[i]).collect()
    };
    FriendContext { user, friend_ids }
}
