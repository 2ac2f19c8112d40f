//! Interaction data: loading, filtering, splitting, negative sampling, item
//! features and the planted block-structured fixture.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MagnetError, Result};
use crate::format;

/// Users, items, the deduplicated edge set and per-user sorted histories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSet {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    histories: Vec<Vec<usize>>,
}

impl InteractionSet {
    /// Deduplicates and sorts `edges`; every id must be in range.
    pub fn new(num_users: usize, num_items: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(u, i)) = edges.iter().find(|&&(u, i)| u >= num_users || i >= num_items) {
            return Err(MagnetError::Parameter(format!(
                "edge ({u}, {i}) out of range for {num_users} users / {num_items} items"
            )));
        }
        edges.sort_unstable();
        edges.dedup();
        let mut histories = vec![Vec::new(); num_users];
        for &(u, i) in &edges {
            histories[u].push(i);
        }
        Ok(Self {
            num_users,
            num_items,
            edges,
            histories,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn history(&self, u: usize) -> &[usize] {
        &self.histories[u]
    }

    pub fn histories(&self) -> &[Vec<usize>] {
        &self.histories
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.histories[u].binary_search(&i).is_ok()
    }

    /// Number of training interactions per item.
    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_items];
        for &(_, i) in &self.edges {
            deg[i] += 1;
        }
        deg
    }
}

/// Bijection between external string ids and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdMap {
    pub fn from_external(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
        Self { external: ids, lookup }
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn dense(&self, external: &str) -> Option<usize> {
        self.lookup.get(external).copied()
    }

    pub fn external(&self, dense: usize) -> &str {
        &self.external[dense]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, s) in self.external.iter().enumerate() {
            let _ = writeln!(out, "{s}\t{k}");
        }
        out
    }

    pub fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (ext, dense) = line.split_once('\t').ok_or_else(|| parse_err(path, n + 1, "expected two columns"))?;
            let dense: usize = dense.parse().map_err(|_| parse_err(path, n + 1, "dense id is not an integer"))?;
            pairs.push((dense, ext.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(k, (d, _))| *d != k) {
            return Err(parse_err(path, 0, "dense ids are not 0..n-1"));
        }
        Ok(Self::from_external(pairs.into_iter().map(|(_, s)| s).collect()))
    }
}

fn parse_err(path: &Path, line: usize, message: &str) -> MagnetError {
    MagnetError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Orders ids numerically when every id is an unsigned integer, else lexicographically.
fn natural_sort(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    } else {
        ids.sort();
    }
}

/// An interaction file after filtering and re-densification.
#[derive(Clone, Debug)]
pub struct LoadedInteractions {
    pub interactions: InteractionSet,
    pub users: IdMap,
    pub items: IdMap,
    /// Row of each dense item in the feature files. Feature rows follow the
    /// natural order of all item ids present in the unfiltered file.
    pub feature_rows: Vec<usize>,
    pub raw_item_count: usize,
}

/// Reads `user<TAB>item` lines, drops users with fewer than `min_interactions`
/// distinct items and re-densifies both id spaces.
pub fn load_interactions(path: &Path, min_interactions: usize) -> Result<LoadedInteractions> {
    if min_interactions == 0 {
        return Err(MagnetError::Parameter("min_interactions must be at least 1".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| MagnetError::io(path, e))?;
    parse_interactions(path, &text, min_interactions)
}

pub fn parse_interactions(path: &Path, text: &str, min_interactions: usize) -> Result<LoadedInteractions> {
    let mut per_user: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut all_items: Vec<&str> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(u), Some(i), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(path, n + 1, "expected `user_id<TAB>item_id`"));
        };
        if u.is_empty() || i.is_empty() {
            return Err(parse_err(path, n + 1, "empty id"));
        }
        per_user.entry(u).or_default().push(i);
        all_items.push(i);
    }
    let mut raw_items: Vec<String> = all_items.iter().map(|s| s.to_string()).collect();
    natural_sort(&mut raw_items);
    raw_items.dedup();
    let raw_row: HashMap<&str, usize> = raw_items.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();

    let mut kept: Vec<(String, Vec<&str>)> = Vec::new();
    for (u, mut items) in per_user {
        items.sort_unstable();
        items.dedup();
        if items.len() >= min_interactions {
            kept.push((u.to_string(), items));
        }
    }
    if kept.is_empty() {
        return Err(MagnetError::EmptyDataset);
    }
    let mut user_ids: Vec<String> = kept.iter().map(|(u, _)| u.clone()).collect();
    natural_sort(&mut user_ids);
    let users = IdMap::from_external(user_ids);

    let mut item_ids: Vec<String> = kept.iter().flat_map(|(_, it)| it.iter().map(|s| s.to_string())).collect();
    natural_sort(&mut item_ids);
    item_ids.dedup();
    let feature_rows = item_ids.iter().map(|s| raw_row[s.as_str()]).collect();
    let items = IdMap::from_external(item_ids);

    let mut edges = Vec::new();
    for (u, its) in &kept {
        let du = users.dense(u).unwrap();
        for i in its {
            edges.push((du, items.dense(i).unwrap()));
        }
    }
    let interactions = InteractionSet::new(users.len(), items.len(), edges)?;
    Ok(LoadedInteractions {
        interactions,
        users,
        items,
        feature_rows,
        raw_item_count: raw_items.len(),
    })
}

/// Train/validation/test partition of one interaction set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitBundle {
    pub train: InteractionSet,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

impl SplitBundle {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Per-user random partition. Held-out counts are floored so rounding always
/// favors the training side; users with fewer than three edges keep everything
/// in training.
pub fn split_interactions(data: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<SplitBundle> {
    let parts = [ratios.train, ratios.valid, ratios.test];
    if parts.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(MagnetError::Parameter(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut small = 0usize;
    for u in 0..data.num_users() {
        let mut items = data.history(u).to_vec();
        let n = items.len();
        if n < 3 {
            if n > 0 {
                small += 1;
            }
            train.extend(items.into_iter().map(|i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let n_valid = (n as f64 * ratios.valid + 1e-9).floor() as usize;
        let n_test = (n as f64 * ratios.test + 1e-9).floor() as usize;
        let (v, rest) = items.split_at(n_valid);
        let (t, tr) = rest.split_at(n_test);
        valid.extend(v.iter().map(|&i| (u, i)));
        test.extend(t.iter().map(|&i| (u, i)));
        train.extend(tr.iter().map(|&i| (u, i)));
    }
    if small > 0 {
        log::warn!("{small} users with fewer than 3 interactions were kept entirely in training");
    }
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitBundle {
        train: InteractionSet::new(data.num_users(), data.num_items(), train)?,
        valid,
        test,
        seed,
    })
}

/// Draws `count` items uniformly from the complement of `u`'s training history,
/// with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(u: usize, train: &InteractionSet, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let hist = train.history(u);
    let n = train.num_items();
    if hist.len() >= n {
        return Err(MagnetError::UnsatisfiableNegative { user: u });
    }
    let mut out = Vec::with_capacity(count);
    if 2 * hist.len() <= n {
        while out.len() < count {
            let j = rng.random_range(0..n);
            if hist.binary_search(&j).is_err() {
                out.push(j);
            }
        }
    } else {
        let complement: Vec<usize> = (0..n).filter(|j| hist.binary_search(j).is_err()).collect();
        for _ in 0..count {
            out.push(complement[rng.random_range(0..complement.len())]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Appearance (visual features).
    A,
    /// Semantics (textual features).
    S,
}

/// Row-major item features for one content modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(MagnetError::Shape(format!("{} values for a {rows}x{dim} matrix", values.len())));
        }
        let m = Self {
            modality,
            rows,
            dim,
            values,
        };
        if let Some(row) = (0..rows).find(|&r| m.row(r).iter().any(|x| !x.is_finite())) {
            return Err(MagnetError::NonFinite {
                what: format!("{:?} features", modality),
                row,
            });
        }
        Ok(m)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    /// Rows whose entries are all zero (similarity 0 to everything).
    pub fn zero_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.row(r).iter().all(|&x| x == 0.0)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            if r >= self.rows {
                return Err(MagnetError::Shape(format!("feature row {r} out of range ({})", self.rows)));
            }
            values.extend_from_slice(self.row(r));
        }
        Self::new(self.modality, rows.len(), self.dim, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode_f32(self.rows, self.dim, &self.values)
    }

    /// Hex SHA-256 of the serialized matrix.
    pub fn fingerprint(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_bytes(path, &self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Reads an `MGF1` feature file and checks its row count and finiteness.
pub fn load_features(path: &Path, modality: Modality, num_items: usize) -> Result<FeatureMatrix> {
    let bytes = format::read_bytes(path)?;
    let (h, payload) = format::decode(path, &bytes)?;
    if h.kind != format::PayloadKind::F32 {
        return Err(MagnetError::Shape(format!("{}: feature payload must be f32", path.display())));
    }
    if h.rows != num_items {
        return Err(MagnetError::Shape(format!(
            "{}: {} feature rows for {num_items} items",
            path.display(),
            h.rows
        )));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureMatrix::new(modality, h.rows, h.dim, values)
}

/// Parameters of the planted block-structured dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_blocks: usize,
    pub feature_dim_a: usize,
    pub feature_dim_s: usize,
    /// Expected fraction of the catalog each user interacts with.
    pub density: f64,
    /// Probability that an interaction falls outside the user's block.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 120,
            num_blocks: 4,
            feature_dim_a: 32,
            feature_dim_s: 16,
            density: 0.1,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Standard deviation of the per-item perturbation around each block centroid.
const FEATURE_JITTER: f64 = 0.5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MagnetError::Parameter(m.to_string()));
        if self.num_blocks == 0 || !self.num_users.is_multiple_of(self.num_blocks) || !self.num_items.is_multiple_of(self.num_blocks) {
            return bad("num_blocks must divide both num_users and num_items");
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return bad("density must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        if self.num_blocks == 1 && self.noise > 0.0 {
            return bad("noise needs at least two blocks");
        }
        if self.feature_dim_a == 0 || self.feature_dim_s == 0 {
            return bad("feature dimensions must be positive");
        }
        Ok(())
    }

    pub fn user_block(&self, u: usize) -> usize {
        u / (self.num_users / self.num_blocks)
    }

    pub fn item_block(&self, i: usize) -> usize {
        i / (self.num_items / self.num_blocks)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub interactions: InteractionSet,
    pub features_a: FeatureMatrix,
    pub features_s: FeatureMatrix,
}

/// Users prefer items of their own block with probability `1 - noise`; item
/// features are a block centroid plus Gaussian jitter. Every item receives at
/// least one interaction so the catalog survives re-densification intact.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_block = spec.num_items / spec.num_blocks;
    let per_user = ((spec.density * spec.num_items as f64).round() as usize).clamp(1, spec.num_items - 1);
    let mut edges = Vec::new();
    for u in 0..spec.num_users {
        let b = spec.user_block(u);
        let mut chosen: Vec<usize> = Vec::with_capacity(per_user);
        let mut attempts = 0;
        while chosen.len() < per_user && attempts < 100 * per_user {
            attempts += 1;
            let within = rng.random::<f64>() >= spec.noise;
            let i = if within {
                b * per_block + rng.random_range(0..per_block)
            } else {
                let k = rng.random_range(0..spec.num_items - per_block);
                if k >= b * per_block { k + per_block } else { k }
            };
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        edges.extend(chosen.into_iter().map(|i| (u, i)));
    }
    let mut covered = vec![false; spec.num_items];
    for &(_, i) in &edges {
        covered[i] = true;
    }
    let users_per_block = spec.num_users / spec.num_blocks;
    for i in (0..spec.num_items).filter(|&i| !covered[i]) {
        let u = spec.item_block(i) * users_per_block + rng.random_range(0..users_per_block);
        edges.push((u, i));
    }
    let interactions = InteractionSet::new(spec.num_users, spec.num_items, edges)?;
    let features_a = planted_features(spec, Modality::A, spec.feature_dim_a, &mut rng)?;
    let features_s = planted_features(spec, Modality::S, spec.feature_dim_s, &mut rng)?;
    Ok(SyntheticData {
        interactions,
        features_a,
        features_s,
    })
}

fn planted_features(spec: &SyntheticSpec, modality: Modality, dim: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMatrix> {
    let centroids: Vec<Vec<f64>> = (0..spec.num_blocks)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut values = Vec::with_capacity(spec.num_items * dim);
    for i in 0..spec.num_items {
        let c = &centroids[spec.item_block(i)];
        for &m in c {
            let noise: f64 = rng.sample(StandardNormal);
            values.push((m + FEATURE_JITTER * noise) as f32);
        }
    }
    FeatureMatrix::new(modality, spec.num_items, dim, values)
}

/// Interaction file text for dense ids, one `user<TAB>item` line per edge.
pub fn interactions_to_tsv(set: &InteractionSet) -> String {
    let mut out = String::new();
    for &(u, i) in set.edges() {
        let _ = writeln!(out, "{u}\t{i}");
    }
    out
}

pub fn pairs_to_tsv(pairs: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for &(u, i) in pairs {
        let _ = writeln!(out, "{u}\t{i}");
    }
    out
}

/// Parses dense-id pair lines written by [`pairs_to_tsv`].
pub fn pairs_from_tsv(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (u, i) = line.split_once('\t').ok_or_else(|| parse_err(path, n + 1, "expected two columns"))?;
        let u = u.parse().map_err(|_| parse_err(path, n + 1, "user id is not an integer"))?;
        let i = i.parse().map_err(|_| parse_err(path, n + 1, "item id is not an integer"))?;
        out.push((u, i));
    }
    Ok(out)
}
