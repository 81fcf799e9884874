//! Soft-target generation.
//!
//! The label-propagation generator clusters pretrained sample representations with
//! k-means, treats every member of a cluster as a neighbour (including the sample
//! itself), weights neighbours by a temperature softmax over negative Euclidean
//! distance, and iterates `q ← ½·W·q + ½·q⁰` starting from one-hot labels.
//!
//! Label smoothing and a popularity prior are provided as alternative generators.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::loss::{make_uniform_smoothing, PriorDist, SoftTarget};
use crate::model::Matrix;

/// Result of k-means clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Member indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if x < d {
                    chosen = i;
                    break;
                }
                x -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Stops at an assignment fixed point or after `max_iters` iterations. A cluster that
/// ends up empty is reseeded with the point farthest from its own centroid.
pub fn kmeans(data: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = data.rows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= n (k={k}, n={n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut inertia_history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(data.row(i), &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            dist[i] = d;
        }

        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("n >= k guarantees a cluster with two members");
            sizes[assignment[far]] -= 1;
            assignment[far] = empty;
            sizes[empty] = 1;
            dist[far] = 0.0;
            centroids.row_mut(empty).copy_from_slice(data.row(far));
            changed = true;
        }

        let mut sums = Matrix::zeros(k, data.cols());
        for (i, &c) in assignment.iter().enumerate() {
            for (s, x) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        for (c, &size) in sizes.iter().enumerate() {
            let inv = 1.0 / size as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
        let inertia = (0..n)
            .map(|i| sq_dist(data.row(i), centroids.row(assignment[i])))
            .sum();
        inertia_history.push(inertia);
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment {
        assignment,
        inertia: *inertia_history.last().unwrap(),
        centroids,
        inertia_history,
    })
}

/// Negative Euclidean distance.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "similarity of vectors with different dimensions");
    -sq_dist(a, b).sqrt()
}

/// Row-stochastic neighbour weights for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationWeights {
    pub w: Matrix,
    pub tau: f64,
}

impl PropagationWeights {
    pub fn len(&self) -> usize {
        self.w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.rows() == 0
    }
}

/// `w_uv = softmax_v(sim(u, v) / τ)` over all cluster members, `u` included.
pub fn propagation_weights(embeddings: &Matrix, tau: f64) -> Result<PropagationWeights> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let n = embeddings.rows();
    let mut w = Matrix::zeros(n, n);
    for u in 0..n {
        let row = w.row_mut(u);
        for (v, slot) in row.iter_mut().enumerate() {
            *slot = similarity(embeddings.row(u), embeddings.row(v)) / tau;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(PropagationWeights { w, tau })
}

/// Runs `T` rounds of `q ← ½·W·q + ½·q⁰` for one cluster.
///
/// `members` lists `(sample_id, target)` in the same order as the rows of `weights`.
/// Soft targets are supported on the cluster's distinct targets only; each result is
/// renormalised to sum to one. Entries below `min_prob` (other than the sample's own
/// target) are dropped before renormalisation; pass 0 to keep everything.
pub fn propagate_pruned(
    members: &[(usize, usize)],
    weights: &PropagationWeights,
    iterations: usize,
    min_prob: f64,
) -> Result<BTreeMap<usize, SoftTarget>> {
    let n = members.len();
    if weights.len() != n {
        return Err(Error::Contract(format!(
            "weight matrix has {} rows for {n} cluster members",
            weights.len()
        )));
    }
    let mut labels: Vec<usize> = members.iter().map(|&(_, y)| y).collect();
    labels.sort_unstable();
    labels.dedup();
    let s = labels.len();
    let col: Vec<usize> = members
        .iter()
        .map(|&(_, y)| labels.binary_search(&y).unwrap())
        .collect();

    // q is an n × s dense matrix over the cluster's label set
    let mut q = Matrix::zeros(n, s);
    for (u, &c) in col.iter().enumerate() {
        q.row_mut(u)[c] = 1.0;
    }
    let mut next = Matrix::zeros(n, s);
    for _ in 0..iterations {
        for u in 0..n {
            let out = next.row_mut(u);
            out.iter_mut().for_each(|x| *x = 0.0);
            for (v, &w_uv) in weights.w.row(u).iter().enumerate() {
                if w_uv == 0.0 {
                    continue;
                }
                for (o, qv) in out.iter_mut().zip(q.row(v)) {
                    *o += w_uv * qv;
                }
            }
            out.iter_mut().for_each(|x| *x *= 0.5);
            out[col[u]] += 0.5;
        }
        std::mem::swap(&mut q, &mut next);
    }

    let mut out = BTreeMap::new();
    for (u, &(sample_id, y)) in members.iter().enumerate() {
        let row = q.row(u);
        let kept: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|&(c, &x)| x > 0.0 && (c == col[u] || x >= min_prob))
            .map(|(c, &x)| (labels[c], x))
            .collect();
        let total: f64 = kept.iter().map(|&(_, x)| x).sum();
        let entries = kept.into_iter().map(|(i, x)| (i, x / total)).collect();
        out.insert(sample_id, SoftTarget::from_entries(y, entries)?);
    }
    Ok(out)
}

pub fn propagate(
    members: &[(usize, usize)],
    weights: &PropagationWeights,
    iterations: usize,
) -> Result<BTreeMap<usize, SoftTarget>> {
    propagate_pruned(members, weights, iterations, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// One-hot targets.
    None,
    Ls,
    Pop,
    Lp,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::None => "none",
            GeneratorKind::Ls => "ls",
            GeneratorKind::Pop => "pop",
            GeneratorKind::Lp => "lp",
        }
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(GeneratorKind::None),
            "ls" => Ok(GeneratorKind::Ls),
            "pop" => Ok(GeneratorKind::Pop),
            "lp" => Ok(GeneratorKind::Lp),
            other => Err(Error::InvalidArgument(format!("unknown generator {other:?}"))),
        }
    }
}

/// Label-propagation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpParams {
    pub k: usize,
    pub tau: f64,
    pub iterations: usize,
    /// Clusters larger than this are split again with k-means.
    pub max_cluster: usize,
    pub kmeans_iters: usize,
    /// Drop propagated entries below this probability (0 keeps all).
    pub min_prob: f64,
}

impl Default for LpParams {
    fn default() -> Self {
        Self {
            k: 64,
            tau: 1.0,
            iterations: 3,
            max_cluster: 2048,
            kmeans_iters: 100,
            min_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpProvenance {
    pub k: usize,
    pub tau: f64,
    pub iterations: usize,
}

/// Soft targets keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetSet {
    pub targets: BTreeMap<usize, SoftTarget>,
    pub generator: GeneratorKind,
    pub provenance: Option<LpProvenance>,
    pub item_count: usize,
}

impl SoftTargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, sample_id: usize) -> Option<&SoftTarget> {
        self.targets.get(&sample_id)
    }

    /// Mean target confidence `q_y` over the set.
    pub fn mean_q_y(&self) -> f64 {
        if self.targets.is_empty() {
            return 1.0;
        }
        self.targets.values().map(|q| q.q_y()).sum::<f64>() / self.targets.len() as f64
    }
}

pub fn one_hot_set(samples: &[Sample], item_count: usize) -> SoftTargetSet {
    SoftTargetSet {
        targets: samples
            .iter()
            .map(|s| (s.sample_id, SoftTarget::one_hot(s.target)))
            .collect(),
        generator: GeneratorKind::None,
        provenance: None,
        item_count,
    }
}

pub fn generate_ls(samples: &[Sample], item_count: usize, epsilon: f64) -> SoftTargetSet {
    SoftTargetSet {
        targets: samples
            .iter()
            .map(|s| (s.sample_id, make_uniform_smoothing(s.target, item_count, epsilon)))
            .collect(),
        generator: GeneratorKind::Ls,
        provenance: None,
        item_count,
    }
}

/// `q = (1 − w)·onehot(y) + w·pop`, with `pop` the empirical target frequency.
pub fn generate_pop(samples: &[Sample], weight: f64, item_count: usize) -> Result<SoftTargetSet> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("popularity prior needs training samples".into()));
    }
    if !(weight > 0.0 && weight < 1.0) {
        return Err(Error::InvalidArgument(format!("popularity weight {weight} outside (0, 1)")));
    }
    let mut counts = vec![0.0; item_count];
    for s in samples {
        counts[s.target] += 1.0;
    }
    let n = samples.len() as f64;
    let table: Arc<[f64]> = counts.into_iter().map(|c| c / n).collect::<Vec<_>>().into();
    let targets = samples
        .iter()
        .map(|s| {
            SoftTarget::with_prior(
                s.target,
                vec![(s.target, 1.0 - weight)],
                weight,
                PriorDist::Table(table.clone()),
            )
            .map(|q| (s.sample_id, q))
        })
        .collect::<Result<_>>()?;
    Ok(SoftTargetSet {
        targets,
        generator: GeneratorKind::Pop,
        provenance: None,
        item_count,
    })
}

fn select_rows(data: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), data.cols());
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(data.row(src));
    }
    out
}

/// Splits an oversized cluster until every part has at most `cap` members.
fn split_oversized(data: &Matrix, rows: Vec<usize>, cap: usize, seed: u64, iters: usize, out: &mut Vec<Vec<usize>>) -> Result<()> {
    if rows.len() <= cap {
        out.push(rows);
        return Ok(());
    }
    let parts = rows.len().div_ceil(cap).max(2);
    let sub = kmeans(&select_rows(data, &rows), parts, iters, seed)?;
    let groups: Vec<Vec<usize>> = sub
        .members()
        .into_iter()
        .map(|g| g.into_iter().map(|i| rows[i]).collect())
        .collect();
    if groups.iter().any(|g| g.len() == rows.len()) {
        // degenerate (identical points): fall back to contiguous chunks
        out.extend(rows.chunks(cap).map(|c| c.to_vec()));
        return Ok(());
    }
    for (j, g) in groups.into_iter().enumerate() {
        split_oversized(data, g, cap, seed.wrapping_add(j as u64 + 1), iters, out)?;
    }
    Ok(())
}

/// Label propagation over k-means neighbourhoods of the given sample representations.
pub fn generate_lp(embeddings: &Matrix, samples: &[Sample], params: &LpParams, item_count: usize, seed: u64) -> Result<SoftTargetSet> {
    if embeddings.rows() != samples.len() {
        return Err(Error::Contract(format!(
            "{} embeddings for {} samples",
            embeddings.rows(),
            samples.len()
        )));
    }
    if params.max_cluster == 0 {
        return Err(Error::InvalidArgument("max_cluster must be positive".into()));
    }
    let clusters = kmeans(embeddings, params.k, params.kmeans_iters, seed)?;
    let mut groups = Vec::new();
    for members in clusters.members() {
        split_oversized(embeddings, members, params.max_cluster, seed, params.kmeans_iters, &mut groups)?;
    }
    debug!(
        "label propagation: {} clusters ({} after splitting), inertia {:.4}",
        clusters.k(),
        groups.len(),
        clusters.inertia
    );
    let mut targets = BTreeMap::new();
    for rows in groups {
        let weights = propagation_weights(&select_rows(embeddings, &rows), params.tau)?;
        let members: Vec<(usize, usize)> = rows
            .iter()
            .map(|&r| (samples[r].sample_id, samples[r].target))
            .collect();
        targets.extend(propagate_pruned(&members, &weights, params.iterations, params.min_prob)?);
    }
    Ok(SoftTargetSet {
        targets,
        generator: GeneratorKind::Lp,
        provenance: Some(LpProvenance {
            k: params.k,
            tau: params.tau,
            iterations: params.iterations,
        }),
        item_count,
    })
}

const TARGETS_MAGIC: &str = "drec-soft-targets";
const TARGETS_VERSION: u32 = 1;
/// Largest catalog accepted when reading a soft-target file.
const MAX_ITEMS: usize = 1 << 22;

/// Writes a soft-target file.
///
/// ```text
/// drec-soft-targets \t 1
/// generator=lp \t k=64 \t tau=1 \t T=3 \t n=<records> \t m=<items>
/// prior \t none | uniform | table \t [item:prob,...]
/// sample_id \t y \t item:prob,... [\t prior_weight]
/// ```
///
/// Probabilities use Rust's shortest round-trip float formatting.
pub fn write_targets<W: Write>(w: &mut W, set: &SoftTargetSet) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: "<soft targets>".into(),
        source: e,
    };
    let prior = shared_prior(set)?;
    writeln!(w, "{TARGETS_MAGIC}\t{TARGETS_VERSION}").map_err(io)?;
    let (k, tau, t) = match set.provenance {
        Some(p) => (p.k.to_string(), p.tau.to_string(), p.iterations.to_string()),
        None => ("-".into(), "-".into(), "-".into()),
    };
    writeln!(
        w,
        "generator={}\tk={k}\ttau={tau}\tT={t}\tn={}\tm={}",
        set.generator.as_str(),
        set.len(),
        set.item_count
    )
    .map_err(io)?;
    match &prior {
        None => writeln!(w, "prior\tnone").map_err(io)?,
        Some(PriorDist::Uniform { items }) => writeln!(w, "prior\tuniform\t{items}").map_err(io)?,
        Some(PriorDist::Table(t)) => {
            let body: Vec<String> = t
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > 0.0)
                .map(|(i, x)| format!("{i}:{x}"))
                .collect();
            writeln!(w, "prior\ttable\t{}", body.join(",")).map_err(io)?
        }
    }
    for (&sid, q) in &set.targets {
        let body: Vec<String> = q.entries().iter().map(|(i, x)| format!("{i}:{x}")).collect();
        write!(w, "{sid}\t{}\t{}", q.target(), body.join(",")).map_err(io)?;
        if let Some((weight, _)) = q.prior() {
            write!(w, "\t{weight}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

fn shared_prior(set: &SoftTargetSet) -> Result<Option<PriorDist>> {
    let mut found: Option<&PriorDist> = None;
    let mut any_plain = false;
    for q in set.targets.values() {
        match (q.prior(), found) {
            (None, _) => any_plain = true,
            (Some((_, d)), None) => found = Some(d),
            (Some((_, d)), Some(f)) if !same_prior(d, f) => {
                return Err(Error::Contract("soft targets use more than one prior".into()))
            }
            _ => {}
        }
    }
    if any_plain && found.is_some() {
        return Err(Error::Contract("soft targets mix prior-backed and plain records".into()));
    }
    Ok(found.cloned())
}

fn same_prior(a: &PriorDist, b: &PriorDist) -> bool {
    match (a, b) {
        (PriorDist::Table(x), PriorDist::Table(y)) => Arc::ptr_eq(x, y) || x == y,
        _ => a == b,
    }
}

fn parse_pairs(text: &str, line: usize) -> Result<Vec<(usize, f64)>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|pair| {
            let (i, x) = pair
                .split_once(':')
                .ok_or_else(|| Error::parse(line, format!("expected item:prob, got {pair:?}")))?;
            let i = i
                .parse::<usize>()
                .map_err(|_| Error::parse(line, format!("bad item id {i:?}")))?;
            let x = x
                .parse::<f64>()
                .map_err(|_| Error::parse(line, format!("bad probability {x:?}")))?;
            Ok((i, x))
        })
        .collect()
}

pub fn parse_targets<R: BufRead>(reader: R) -> Result<SoftTargetSet> {
    let mut lines = reader.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::parse(i + 1, e.to_string())),
            None => Err(Error::Truncated(format!("missing {what}"))),
        }
    };

    let (ln, magic) = next_line("magic line")?;
    let (tag, version) = magic
        .split_once('\t')
        .ok_or_else(|| Error::parse(ln, "bad magic line"))?;
    if tag != TARGETS_MAGIC {
        return Err(Error::parse(ln, "not a soft-target file"));
    }
    let version: u32 = version.parse().map_err(|_| Error::parse(ln, "bad version"))?;
    if version != TARGETS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TARGETS_VERSION,
        });
    }

    let (ln, header) = next_line("header line")?;
    let mut fields = BTreeMap::new();
    for kv in header.split('\t') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(ln, format!("bad header field {kv:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| Error::parse(ln, format!("missing header key {k}")));
    let generator: GeneratorKind = get("generator")?.parse().map_err(|_| Error::parse(ln, "bad generator"))?;
    let n: usize = get("n")?.parse().map_err(|_| Error::parse(ln, "bad n"))?;
    let m: usize = get("m")?.parse().map_err(|_| Error::parse(ln, "bad m"))?;
    if m > MAX_ITEMS {
        return Err(Error::parse(ln, format!("catalog of {m} items exceeds {MAX_ITEMS}")));
    }
    let provenance = if generator == GeneratorKind::Lp {
        Some(LpProvenance {
            k: get("k")?.parse().map_err(|_| Error::parse(ln, "bad k"))?,
            tau: get("tau")?.parse().map_err(|_| Error::parse(ln, "bad tau"))?,
            iterations: get("T")?.parse().map_err(|_| Error::parse(ln, "bad T"))?,
        })
    } else {
        None
    };

    let (ln, prior_line) = next_line("prior line")?;
    let parts: Vec<&str> = prior_line.split('\t').collect();
    let prior = match parts.as_slice() {
        ["prior", "none"] => None,
        ["prior", "uniform", items] => {
            let items: usize = items.parse().map_err(|_| Error::parse(ln, "bad uniform size"))?;
            if items != m {
                return Err(Error::parse(ln, "uniform prior size differs from m"));
            }
            Some(PriorDist::Uniform { items })
        }
        ["prior", "table", body] => {
            let mut table = vec![0.0; m];
            for (i, x) in parse_pairs(body, ln)? {
                if i >= m {
                    return Err(Error::parse(ln, format!("prior item {i} >= m={m}")));
                }
                table[i] = x;
            }
            Some(PriorDist::Table(table.into()))
        }
        _ => return Err(Error::parse(ln, "bad prior line")),
    };

    let mut targets = BTreeMap::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        let line = line.map_err(|e| Error::parse(ln, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let expected = if prior.is_some() { 4 } else { 3 };
        if cols.len() != expected {
            return Err(Error::parse(ln, format!("expected {expected} fields, found {}", cols.len())));
        }
        let sid: usize = cols[0].parse().map_err(|_| Error::parse(ln, "bad sample id"))?;
        let y: usize = cols[1].parse().map_err(|_| Error::parse(ln, "bad target"))?;
        let entries = parse_pairs(cols[2], ln)?;
        if y >= m || entries.iter().any(|&(i, _)| i >= m) {
            return Err(Error::parse(ln, format!("item id outside catalog of {m}")));
        }
        let q = match &prior {
            None => SoftTarget::from_entries(y, entries),
            Some(dist) => {
                let w: f64 = cols[3].parse().map_err(|_| Error::parse(ln, "bad prior weight"))?;
                SoftTarget::with_prior(y, entries, w, dist.clone())
            }
        }
        .map_err(|e| Error::parse(ln, e.to_string()))?;
        if targets.insert(sid, q).is_some() {
            return Err(Error::parse(ln, format!("duplicate sample id {sid}")));
        }
    }
    if targets.len() != n {
        return Err(Error::Truncated(format!("header declares {n} records, found {}", targets.len())));
    }
    Ok(SoftTargetSet {
        targets,
        generator,
        provenance,
        item_count: m,
    })
}

pub fn save_targets(set: &SoftTargetSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_targets(&mut w, set)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_targets(path: &Path) -> Result<SoftTargetSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_targets(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        let cols = rows[0].len();
        Matrix::from_vec(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    fn sample(id: usize, target: usize) -> Sample {
        Sample {
            sample_id: id,
            user: 0,
            history: vec![0],
            target,
        }
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let data = mat(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 3.0]]);
        let c = kmeans(&data, 1, 10, 1).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 0]);
        assert!((c.centroids.row(0)[0] - 1.0).abs() < 1e-15);
        assert!((c.centroids.row(0)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_rejects_k_above_n() {
        let data = mat(&[&[0.0], &[1.0]]);
        assert!(matches!(kmeans(&data, 3, 10, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kmeans_repairs_empty_clusters_on_duplicates() {
        let data = mat(&[&[1.0], &[1.0], &[1.0], &[5.0]]);
        let c = kmeans(&data, 3, 10, 4).unwrap();
        let members = c.members();
        assert!(members.iter().all(|m| !m.is_empty()), "{members:?}");
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[3.0, 4.0]), -5.0);
        assert_eq!(similarity(&[0.3, -1.0], &[2.0, 0.5]), similarity(&[2.0, 0.5], &[0.3, -1.0]));
    }

    #[test]
    fn weight_hand_values() {
        let same = propagation_weights(&mat(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]), 0.5).unwrap();
        assert!(same.w.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let single = propagation_weights(&mat(&[&[4.0]]), 1.0).unwrap();
        assert_eq!(single.w.as_slice(), &[1.0]);
        let pair = propagation_weights(&mat(&[&[0.0], &[1.0]]), 1.0).unwrap();
        assert!((pair.w.row(0)[0] - 0.731059).abs() < 1e-6);
        assert!((pair.w.row(0)[1] - 0.268941).abs() < 1e-6);
        assert!(propagation_weights(&mat(&[&[0.0]]), 0.0).is_err());
    }

    #[test]
    fn higher_temperature_flattens_weights() {
        let data = mat(&[&[0.0], &[1.0], &[3.0]]);
        let entropy = |w: &PropagationWeights| -> f64 { -w.w.row(0).iter().map(|x| x * x.ln()).sum::<f64>() };
        let sharp = propagation_weights(&data, 0.25).unwrap();
        let flat = propagation_weights(&data, 4.0).unwrap();
        assert!(entropy(&flat) > entropy(&sharp));
    }

    #[test]
    fn propagation_hand_values() {
        let w = propagation_weights(&mat(&[&[0.0], &[0.0]]), 1.0).unwrap();
        let members = [(10, 3), (11, 7)];
        let zero = propagate(&members, &w, 0).unwrap();
        assert!(zero[&10].is_one_hot());
        for t in [1, 2] {
            let out = propagate(&members, &w, t).unwrap();
            assert!((out[&10].prob(3) - 0.75).abs() < 1e-15);
            assert!((out[&10].prob(7) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_target_stays_one_hot() {
        let w = propagation_weights(&mat(&[&[0.0], &[0.3], &[2.0]]), 1.0).unwrap();
        let out = propagate(&[(0, 5), (1, 5), (2, 5)], &w, 4).unwrap();
        assert!(out.values().all(|q| q.entries() == [(5, 1.0)]));
    }

    #[test]
    fn pruning_keeps_own_target() {
        let w = propagation_weights(&mat(&[&[0.0], &[0.0], &[0.0], &[0.0]]), 1.0).unwrap();
        let out = propagate_pruned(&[(0, 1), (1, 2), (2, 3), (3, 4)], &w, 1, 0.2).unwrap();
        // 0.5 + 0.125 on own target, 0.125 elsewhere -> all others pruned
        assert!(out.values().all(|q| q.is_one_hot()));
    }

    #[test]
    fn pop_hand_values() {
        let samples = [sample(0, 0), sample(1, 0), sample(2, 1)];
        let set = generate_pop(&samples, 0.5, 3).unwrap();
        let q = set.get(2).unwrap();
        assert!((q.prob(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.prob(0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.prob(2), 0.0);
        let same = generate_pop(&[sample(0, 2), sample(1, 2)], 0.5, 3).unwrap();
        assert_eq!(same.get(0).unwrap().to_dense(3), vec![0.0, 0.0, 1.0]);
        assert!(generate_pop(&[], 0.5, 3).is_err());
    }

    #[test]
    fn lp_with_singleton_clusters_is_one_hot() {
        let samples: Vec<Sample> = (0..5).map(|i| sample(i, i % 3)).collect();
        let emb = mat(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0]]);
        let params = LpParams {
            k: 5,
            ..LpParams::default()
        };
        let set = generate_lp(&emb, &samples, &params, 3, 1).unwrap();
        assert!(set.targets.values().all(|q| q.is_one_hot()));
    }

    #[test]
    fn oversized_clusters_are_split() {
        let samples: Vec<Sample> = (0..40).map(|i| sample(i, i % 4)).collect();
        let emb = Matrix::from_vec(40, 1, (0..40).map(|i| i as f64).collect());
        let params = LpParams {
            k: 1,
            max_cluster: 10,
            iterations: 2,
            ..LpParams::default()
        };
        let set = generate_lp(&emb, &samples, &params, 4, 3).unwrap();
        assert_eq!(set.len(), 40);
        // at most 10 members per group -> each target mixes at most the 4 labels
        assert!(set.targets.values().all(|q| q.entries().len() <= 4));
    }

    #[test]
    fn target_file_round_trip() {
        let samples: Vec<Sample> = (0..6).map(|i| sample(i, i % 3)).collect();
        let emb = mat(&[&[0.0], &[0.1], &[0.2], &[5.0], &[5.1], &[5.2]]);
        let lp = generate_lp(&emb, &samples, &LpParams { k: 2, ..LpParams::default() }, 3, 9).unwrap();
        let sets = [
            lp,
            generate_ls(&samples, 3, 0.1),
            generate_pop(&samples, 0.5, 3).unwrap(),
            one_hot_set(&samples, 3),
            one_hot_set(&[], 3),
        ];
        for set in sets {
            let mut buf = Vec::new();
            write_targets(&mut buf, &set).unwrap();
            assert_eq!(parse_targets(buf.as_slice()).unwrap(), set);
        }
    }

    #[test]
    fn target_file_errors() {
        let set = one_hot_set(&[sample(0, 1), sample(1, 2)], 3);
        let mut buf = Vec::new();
        write_targets(&mut buf, &set).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_targets(truncated.as_bytes()), Err(Error::Truncated(_))));
        let bumped = text.replacen("\t1\n", "\t2\n", 1);
        assert!(matches!(parse_targets(bumped.as_bytes()), Err(Error::Version { found: 2, .. })));
        assert!(parse_targets("".as_bytes()).is_err());
    }
}
