//! Interaction-log ingestion, filtering, windowing and leave-one-out splitting.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default maximum history window.
pub const DEFAULT_MAX_LEN: usize = 20;
/// Default minimum interaction count for users and items.
pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

/// Column layout of an interaction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadOptions {
    pub format: Format,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    pub has_header: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: Format::Tsv,
            user_col: 0,
            item_col: 1,
            time_col: 2,
            has_header: false,
        }
    }
}

impl LoadOptions {
    /// MovieLens-100K `u.data` layout: `user \t item \t rating \t timestamp`.
    pub fn movielens_100k() -> Self {
        Self {
            format: Format::Tsv,
            user_col: 0,
            item_col: 1,
            time_col: 3,
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// A log of (user, item, timestamp) events with dense internal ids.
///
/// Events are grouped by user, and each user's events are ordered by timestamp
/// (ties keep input order). `user_ids[u]` / `item_ids[i]` map internal ids back to
/// the external ids found in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub events: Vec<Event>,
    pub user_ids: Vec<i64>,
    pub item_ids: Vec<i64>,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-user item timelines in chronological order.
    pub fn timelines(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for e in &self.events {
            out[e.user].push(e.item);
        }
        out
    }

    fn from_external(raw: Vec<(i64, i64, i64)>) -> Self {
        let mut user_map: HashMap<i64, usize> = HashMap::new();
        let mut item_map: HashMap<i64, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut events = Vec::with_capacity(raw.len());
        for (u, i, ts) in raw {
            let user = *user_map.entry(u).or_insert_with(|| {
                user_ids.push(u);
                user_ids.len() - 1
            });
            let item = *item_map.entry(i).or_insert_with(|| {
                item_ids.push(i);
                item_ids.len() - 1
            });
            events.push(Event {
                user,
                item,
                timestamp: ts,
            });
        }
        // stable: equal timestamps keep file order
        events.sort_by_key(|e| (e.user, e.timestamp));
        Self {
            events,
            user_ids,
            item_ids,
        }
    }
}

/// Parses an interaction log from any buffered reader.
///
/// Blank lines are skipped. Columns other than user/item/timestamp are ignored.
pub fn parse_interactions<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<InteractionLog> {
    let sep = opts.format.separator();
    let needed = opts.user_col.max(opts.item_col).max(opts.time_col) + 1;
    let mut raw = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if opts.has_header && idx == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() < needed {
            return Err(Error::parse(
                lineno,
                format!("expected at least {needed} fields, found {}", fields.len()),
            ));
        }
        let field = |col: usize, name: &str| -> Result<i64> {
            fields[col].trim().parse::<i64>().map_err(|_| {
                Error::parse(lineno, format!("{name} column is not an integer: {:?}", fields[col]))
            })
        };
        raw.push((
            field(opts.user_col, "user")?,
            field(opts.item_col, "item")?,
            field(opts.time_col, "timestamp")?,
        ));
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("no interaction rows".into()));
    }
    Ok(InteractionLog::from_external(raw))
}

pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), opts)
}

/// Writes a log using external ids, in `user sep item sep timestamp` layout.
pub fn write_interactions(log: &InteractionLog, path: &Path, format: Format) -> Result<()> {
    let sep = format.separator();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &log.events {
        writeln!(
            w,
            "{}{sep}{}{sep}{}",
            log.user_ids[e.user], log.item_ids[e.item], e.timestamp
        )
        .map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Removes users and items with fewer than `min_count` events, repeating until
/// nothing changes, then re-densifies ids (preserving relative id order).
pub fn filter_min_count(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut events = log.events.clone();
    loop {
        let mut user_counts = vec![0usize; log.user_count()];
        let mut item_counts = vec![0usize; log.item_count()];
        for e in &events {
            user_counts[e.user] += 1;
            item_counts[e.item] += 1;
        }
        let before = events.len();
        events.retain(|e| user_counts[e.user] >= min_count && item_counts[e.item] >= min_count);
        if events.len() == before {
            break;
        }
    }
    if events.is_empty() {
        return Err(Error::EmptyDataset { min_count });
    }

    let mut user_new = vec![usize::MAX; log.user_count()];
    let mut item_new = vec![usize::MAX; log.item_count()];
    for e in &events {
        user_new[e.user] = 0;
        item_new[e.item] = 0;
    }
    let densify = |remap: &mut [usize], ext: &[i64]| {
        let mut ids = Vec::new();
        for (old, slot) in remap.iter_mut().enumerate() {
            if *slot != usize::MAX {
                *slot = ids.len();
                ids.push(ext[old]);
            }
        }
        ids
    };
    let user_ids = densify(&mut user_new, &log.user_ids);
    let item_ids = densify(&mut item_new, &log.item_ids);
    for e in &mut events {
        e.user = user_new[e.user];
        e.item = item_new[e.item];
    }
    Ok(InteractionLog {
        events,
        user_ids,
        item_ids,
    })
}

/// One training instance: the items preceding `target` in the user's timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: usize,
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Builds next-item samples from every user timeline.
///
/// For a timeline `i_1..i_n` this emits one sample per position `t >= 2` with the
/// up-to-`max_len` items before `i_t` as history. Sample ids are assigned densely in
/// emission order, so each user's samples are contiguous and chronological.
pub fn build_samples(log: &InteractionLog, max_len: usize) -> Vec<Sample> {
    assert!(max_len >= 1, "max_len must be positive");
    let mut out = Vec::new();
    for (user, items) in log.timelines().into_iter().enumerate() {
        if items.len() < 2 {
            continue;
        }
        for t in 1..items.len() {
            let start = t.saturating_sub(max_len);
            out.push(Sample {
                sample_id: out.len(),
                user,
                history: items[start..t].to_vec(),
                target: items[t],
            });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Leave-one-out split: per user the last sample is test, the second-to-last is
/// validation and everything earlier is training.
///
/// Users with two samples contribute only valid/test; a single sample goes to test.
/// Input samples must be grouped by user in chronological order, which is what
/// [`build_samples`] produces.
pub fn split_leave_one_out(samples: &[Sample]) -> SplitSet {
    let mut split = SplitSet::default();
    let mut start = 0;
    while start < samples.len() {
        let user = samples[start].user;
        let mut end = start;
        while end < samples.len() && samples[end].user == user {
            end += 1;
        }
        let group = &samples[start..end];
        let n = group.len();
        split.test.push(group[n - 1].clone());
        if n >= 2 {
            split.valid.push(group[n - 2].clone());
        }
        if n >= 3 {
            split.train.extend_from_slice(&group[..n - 2]);
        }
        start = end;
    }
    split
}

/// Generates a planted-cluster interaction log.
///
/// Users are assigned round-robin to `n_clusters` latent clusters, each owning a
/// contiguous block of `n_items / n_clusters` items. With probability `1 - noise` an
/// event draws an item from the user's block, with a 1/(r+1) popularity profile over
/// the block's r-th item; otherwise it draws uniformly from all items.
pub fn synth_generate(
    n_users: usize,
    n_items: usize,
    n_clusters: usize,
    events_per_user: usize,
    noise: f64,
    seed: u64,
) -> Result<InteractionLog> {
    if n_users == 0 || n_items == 0 || n_clusters == 0 {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    if !n_items.is_multiple_of(n_clusters) {
        return Err(Error::InvalidArgument(format!(
            "n_clusters={n_clusters} must divide n_items={n_items}"
        )));
    }
    if events_per_user < 5 {
        return Err(Error::InvalidArgument("events_per_user must be at least 5".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise {noise} outside [0, 1]")));
    }
    let block = n_items / n_clusters;
    let mut cumulative = Vec::with_capacity(block);
    let mut acc = 0.0;
    for r in 0..block {
        acc += 1.0 / (r as f64 + 1.0);
        cumulative.push(acc);
    }
    let total = acc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(n_users * events_per_user);
    for user in 0..n_users {
        let cluster = user % n_clusters;
        for t in 0..events_per_user {
            let item = if rng.random::<f64>() < noise {
                rng.random_range(0..n_items)
            } else {
                let x = rng.random::<f64>() * total;
                let r = cumulative.partition_point(|&c| c <= x).min(block - 1);
                cluster * block + r
            };
            events.push(Event {
                user,
                item,
                timestamp: t as i64,
            });
        }
    }
    Ok(InteractionLog {
        events,
        user_ids: (0..n_users as i64).collect(),
        item_ids: (0..n_items as i64).collect(),
    })
}

/// A prepared dataset: splits plus the id maps needed to report external ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub splits: SplitSet,
    pub user_ids: Vec<i64>,
    pub item_ids: Vec<i64>,
}

impl Dataset {
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Self {
        let samples = build_samples(log, max_len);
        Self {
            splits: split_leave_one_out(&samples),
            user_ids: log.user_ids.clone(),
            item_ids: log.item_ids.clone(),
        }
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub const SPLIT_FILES: [&'static str; 3] = ["train.tsv", "valid.tsv", "test.tsv"];
    pub const IDMAP_FILE: &'static str = "idmap.tsv";

    /// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `idmap.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, samples) in Self::SPLIT_FILES
            .iter()
            .zip([&self.splits.train, &self.splits.valid, &self.splits.test])
        {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            write_samples(&mut w, samples).map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join(Self::IDMAP_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_idmap(&mut w, &self.user_ids, &self.item_ids).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Sample>> {
            let path = dir.join(name);
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            parse_samples(BufReader::new(file))
        };
        let splits = SplitSet {
            train: read(Self::SPLIT_FILES[0])?,
            valid: read(Self::SPLIT_FILES[1])?,
            test: read(Self::SPLIT_FILES[2])?,
        };
        let path = dir.join(Self::IDMAP_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let (user_ids, item_ids) = parse_idmap(BufReader::new(file))?;
        let ds = Self {
            splits,
            user_ids,
            item_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks that every sample references ids inside the id maps.
    pub fn validate(&self) -> Result<()> {
        let m = self.item_count();
        let n_users = self.user_count();
        for s in self
            .splits
            .train
            .iter()
            .chain(&self.splits.valid)
            .chain(&self.splits.test)
        {
            if s.user >= n_users {
                return Err(Error::Contract(format!(
                    "sample {} references user {} >= {n_users}",
                    s.sample_id, s.user
                )));
            }
            if s.target >= m || s.history.iter().any(|&i| i >= m) {
                return Err(Error::Contract(format!(
                    "sample {} references an item >= {m}",
                    s.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Writes samples as `sample_id \t user_id \t y \t h1,h2,...`.
pub fn write_samples<W: Write>(w: &mut W, samples: &[Sample]) -> std::io::Result<()> {
    for s in samples {
        write!(w, "{}\t{}\t{}\t", s.sample_id, s.user, s.target)?;
        for (j, h) in s.history.iter().enumerate() {
            if j > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{h}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_samples<R: BufRead>(reader: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::parse(lineno, format!("bad {what}: {s:?}")))
        };
        let history = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3]
                .split(',')
                .map(|h| num(h, "history item"))
                .collect::<Result<Vec<_>>>()?
        };
        if history.is_empty() {
            return Err(Error::parse(lineno, "empty history"));
        }
        out.push(Sample {
            sample_id: num(fields[0], "sample id")?,
            user: num(fields[1], "user id")?,
            target: num(fields[2], "target")?,
            history,
        });
    }
    Ok(out)
}

/// Id-map sidecar: `user \t internal \t external` and `item \t internal \t external` lines.
pub fn write_idmap<W: Write>(w: &mut W, user_ids: &[i64], item_ids: &[i64]) -> std::io::Result<()> {
    for (i, ext) in user_ids.iter().enumerate() {
        writeln!(w, "user\t{i}\t{ext}")?;
    }
    for (i, ext) in item_ids.iter().enumerate() {
        writeln!(w, "item\t{i}\t{ext}")?;
    }
    Ok(())
}

pub fn parse_idmap<R: BufRead>(reader: R) -> Result<(Vec<i64>, Vec<i64>)> {
    let mut users = Vec::new();
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(lineno, "expected 3 fields"));
        }
        let internal: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad internal id"))?;
        let external: i64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(lineno, "bad external id"))?;
        let table = match fields[0] {
            "user" => &mut users,
            "item" => &mut items,
            other => return Err(Error::parse(lineno, format!("unknown id kind {other:?}"))),
        };
        if internal != table.len() {
            return Err(Error::parse(lineno, "internal ids must be dense and ascending"));
        }
        table.push(external);
    }
    Ok((users, items))
}

/// Summary statistics in the shape of a dataset table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub actions_per_user: f64,
    pub actions_per_item: f64,
}

impl LogStats {
    pub fn of(log: &InteractionLog) -> Self {
        let users = log.user_count();
        let items = log.item_count();
        let actions = log.len();
        Self {
            users,
            items,
            actions,
            actions_per_user: actions as f64 / users.max(1) as f64,
            actions_per_item: actions as f64 / items.max(1) as f64,
        }
    }
}
