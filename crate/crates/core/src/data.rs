//! Rating datasets: the text file format, synthetic low-rank generation,
//! train/test splitting and column sharding across agents.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::matrix::{Dense, MaskedIndexSet};

/// Largest integral id accepted verbatim as an index.
const MAX_INTEGRAL_ID: u64 = u32::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Sparse observed ratings over an `m × n` grid, sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    m: usize,
    n: usize,
    entries: Vec<Rating>,
}

impl RatingMatrix {
    /// Sorts the entries and checks bounds, uniqueness and finiteness.
    pub fn new(m: usize, n: usize, mut entries: Vec<Rating>) -> Result<Self> {
        entries.sort_by_key(|e| (e.user, e.item));
        for e in &entries {
            if e.user >= m || e.item >= n {
                return Err(Error::data(format!(
                    "entry ({}, {}) outside {m}x{n}",
                    e.user, e.item
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::data(format!(
                    "rating at ({}, {}) is not finite",
                    e.user, e.item
                )));
            }
        }
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
        {
            return Err(Error::data(format!(
                "duplicate rating for (user {}, item {})",
                w[0].user, w[0].item
            )));
        }
        Ok(RatingMatrix { m, n, entries })
    }

    pub fn users(&self) -> usize {
        self.m
    }

    pub fn items(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The observed positions, in the same order as [`Self::values`].
    pub fn mask(&self) -> MaskedIndexSet {
        MaskedIndexSet::new(
            self.m,
            self.n,
            self.entries.iter().map(|e| (e.user, e.item)).collect(),
        )
        .expect("rating matrix invariants imply a valid mask")
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(user, item), |e| (e.user, e.item))
            .ok()
            .map(|i| self.entries[i].value)
    }
}

/// Index ↔ original-id table for one axis of a loaded file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    labels: Vec<String>,
    integral: bool,
}

impl IdMap {
    /// True when the file's ids were non-negative integers used directly as indices.
    pub fn is_integral(&self) -> bool {
        self.integral
    }

    /// Original id for a dense index.
    pub fn label(&self, index: usize) -> String {
        if self.integral {
            index.to_string()
        } else {
            self.labels[index].clone()
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        if self.integral {
            label.parse().ok()
        } else {
            self.labels.iter().position(|l| l == label)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRatings {
    pub ratings: RatingMatrix,
    pub users: IdMap,
    pub items: IdMap,
}

fn build_axis(ids: &[&str], min_len: usize) -> (Vec<usize>, usize, IdMap) {
    let integral: Option<Vec<usize>> = ids
        .iter()
        .map(|s| s.parse::<u64>().ok().filter(|&v| v <= MAX_INTEGRAL_ID))
        .map(|v| v.map(|v| v as usize))
        .collect();
    match integral {
        Some(idx) => {
            let len = idx.iter().map(|&i| i + 1).max().unwrap_or(0).max(min_len);
            (
                idx,
                len,
                IdMap {
                    labels: Vec::new(),
                    integral: true,
                },
            )
        }
        None => {
            let mut table: HashMap<&str, usize> = HashMap::new();
            let mut labels = Vec::new();
            let idx = ids
                .iter()
                .map(|&s| {
                    *table.entry(s).or_insert_with(|| {
                        labels.push(s.to_string());
                        labels.len() - 1
                    })
                })
                .collect();
            let len = labels.len();
            (
                idx,
                len,
                IdMap {
                    labels,
                    integral: false,
                },
            )
        }
    }
}

/// Parses `user,item,rating` lines.
///
/// Lines starting with `#` are comments; a `# shape <m> <n>` comment
/// (written by [`save_ratings`]) sets lower bounds on the dimensions so
/// trailing users or items without ratings survive a round trip. An axis
/// whose ids are all non-negative integers uses them as indices directly;
/// otherwise ids are numbered by first occurrence.
pub fn parse_ratings(text: &str) -> Result<LoadedRatings> {
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut values = Vec::new();
    let mut lines = Vec::new();
    let mut shape = (0usize, 0usize);

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(dims) = comment.trim().strip_prefix("shape ") {
                let parsed: Vec<u64> = dims
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(line_no, "malformed shape comment"))?;
                match parsed[..] {
                    [m, n] if m <= MAX_INTEGRAL_ID + 1 && n <= MAX_INTEGRAL_ID + 1 => {
                        shape = (m as usize, n as usize)
                    }
                    _ => return Err(Error::parse(line_no, "shape comment needs two sizes")),
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                line_no,
                format!("expected 3 comma-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(line_no, "empty user or item id"));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid rating {:?}", fields[2])))?;
        if !value.is_finite() {
            return Err(Error::parse(line_no, "rating is not finite"));
        }
        users.push(fields[0]);
        items.push(fields[1]);
        values.push(value);
        lines.push(line_no);
    }

    let (user_idx, m, user_map) = build_axis(&users, shape.0);
    let (item_idx, n, item_map) = build_axis(&items, shape.1);

    let mut seen: HashMap<(usize, usize), usize> = HashMap::with_capacity(values.len());
    let mut entries = Vec::with_capacity(values.len());
    for k in 0..values.len() {
        let key = (user_idx[k], item_idx[k]);
        if let Some(first) = seen.insert(key, lines[k]) {
            return Err(Error::data(format!(
                "duplicate rating for ({}, {}) on lines {first} and {}",
                users[k], items[k], lines[k]
            )));
        }
        entries.push(Rating {
            user: key.0,
            item: key.1,
            value: values[k],
        });
    }

    Ok(LoadedRatings {
        ratings: RatingMatrix::new(m, n, entries)?,
        users: user_map,
        items: item_map,
    })
}

pub fn load_ratings(path: &Path) -> Result<LoadedRatings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text)
}

/// Renders ratings with indices as ids and shortest round-trip float formatting.
pub fn format_ratings(ratings: &RatingMatrix) -> String {
    let mut out = String::with_capacity(ratings.len() * 16 + 32);
    let _ = writeln!(out, "# shape {} {}", ratings.m, ratings.n);
    for e in &ratings.entries {
        let _ = writeln!(out, "{},{},{:?}", e.user, e.item, e.value);
    }
    out
}

pub fn save_ratings(ratings: &RatingMatrix, path: &Path) -> Result<()> {
    write_atomic(path, format_ratings(ratings).as_bytes())
}

/// Dense ground truth as a fully observed rating matrix.
pub fn dense_to_ratings(truth: &Dense) -> RatingMatrix {
    let entries = (0..truth.rows())
        .flat_map(|u| {
            (0..truth.cols()).map(move |i| Rating {
                user: u,
                item: i,
                value: truth.get(u, i),
            })
        })
        .collect();
    RatingMatrix {
        m: truth.rows(),
        n: truth.cols(),
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    pub observe_fraction: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Samples `truth = A·B` with standard-normal factors, observes a uniformly
/// random subset of `round(fraction·m·n)` cells, and adds Gaussian noise.
///
/// Draw order from the seeded generator: A, B, observed cells, noise.
pub fn synth_low_rank(spec: &SynthSpec) -> Result<(RatingMatrix, Dense)> {
    let SynthSpec {
        users: m,
        items: n,
        rank: r,
        observe_fraction,
        noise_sd,
        seed,
    } = *spec;
    if !(observe_fraction > 0.0 && observe_fraction <= 1.0) {
        return Err(Error::config(format!(
            "observe fraction must be in (0, 1], got {observe_fraction}"
        )));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::config(format!(
            "rank must be in 1..={} for a {m}x{n} matrix, got {r}",
            m.min(n)
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::config(format!("noise sd must be >= 0, got {noise_sd}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let a = Dense::from_fn(m, r, |_, _| normal());
    let b = Dense::from_fn(r, n, |_, _| normal());
    let truth = a.matmul(&b)?;

    let total = m * n;
    let count = ((observe_fraction * total as f64).round() as usize).clamp(1, total);
    let mut cells = index::sample(&mut rng, total, count).into_vec();
    cells.sort_unstable();

    let entries = cells
        .into_iter()
        .map(|cell| {
            let (user, item) = (cell / n, cell % n);
            let mut value = truth.get(user, item);
            if noise_sd > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                value += noise_sd * z;
            }
            Rating { user, item, value }
        })
        .collect();
    Ok((RatingMatrix { m, n, entries }, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: RatingMatrix,
    pub test: RatingMatrix,
    pub seed: u64,
}

fn check_split_args(ratings: &RatingMatrix, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    if ratings.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 ratings to split, have {}",
            ratings.len()
        )));
    }
    Ok(())
}

fn assemble(ratings: &RatingMatrix, in_train: &[bool], seed: u64) -> SplitDataset {
    let (train, test): (Vec<_>, Vec<_>) = ratings
        .entries
        .iter()
        .zip(in_train)
        .partition(|(_, &t)| t);
    let pick = |v: Vec<(&Rating, &bool)>| RatingMatrix {
        m: ratings.m,
        n: ratings.n,
        entries: v.into_iter().map(|(e, _)| *e).collect(),
    };
    SplitDataset {
        train: pick(train),
        test: pick(test),
        seed,
    }
}

/// Uniform split of the observed entries: `round(fraction·N)` go to train
/// (kept within `1..N` so neither side is empty).
pub fn split(ratings: &RatingMatrix, fraction: f64, seed: u64) -> Result<SplitDataset> {
    check_split_args(ratings, fraction)?;
    let total = ratings.len();
    let n_train = ((fraction * total as f64).round() as usize).clamp(1, total - 1);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; total];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    Ok(assemble(ratings, &in_train, seed))
}

/// Per-user variant of [`split`]: each user's entries are shuffled and
/// `round(fraction·count)` of them go to train.
pub fn split_stratified(ratings: &RatingMatrix, fraction: f64, seed: u64) -> Result<SplitDataset> {
    check_split_args(ratings, fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ratings.len()];
    let mut start = 0;
    while start < ratings.len() {
        let user = ratings.entries[start].user;
        let end = start
            + ratings.entries[start..]
                .iter()
                .take_while(|e| e.user == user)
                .count();
        let mut order: Vec<usize> = (start..end).collect();
        order.shuffle(&mut rng);
        let k = (fraction * order.len() as f64).round() as usize;
        for &i in &order[..k] {
            in_train[i] = true;
        }
        start = end;
    }
    if in_train.iter().all(|&t| t) || in_train.iter().all(|&t| !t) {
        return Err(Error::data(
            "stratified split left train or test empty; use the global split",
        ));
    }
    Ok(assemble(ratings, &in_train, seed))
}

/// One agent's contiguous block of columns, with items re-based to the block start.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub agent: usize,
    pub start: usize,
    pub end: usize,
    pub local: RatingMatrix,
}

impl Shard {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Contiguous column ranges `[start, end)` for `agents` shards of `n` columns;
/// the first `n mod agents` ranges are one column wider.
pub fn column_ranges(n: usize, agents: usize) -> Result<Vec<(usize, usize)>> {
    if agents == 0 || agents > n {
        return Err(Error::config(format!(
            "agent count must be in 1..={n} (one column each at least), got {agents}"
        )));
    }
    let base = n / agents;
    let extra = n % agents;
    let mut start = 0;
    Ok((0..agents)
        .map(|a| {
            let width = base + usize::from(a < extra);
            let range = (start, start + width);
            start += width;
            range
        })
        .collect())
}

pub fn partition_columns(ratings: &RatingMatrix, agents: usize) -> Result<Vec<Shard>> {
    let ranges = column_ranges(ratings.n, agents)?;
    let mut buckets: Vec<Vec<Rating>> = vec![Vec::new(); agents];
    for e in &ratings.entries {
        let a = owner_of(&ranges, e.item);
        buckets[a].push(Rating {
            item: e.item - ranges[a].0,
            ..*e
        });
    }
    Ok(ranges
        .into_iter()
        .zip(buckets)
        .enumerate()
        .map(|(agent, ((start, end), entries))| Shard {
            agent,
            start,
            end,
            local: RatingMatrix {
                m: ratings.m,
                n: end - start,
                entries,
            },
        })
        .collect())
}

/// Index of the range containing `col`.
pub fn owner_of(ranges: &[(usize, usize)], col: usize) -> usize {
    ranges.partition_point(|&(_, end)| end <= col)
}
