//! Implicit-feedback interaction data: ingestion, degree filtering and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Pair = (u32, u32);

/// Dense-index to raw-id lookup, one table per side.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl IdMap {
    pub fn user_index(&self, raw: u64) -> Option<u32> {
        self.users.binary_search(&raw).ok().map(|i| i as u32)
    }

    pub fn item_index(&self, raw: u64) -> Option<u32> {
        self.items.binary_search(&raw).ok().map(|i| i as u32)
    }
}

/// Interactions over densely indexed users and items.
///
/// Freshly loaded datasets hold every interaction in `train`; [`split_dataset`]
/// redistributes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
    pub ids: IdMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl InteractionDataset {
    /// Builds a dataset from already dense pairs, putting everything in `train`.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[Pair]) -> Self {
        let mut train: Vec<Pair> = pairs.to_vec();
        train.sort_unstable();
        train.dedup();
        InteractionDataset {
            num_users,
            num_items,
            train,
            val: Vec::new(),
            test: Vec::new(),
            ids: IdMap {
                users: (0..num_users as u64).collect(),
                items: (0..num_items as u64).collect(),
            },
        }
    }

    pub fn split(&self, which: Split) -> &[Pair] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Per-user sorted item lists for one split.
    pub fn positives(&self, which: Split) -> Vec<Vec<u32>> {
        let mut sets = vec![Vec::new(); self.num_users];
        for &(u, v) in self.split(which) {
            sets[u as usize].push(v);
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }

    pub fn train_user_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_users];
        for &(u, _) in &self.train {
            d[u as usize] += 1;
        }
        d
    }

    pub fn train_item_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_items];
        for &(_, v) in &self.train {
            d[v as usize] += 1;
        }
        d
    }

    /// Checks index ranges and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for which in [Split::Train, Split::Val, Split::Test] {
            for &(u, v) in self.split(which) {
                if u as usize >= self.num_users || v as usize >= self.num_items {
                    return Err(Error::InvalidArgument(format!(
                        "interaction ({u}, {v}) outside {}x{}",
                        self.num_users, self.num_items
                    )));
                }
                if !seen.insert((u, v)) {
                    return Err(Error::InvalidArgument(format!(
                        "interaction ({u}, {v}) appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses the tab separated interaction format. Returns raw (user, item) ids in file order.
pub fn parse_interactions(path: &Path, text: &str) -> Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next_id = |what: &str| -> Result<u64> {
            let field = fields.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("missing {what} column"),
            })?;
            field.parse::<u64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad {what} id `{field}`: {e}"),
            })
        };
        let user = next_id("user")?;
        let item = next_id("item")?;
        out.push((user, item));
    }
    Ok(out)
}

/// Reads an interaction file, binarizes it and applies iterative k-core filtering.
pub fn load_interactions(path: &Path, min_degree: usize) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw = parse_interactions(path, &text)?;
    from_raw_pairs(raw, min_degree)
}

/// Filters raw pairs until every user and item has at least `min_degree`
/// interactions, then re-indexes both sides densely in ascending raw-id order.
pub fn from_raw_pairs(raw: Vec<(u64, u64)>, min_degree: usize) -> Result<InteractionDataset> {
    let mut pairs: Vec<(u64, u64)> = raw;
    pairs.sort_unstable();
    pairs.dedup();

    loop {
        let mut ud: BTreeMap<u64, usize> = BTreeMap::new();
        let mut id: BTreeMap<u64, usize> = BTreeMap::new();
        for &(u, v) in &pairs {
            *ud.entry(u).or_default() += 1;
            *id.entry(v).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|(u, v)| ud[u] >= min_degree && id[v] >= min_degree);
        if pairs.len() == before {
            break;
        }
    }
    if pairs.is_empty() {
        return Err(Error::DatasetEmpty { min_degree });
    }

    let users: Vec<u64> = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<u64> = pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let ids = IdMap { users, items };
    let mut train: Vec<Pair> = pairs
        .iter()
        .map(|&(u, v)| (ids.user_index(u).unwrap(), ids.item_index(v).unwrap()))
        .collect();
    train.sort_unstable();
    Ok(InteractionDataset {
        num_users: ids.users.len(),
        num_items: ids.items.len(),
        train,
        val: Vec::new(),
        test: Vec::new(),
        ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const DEFAULT: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.05,
        test: 0.25,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = [self.train, self.val, self.test].iter().all(|r| r.is_finite() && *r >= 0.0);
        if !ok || self.train <= 0.0 || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be non-negative with positive train share and sum to 1, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    PerUser,
    Global,
}

fn held_out_counts(n: usize, ratios: &SplitRatios) -> (usize, usize) {
    if n <= 1 {
        return (0, 0);
    }
    let mut val = (n as f64 * ratios.val).round() as usize;
    let mut test = (n as f64 * ratios.test).round() as usize;
    // keep at least one training interaction
    while val + test >= n {
        if test >= val && test > 0 {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    (val, test)
}

/// Randomly splits every interaction currently in the dataset into train/val/test.
///
/// Deterministic for a fixed seed. Every user keeps at least one training
/// interaction; items left without one get a held-out interaction moved back.
pub fn split_dataset(
    ds: &InteractionDataset,
    ratios: SplitRatios,
    mode: SplitMode,
    seed: u64,
) -> Result<InteractionDataset> {
    ratios.validate()?;
    let mut rng = rng::stream(seed, rng::SPLIT);
    let mut all: Vec<Pair> = ds.train.iter().chain(&ds.val).chain(&ds.test).copied().collect();
    all.sort_unstable();

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::PerUser => {
            let mut start = 0;
            while start < all.len() {
                let user = all[start].0;
                let end = start + all[start..].iter().take_while(|p| p.0 == user).count();
                let mut group = all[start..end].to_vec();
                group.shuffle(&mut rng);
                let (nv, nt) = held_out_counts(group.len(), &ratios);
                test.extend_from_slice(&group[..nt]);
                val.extend_from_slice(&group[nt..nt + nv]);
                train.extend_from_slice(&group[nt + nv..]);
                start = end;
            }
        }
        SplitMode::Global => {
            let mut shuffled = all.clone();
            shuffled.shuffle(&mut rng);
            let (nv, nt) = held_out_counts(shuffled.len(), &ratios);
            test.extend_from_slice(&shuffled[..nt]);
            val.extend_from_slice(&shuffled[nt..nt + nv]);
            train.extend_from_slice(&shuffled[nt + nv..]);
        }
    }

    restore_training_coverage(ds.num_users, ds.num_items, &mut train, &mut val, &mut test);
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(InteractionDataset {
        num_users: ds.num_users,
        num_items: ds.num_items,
        train,
        val,
        test,
        ids: ds.ids.clone(),
    })
}

/// Moves the smallest held-out interaction of any node that lost all its
/// training interactions back into train.
fn restore_training_coverage(
    num_users: usize,
    num_items: usize,
    train: &mut Vec<Pair>,
    val: &mut Vec<Pair>,
    test: &mut Vec<Pair>,
) {
    let mut user_seen = vec![false; num_users];
    let mut item_seen = vec![false; num_items];
    for &(u, v) in train.iter() {
        user_seen[u as usize] = true;
        item_seen[v as usize] = true;
    }
    for held in [&mut *test, &mut *val] {
        held.sort_unstable();
        let mut keep = Vec::with_capacity(held.len());
        for &(u, v) in held.iter() {
            if !user_seen[u as usize] || !item_seen[v as usize] {
                user_seen[u as usize] = true;
                item_seen[v as usize] = true;
                train.push((u, v));
            } else {
                keep.push((u, v));
            }
        }
        *held = keep;
    }
}

/// Sidecar describing how a split was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub mode: SplitMode,
    pub num_users: usize,
    pub num_items: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitManifest {
    pub fn new(ds: &InteractionDataset, ratios: SplitRatios, mode: SplitMode, seed: u64) -> Self {
        SplitManifest {
            seed,
            ratios,
            mode,
            num_users: ds.num_users,
            num_items: ds.num_items,
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        }
    }
}

fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut buf = Vec::with_capacity(pairs.len() * 12);
    for &(u, v) in pairs {
        writeln!(buf, "{u}\t{v}").unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_ids(path: &Path, ids: &[u64]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# index\traw_id").unwrap();
    for (i, raw) in ids.iter().enumerate() {
        writeln!(buf, "{i}\t{raw}").unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv`, id maps and `split.json` into `dir`.
pub fn save_prepared(dir: &Path, ds: &InteractionDataset, manifest: &SplitManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pairs(&dir.join("train.tsv"), &ds.train)?;
    write_pairs(&dir.join("val.tsv"), &ds.val)?;
    write_pairs(&dir.join("test.tsv"), &ds.test)?;
    write_ids(&dir.join("user_ids.tsv"), &ds.ids.users)?;
    write_ids(&dir.join("item_ids.tsv"), &ds.ids.items)?;
    let path = dir.join("split.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
