//! Interaction ingestion: parsing, review cleaning, K-core filtering, dense
//! id assignment, random splitting and the REMB review-embedding file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed interaction before id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub review_text: Option<String>,
}

/// Reads `user_key<TAB>item_key[<TAB>review_text]` lines.
pub fn load_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), &path.display().to_string())
}

pub fn parse_interactions<R: BufRead>(reader: R, name: &str) -> Result<Vec<RawInteraction>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            file: name.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |message: &str| Error::Parse {
            file: name.to_string(),
            line: lineno,
            message: message.to_string(),
        };
        if !(2..=3).contains(&fields.len()) {
            return Err(bad(&format!(
                "expected 2 or 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() {
            return Err(bad("empty user key"));
        }
        if fields[1].is_empty() {
            return Err(bad("empty item key"));
        }
        let review_text = fields
            .get(2)
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string());
        rows.push(RawInteraction {
            user_key: fields[0].to_string(),
            item_key: fields[1].to_string(),
            review_text,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty(name.to_string()));
    }
    Ok(rows)
}

/// Drops review texts that contain no letters. The interaction itself is kept.
pub fn clean_reviews(rows: Vec<RawInteraction>) -> Vec<RawInteraction> {
    rows.into_iter()
        .map(|mut row| {
            if let Some(text) = &row.review_text {
                if !text.chars().any(char::is_alphabetic) {
                    row.review_text = None;
                }
            }
            row
        })
        .collect()
}

/// Keeps the first occurrence of every (user, item) pair.
pub fn dedup_interactions(rows: Vec<RawInteraction>) -> Vec<RawInteraction> {
    let mut seen = HashSet::new();
    rows.into_iter()
        .filter(|r| seen.insert((r.user_key.clone(), r.item_key.clone())))
        .collect()
}

/// Iteratively deletes rows whose user or item has fewer than `k` interactions
/// until no such row is left. Row order is preserved.
pub fn kcore_filter(rows: Vec<RawInteraction>, k: usize) -> Result<Vec<RawInteraction>> {
    if k == 0 {
        return Err(Error::invalid("k-core requires k >= 1"));
    }
    let mut alive = vec![true; rows.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (row, _) in rows.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(&row.user_key).or_default() += 1;
            *item_deg.entry(&row.item_key).or_default() += 1;
        }
        let mut changed = false;
        for (row, a) in rows.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[row.user_key.as_str()] < k || item_deg[row.item_key.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(rows
        .into_iter()
        .zip(alive)
        .filter_map(|(r, a)| a.then_some(r))
        .collect())
}

/// Keeps the rows of `n` users drawn uniformly without replacement.
pub fn sample_users(rows: Vec<RawInteraction>, n: usize, seed: u64) -> Vec<RawInteraction> {
    let mut seen = HashSet::new();
    let mut users: Vec<&str> = rows
        .iter()
        .filter(|r| seen.insert(r.user_key.as_str()))
        .map(|r| r.user_key.as_str())
        .collect();
    if n >= users.len() {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let keep: HashSet<String> = users[..n].iter().map(|u| u.to_string()).collect();
    rows.into_iter()
        .filter(|r| keep.contains(&r.user_key))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub item: usize,
    pub review: Option<usize>,
    pub split: Split,
}

/// Id-mapped, split-tagged interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    pub num_users: usize,
    pub num_items: usize,
    pub num_reviews: usize,
    pub triples: Vec<Triple>,
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    /// Review text (the review's original key), indexed by review id.
    pub review_keys: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Shuffles the interactions with `seed` and tags them train/valid/test.
///
/// Dense ids follow first appearance in `rows`, independent of the shuffle.
/// Rows must have unique (user, item) pairs.
pub fn split(rows: &[RawInteraction], ratios: SplitRatios, seed: u64) -> Result<InteractionTable> {
    let sum = ratios.train + ratios.valid + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.valid, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be non-negative and sum to 1, got {sum}")));
    }
    if rows.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 interactions to populate train/valid/test, got {}",
            rows.len()
        )));
    }

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut review_keys = Vec::new();
    let mut pairs = HashSet::new();
    let mut triples = Vec::with_capacity(rows.len());
    for row in rows {
        let user = *user_ids.entry(&row.user_key).or_insert_with(|| {
            user_keys.push(row.user_key.clone());
            user_keys.len() - 1
        });
        let item = *item_ids.entry(&row.item_key).or_insert_with(|| {
            item_keys.push(row.item_key.clone());
            item_keys.len() - 1
        });
        if !pairs.insert((user, item)) {
            return Err(Error::invalid(format!(
                "duplicate interaction ({}, {})",
                row.user_key, row.item_key
            )));
        }
        let review = row.review_text.as_ref().map(|text| {
            review_keys.push(text.clone());
            review_keys.len() - 1
        });
        triples.push(Triple {
            user,
            item,
            review,
            split: Split::Train,
        });
    }

    let n = rows.len();
    let mut counts = [0usize; 3];
    counts[1] = (n as f64 * ratios.valid).round() as usize;
    counts[2] = (n as f64 * ratios.test).round() as usize;
    counts[0] = n.saturating_sub(counts[1] + counts[2]);
    if counts[1] + counts[2] > n {
        counts[2] = n - counts[1];
    }
    for s in 0..3 {
        if counts[s] == 0 {
            let largest = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[largest] -= 1;
            counts[s] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (pos, &idx) in order.iter().enumerate() {
        triples[idx].split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Valid
        } else {
            Split::Test
        };
    }

    Ok(InteractionTable {
        num_users: user_keys.len(),
        num_items: item_keys.len(),
        num_reviews: review_keys.len(),
        triples,
        user_keys,
        item_keys,
        review_keys,
    })
}

impl InteractionTable {
    pub fn triples_in(&self, split: Split) -> impl Iterator<Item = &Triple> + '_ {
        self.triples.iter().filter(move |t| t.split == split)
    }

    /// Sorted item ids per user for one split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for t in self.triples_in(split) {
            out[t.user].push(t.item);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    /// Writes split files and the three id-map sidecars into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_map(&dir.join("users.map.tsv"), &self.user_keys)?;
        write_map(&dir.join("items.map.tsv"), &self.item_keys)?;
        write_map(&dir.join("reviews.map.tsv"), &self.review_keys)?;
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let mut w = create(&path)?;
            for t in self.triples_in(split) {
                let review = t.review.map(|r| r.to_string()).unwrap_or_default();
                writeln!(w, "{}\t{}\t{}", t.user, t.item, review).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a directory written by [`InteractionTable::write_dir`].
    ///
    /// Triples come back grouped by split (train, valid, test).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let user_keys = read_map(&dir.join("users.map.tsv"))?;
        let item_keys = read_map(&dir.join("items.map.tsv"))?;
        let review_keys = read_map(&dir.join("reviews.map.tsv"))?;
        let mut triples = Vec::new();
        let mut pairs = HashSet::new();
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            let name = path.display().to_string();
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (idx, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let bad = |message: String| Error::Parse {
                    file: name.clone(),
                    line: idx + 1,
                    message,
                };
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    return Err(bad(format!("expected 3 fields, found {}", fields.len())));
                }
                let parse = |s: &str, bound: usize, what: &str| -> Result<usize> {
                    let v: usize = s.parse().map_err(|_| bad(format!("bad {what} id {s:?}")))?;
                    if v >= bound {
                        return Err(bad(format!("{what} id {v} out of range")));
                    }
                    Ok(v)
                };
                let user = parse(fields[0], user_keys.len(), "user")?;
                let item = parse(fields[1], item_keys.len(), "item")?;
                let review = if fields[2].is_empty() {
                    None
                } else {
                    Some(parse(fields[2], review_keys.len(), "review")?)
                };
                if !pairs.insert((user, item)) {
                    return Err(bad(format!("duplicate pair ({user}, {item})")));
                }
                triples.push(Triple {
                    user,
                    item,
                    review,
                    split,
                });
            }
        }
        Ok(InteractionTable {
            num_users: user_keys.len(),
            num_items: item_keys.len(),
            num_reviews: review_keys.len(),
            triples,
            user_keys,
            item_keys,
            review_keys,
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_map(path: &Path, keys: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for (id, key) in keys.iter().enumerate() {
        writeln!(w, "{id}\t{key}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let bad = |message: &str| Error::Parse {
            file: path.display().to_string(),
            line: idx + 1,
            message: message.to_string(),
        };
        let (id, key) = line.split_once('\t').ok_or_else(|| bad("expected dense_id<TAB>key"))?;
        let id: usize = id.parse().map_err(|_| bad("bad dense id"))?;
        if id != keys.len() {
            return Err(bad("dense ids must be consecutive from 0"));
        }
        keys.push(key.to_string());
    }
    Ok(keys)
}

const REMB_MAGIC: &[u8; 4] = b"REMB";
const REMB_VERSION: u32 = 1;

/// Review id to pretrained vector map, as stored in a REMB file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewEmbeddingStore {
    dim: usize,
    vectors: BTreeMap<u64, Vec<f32>>,
}

impl ReviewEmbeddingStore {
    pub fn new(dim: usize) -> Self {
        ReviewEmbeddingStore {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, review: u64) -> Option<&[f32]> {
        self.vectors.get(&review).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        self.vectors.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn insert(&mut self, review: u64, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { review, index });
        }
        if self.vectors.contains_key(&review) {
            return Err(Error::DuplicateReview(review));
        }
        self.vectors.insert(review, vector);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(REMB_MAGIC);
        out.extend_from_slice(&REMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in &self.vectors {
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format(format!("truncated {what}")));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4, "magic")? != REMB_MAGIC {
            return Err(Error::Format("bad magic, expected REMB".into()));
        }
        let version = u32::from_le_bytes(take(4, "header")?.try_into().unwrap());
        if version != REMB_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8, "header")?.try_into().unwrap());
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        let mut store = ReviewEmbeddingStore::new(dim);
        for rec in 0..count {
            let id = u64::from_le_bytes(
                take(8, &format!("record {rec}"))?.try_into().unwrap(),
            );
            let raw = take(4 * dim, &format!("record {rec}"))?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(id, vector)?;
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after {count} records", cur.len())));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embedding_file(path: &Path) -> Result<ReviewEmbeddingStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    ReviewEmbeddingStore::from_bytes(&bytes)
}
