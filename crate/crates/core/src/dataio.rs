//! Slates, responses, constraint vectors, and dataset plumbing: real-log
//! ingestion into fixed-size slates, response balancing by repetition,
//! deterministic splits, and the on-disk dataset format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

pub type ItemId = usize;
pub type UserId = usize;

/// An ordered, fixed-size list of item ids — the unit of recommendation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Slate {
    items: Vec<ItemId>,
}

impl Slate {
    pub fn new(items: Vec<ItemId>) -> Self {
        Slate { items }
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, slot: usize) -> ItemId {
        self.items[slot]
    }

    pub fn set(&mut self, slot: usize, item: ItemId) {
        self.items[slot] = item;
    }
}

/// Per-slot binary feedback for one slate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResponseVector {
    bits: Vec<u8>,
}

impl ResponseVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::Contract("response bits must be 0 or 1".into()));
        }
        Ok(ResponseVector { bits })
    }

    /// The all-clicked ideal response for slate size `k`.
    pub fn ideal(k: usize) -> Self {
        ResponseVector { bits: vec![1; k] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Total click count.
    pub fn clicks(&self) -> usize {
        self.bits.iter().map(|b| *b as usize).sum()
    }
}

/// Conditioning input for the CVAE models: a `(K+1)`-dim onehot of the click
/// count, optionally concatenated with a frozen user embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintVector {
    response_onehot: Vec<f64>,
    user_part: Option<Vec<f64>>,
}

impl ConstraintVector {
    pub fn response_onehot(&self) -> &[f64] {
        &self.response_onehot
    }

    pub fn user_part(&self) -> Option<&[f64]> {
        self.user_part.as_deref()
    }

    /// The flat network input: onehot followed by the user part, if any.
    pub fn as_input(&self) -> Vec<f64> {
        let mut v = self.response_onehot.clone();
        if let Some(u) = &self.user_part {
            v.extend_from_slice(u);
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.response_onehot.len() + self.user_part.as_ref().map_or(0, |u| u.len())
    }
}

/// Onehot of the click count (index = number of clicks), plus the user
/// embedding when the model is personalized.
pub fn make_constraint(r: &ResponseVector, user_embedding: Option<&[f64]>) -> ConstraintVector {
    let mut onehot = vec![0.0; r.len() + 1];
    onehot[r.clicks()] = 1.0;
    ConstraintVector {
        response_onehot: onehot,
        user_part: user_embedding.map(|u| u.to_vec()),
    }
}

/// One logged slate impression.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub user: Option<UserId>,
    pub slate: Slate,
    pub response: ResponseVector,
}

/// A collection of slate-response records over a fixed item universe.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub n_items: usize,
    pub slate_size: usize,
}

impl Dataset {
    pub fn new(n_items: usize, slate_size: usize) -> Self {
        Dataset {
            records: Vec::new(),
            n_items,
            slate_size,
        }
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.slate.len() != self.slate_size || record.response.len() != self.slate_size {
            return Err(Error::Contract(format!(
                "record has slate/response length {}/{}, expected {}",
                record.slate.len(),
                record.response.len(),
                self.slate_size
            )));
        }
        if let Some(&bad) = record.slate.items().iter().find(|i| **i >= self.n_items) {
            return Err(Error::Lookup(format!(
                "item id {bad} outside universe of {}",
                self.n_items
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record counts keyed by click count (0..=K).
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.slate_size + 1];
        for r in &self.records {
            sizes[r.response.clicks()] += 1;
        }
        sizes
    }
}

/// One row of a rated interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub user: UserId,
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

/// Parse a tab-separated `user<TAB>item<TAB>rating<TAB>timestamp` log.
pub fn parse_interaction_log(reader: impl BufRead) -> Result<Vec<LogEntry>> {
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str, v: &str| Error::Parse {
            line: lineno,
            msg: format!("bad {what} {v:?}"),
        };
        let rating: u8 = fields[2]
            .parse()
            .map_err(|_| parse_err("rating", fields[2]))?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("rating {rating} outside 1..=5"),
            });
        }
        entries.push(LogEntry {
            user: fields[0].parse().map_err(|_| parse_err("user", fields[0]))?,
            item: fields[1].parse().map_err(|_| parse_err("item", fields[1]))?,
            rating,
            timestamp: fields[3]
                .parse()
                .map_err(|_| parse_err("timestamp", fields[3]))?,
        });
    }
    Ok(entries)
}

/// Chunk each user's time-sorted ratings into consecutive slates of size `k`,
/// dropping trailing remainders. A rating at or above `positive_threshold`
/// becomes a click.
pub fn sessions_to_slates(log: &[LogEntry], k: usize, positive_threshold: u8) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Contract("slate size must be positive".into()));
    }
    let n_items = log.iter().map(|e| e.item + 1).max().unwrap_or(0);
    let mut by_user: BTreeMap<UserId, Vec<&LogEntry>> = BTreeMap::new();
    for entry in log {
        by_user.entry(entry.user).or_default().push(entry);
    }
    let mut dataset = Dataset::new(n_items, k);
    for (user, mut entries) in by_user {
        entries.sort_by_key(|e| e.timestamp);
        for chunk in entries.chunks_exact(k) {
            let items = chunk.iter().map(|e| e.item).collect();
            let bits = chunk
                .iter()
                .map(|e| u8::from(e.rating >= positive_threshold))
                .collect();
            dataset.push(Record {
                user: Some(user),
                slate: Slate::new(items),
                response: ResponseVector::new(bits)?,
            })?;
        }
    }
    Ok(dataset)
}

/// What `balance_responses` did to each click-count group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalanceReport {
    pub sizes_before: Vec<usize>,
    pub sizes_after: Vec<usize>,
    /// Groups that needed records but had none to repeat.
    pub empty_groups: Vec<usize>,
}

/// Augment under-represented click-count groups by uniform repetition until
/// each nonempty group has at least half the size of the largest group.
/// Existing records are never removed; copies are appended.
pub fn balance_responses(d: &Dataset, rng: &mut impl Rng) -> (Dataset, BalanceReport) {
    let sizes_before = d.group_sizes();
    let target = sizes_before.iter().max().copied().unwrap_or(0).div_ceil(2);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); d.slate_size + 1];
    for (idx, r) in d.records.iter().enumerate() {
        groups[r.response.clicks()].push(idx);
    }

    let mut out = d.clone();
    let mut empty_groups = Vec::new();
    for (clicks, members) in groups.iter().enumerate() {
        if members.len() >= target {
            continue;
        }
        if members.is_empty() {
            empty_groups.push(clicks);
            continue;
        }
        for _ in members.len()..target {
            let pick = members[rng.gen_range(0..members.len())];
            out.records.push(d.records[pick].clone());
        }
    }
    let report = BalanceReport {
        sizes_before,
        sizes_after: out.group_sizes(),
        empty_groups,
    };
    (out, report)
}

/// Deterministic shuffled split into contiguous train/val/test slices.
pub fn split_dataset(
    d: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f1, f2, f3) = fractions;
    if (f1 + f2 + f3 - 1.0).abs() > 1e-9 || f1 < 0.0 || f2 < 0.0 || f3 < 0.0 {
        return Err(Error::Contract(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng);

    let n = d.len();
    let n_train = (n as f64 * f1).floor() as usize;
    let n_val = (n as f64 * f2).floor() as usize;

    let mut parts = [
        Dataset::new(d.n_items, d.slate_size),
        Dataset::new(d.n_items, d.slate_size),
        Dataset::new(d.n_items, d.slate_size),
    ];
    for (pos, &idx) in order.iter().enumerate() {
        let which = if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
        parts[which].records.push(d.records[idx].clone());
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}

/// Write the dataset line format: a `#slate_size=K items=N` header, then one
/// record per line as `user<TAB>i1,...,iK<TAB>r1...rK` with `-` for an absent
/// user.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#slate_size={} items={}", d.slate_size, d.n_items)?;
    for r in &d.records {
        match r.user {
            Some(u) => write!(w, "{u}")?,
            None => write!(w, "-")?,
        }
        let items: Vec<String> = r.slate.items().iter().map(|i| i.to_string()).collect();
        let bits: String = r.response.bits().iter().map(|b| b.to_string()).collect();
        writeln!(w, "\t{}\t{}", items.join(","), bits)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let header = header?;
    let mut slate_size = None;
    let mut n_items = None;
    for field in header.trim_start_matches('#').split_whitespace() {
        match field.split_once('=') {
            Some(("slate_size", v)) => slate_size = v.parse().ok(),
            Some(("items", v)) => n_items = v.parse().ok(),
            _ => {}
        }
    }
    let (slate_size, n_items) = match (slate_size, n_items) {
        (Some(k), Some(n)) => (k, n),
        _ => {
            return Err(Error::Format(format!(
                "bad dataset header {header:?}; expected #slate_size=K items=N"
            )))
        }
    };

    let mut dataset = Dataset::new(n_items, slate_size);
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let user = if fields[0] == "-" {
            None
        } else {
            Some(fields[0].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad user id {:?}", fields[0]),
            })?)
        };
        let items: Vec<ItemId> = fields[1]
            .split(',')
            .map(|v| {
                v.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad item id {v:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let bits: Vec<u8> = fields[2]
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Parse {
                    line: lineno,
                    msg: format!("bad response bit {other:?}"),
                }),
            })
            .collect::<std::result::Result<_, _>>()?;
        dataset
            .push(Record {
                user,
                slate: Slate::new(items),
                response: ResponseVector::new(bits)?,
            })
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
    }
    Ok(dataset)
}
