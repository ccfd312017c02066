use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::DataError;

/// One parsed input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    /// Dense item index, `>= 1`.
    pub item: usize,
    pub timestamp: i64,
    /// Chronological position within the user's unfiltered history.
    pub raw_position: usize,
}

/// Filtered, densely re-indexed interactions grouped by user.
///
/// Users are indexed `0..num_users()`. Items are indexed `1..=num_items()`;
/// index 0 is the padding item and never appears in a history.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    users: Vec<String>,
    items: Vec<String>,
    histories: Vec<Vec<Interaction>>,
    user_lookup: HashMap<String, usize>,
}

impl InteractionLog {
    /// Groups, sorts, filters to a fixed point, and re-indexes raw records.
    pub fn from_records(records: &[RawRecord], min_count: usize) -> Result<Self, DataError> {
        // raw ids in first-appearance order
        let mut user_raw: Vec<&str> = Vec::new();
        let mut user_of: HashMap<&str, usize> = HashMap::new();
        let mut item_raw: Vec<&str> = Vec::new();
        let mut item_of: HashMap<&str, usize> = HashMap::new();
        let mut rec_user = Vec::with_capacity(records.len());
        let mut rec_item = Vec::with_capacity(records.len());
        for r in records {
            let u = *user_of.entry(&r.user).or_insert_with(|| {
                user_raw.push(&r.user);
                user_raw.len() - 1
            });
            let i = *item_of.entry(&r.item).or_insert_with(|| {
                item_raw.push(&r.item);
                item_raw.len() - 1
            });
            rec_user.push(u);
            rec_item.push(i);
        }

        // chronological position per user before any filtering; ties keep input order
        let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); user_raw.len()];
        for (idx, &u) in rec_user.iter().enumerate() {
            per_user[u].push(idx);
        }
        let mut raw_position = vec![0usize; records.len()];
        for recs in &mut per_user {
            recs.sort_by_key(|&idx| records[idx].timestamp);
            for (pos, &idx) in recs.iter().enumerate() {
                raw_position[idx] = pos;
            }
        }

        let mut alive = vec![true; records.len()];
        loop {
            let mut ucount = vec![0usize; user_raw.len()];
            let mut icount = vec![0usize; item_raw.len()];
            for idx in 0..records.len() {
                if alive[idx] {
                    ucount[rec_user[idx]] += 1;
                    icount[rec_item[idx]] += 1;
                }
            }
            let mut changed = false;
            for idx in 0..records.len() {
                if alive[idx] && (ucount[rec_user[idx]] < min_count || icount[rec_item[idx]] < min_count) {
                    alive[idx] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut dense_user = vec![usize::MAX; user_raw.len()];
        let mut dense_item = vec![usize::MAX; item_raw.len()];
        let mut users = Vec::new();
        let mut items = Vec::new();
        for idx in 0..records.len() {
            if !alive[idx] {
                continue;
            }
            let (u, i) = (rec_user[idx], rec_item[idx]);
            if dense_user[u] == usize::MAX {
                dense_user[u] = users.len();
                users.push(user_raw[u].to_string());
            }
            if dense_item[i] == usize::MAX {
                items.push(item_raw[i].to_string());
                dense_item[i] = items.len();
            }
        }
        if users.is_empty() {
            return Err(DataError::Empty { min_count });
        }

        let mut histories = vec![Vec::new(); users.len()];
        for (u, recs) in per_user.iter().enumerate() {
            if dense_user[u] == usize::MAX {
                continue;
            }
            histories[dense_user[u]] = recs
                .iter()
                .filter(|&&idx| alive[idx])
                .map(|&idx| Interaction {
                    item: dense_item[rec_item[idx]],
                    timestamp: records[idx].timestamp,
                    raw_position: raw_position[idx],
                })
                .collect();
        }
        let user_lookup = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Ok(Self {
            users,
            items,
            histories,
            user_lookup,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_records(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    pub fn history(&self, user: usize) -> &[Interaction] {
        &self.histories[user]
    }

    pub fn history_items(&self, user: usize) -> Vec<usize> {
        self.histories[user].iter().map(|x| x.item).collect()
    }

    pub fn user_raw(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn item_raw(&self, item: usize) -> &str {
        &self.items[item - 1]
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_lookup.get(raw).copied()
    }
}

/// Parses `user<sep>item<sep>timestamp` lines, `<sep>` being a tab or comma.
/// Blank lines are skipped.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Vec<RawRecord>, DataError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let sep = if text.contains('\t') { '\t' } else { ',' };
        let fields: Vec<&str> = text.split(sep).map(str::trim).collect();
        let err = |message: String| DataError::Parse {
            line: n + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty user or item id".into()));
        }
        let timestamp = fields[2]
            .parse::<i64>()
            .map_err(|_| err(format!("timestamp {:?} is not an integer", fields[2])))?;
        out.push(RawRecord {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, min_count: usize) -> Result<InteractionLog, DataError> {
    let records = parse_interactions(BufReader::new(File::open(path)?))?;
    InteractionLog::from_records(&records, min_count)
}
