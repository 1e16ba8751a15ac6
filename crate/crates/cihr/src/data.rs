//! Dataset schemas (JSONL), the synthetic planted-signal generator,
//! train/valid/test splitting, and batching.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use crate::numerics::rng::SplitMix64;
use crate::profile::StaticProfileRaw;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Sample {
    pub id: String,
    pub user_id: String,
    pub text: String,
    pub label: u8,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub description: String,
    pub gender: String,
    pub age: Option<f64>,
    pub region: String,
    pub posts: Vec<String>,
}

impl UserRecord {
    pub fn static_profile(&self) -> StaticProfileRaw {
        StaticProfileRaw {
            description: self.description.clone(),
            gender: crate::profile::Gender::parse(&self.gender),
            age: self.age,
            region: self.region.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: sample label must be 0 or 1, got {label}")]
    BadLabel {
        path: String,
        line: usize,
        label: u8,
    },
    #[error("sample {sample_id} references unknown user {user_id}")]
    UnknownUser {
        sample_id: String,
        user_id: String,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("dataset is empty: {0}")]
    Empty(String),
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let p = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: p.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                path: p.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Samples plus their users, cross-validated.
#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub users: HashMap<String, UserRecord>,
}

impl Dataset {
    pub fn load(samples_path: &Path, users_path: &Path) -> Result<Dataset, DataError> {
        let samples: Vec<Sample> = read_jsonl(samples_path)?;
        let user_list: Vec<UserRecord> = read_jsonl(users_path)?;
        if samples.is_empty() {
            return Err(DataError::Empty(samples_path.display().to_string()));
        }
        let mut seen = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            if s.label > 1 {
                return Err(DataError::BadLabel {
                    path: samples_path.display().to_string(),
                    line: i + 1,
                    label: s.label,
                });
            }
            if !seen.insert(s.id.clone()) {
                return Err(DataError::DuplicateId {
                    kind: "sample",
                    id: s.id.clone(),
                });
            }
        }
        let mut users = HashMap::new();
        for u in user_list {
            if users.insert(u.user_id.clone(), u.clone()).is_some() {
                return Err(DataError::DuplicateId {
                    kind: "user",
                    id: u.user_id,
                });
            }
        }
        for s in &samples {
            if !users.contains_key(&s.user_id) {
                return Err(DataError::UnknownUser {
                    sample_id: s.id.clone(),
                    user_id: s.user_id.clone(),
                });
            }
        }
        Ok(Dataset { samples, users })
    }

    pub fn save(&self, samples_path: &Path, users_path: &Path) -> Result<(), DataError> {
        write_jsonl(samples_path, &self.samples)?;
        let mut users: Vec<&UserRecord> = self.users.values().collect();
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        write_jsonl(users_path, &users)
    }

    pub fn stats(&self) -> String {
        let n = self.samples.len();
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        let avg_words = self
            .samples
            .iter()
            .map(|s| s.text.split_whitespace().count())
            .sum::<usize>() as f64
            / n.max(1) as f64;
        format!(
            "samples={} positive={} negative={} users={} avg_words={:.1}",
            n,
            pos,
            n - pos,
            self.users.len(),
            avg_words
        )
    }

    /// A user's posts with any post equal to the sample text removed, so
    /// the dynamic profile never leaks the text being classified.
    pub fn posts_for(&self, sample: &Sample, n_d: usize) -> Vec<String> {
        let u = &self.users[&sample.user_id];
        u.posts
            .iter()
            .filter(|p| p.as_str() != sample.text)
            .take(n_d)
            .cloned()
            .collect()
    }
}

// ---- synthetic generator -------------------------------------------------

/// The planted humor marker. For style-independent samples the label is
/// exactly its presence; for style-dependent samples the label is its
/// presence XOR the user-style bit.
pub const MARKER: &str = "zinger";

/// Regime tag present in every style-dependent sample. The tag makes the
/// regime recoverable from the text (otherwise a markerless dependent text
/// would be indistinguishable from a markerless independent one and its
/// label undecidable even with the profile), while the label on tagged
/// samples still needs the user-style bit — text alone stays uninformative
/// there.
pub const AMBIG_MARKER: &str = "quip";

const FILLER: &[&str] = &[
    "morning", "coffee", "train", "window", "report", "meeting", "garden",
    "weather", "quiet", "street", "paper", "lunch", "signal", "corner",
    "evening", "music", "letter", "river", "market", "shelf", "pocket",
    "bridge", "lamp", "cloud", "ticket", "stairs", "kitchen", "walk",
    "phone", "desk", "chair", "door", "road", "clock", "book", "glass",
    "plant", "photo", "badge", "queue",
];

/// Tokens that broadcast a user's style bit through every profile channel.
const STYLE_DESC: [&str; 2] = ["measured diarist keeping calm notes", "zany jester chasing absurd bits"];
const STYLE_POST_TOKEN: [&str; 2] = ["plainword", "wildword"];
const REGIONS: [[&str; 2]; 2] = [["plains", "coast"], ["hills", "delta"]];

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_samples: usize,
    /// Share of samples (tagged in-text) whose label is marker XOR
    /// user-style.
    pub rho: f64,
    pub posts_per_user: usize,
    pub seed: u64,
}

/// Whether a synthetic sample's label depends on the user-style bit.
/// Derived from the sample counter exactly as in generation, so tests can
/// recover the partition.
pub fn is_style_dependent(sample_idx: usize, n_samples: usize, rho: f64) -> bool {
    // first ceil(rho * n) samples are style-dependent; assignment to users
    // is shuffled separately so the partition stays uniform
    (sample_idx as f64) < rho * n_samples as f64
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Dataset {
    assert!(cfg.n_users >= 2 && cfg.n_samples >= cfg.n_users);
    assert!((0.0..=1.0).contains(&cfg.rho));
    let mut rng = SplitMix64::new(cfg.seed);

    let mut users = HashMap::new();
    let mut style = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let s = rng.coin() as usize;
        style.push(s);
        let region = REGIONS[s][rng.below(2)].to_string();
        let mut desc = String::from(STYLE_DESC[s]);
        for _ in 0..3 {
            desc.push(' ');
            desc.push_str(FILLER[rng.below(FILLER.len())]);
        }
        let mut posts = Vec::with_capacity(cfg.posts_per_user);
        for _ in 0..cfg.posts_per_user {
            let mut words = vec![STYLE_POST_TOKEN[s].to_string()];
            for _ in 0..4 + rng.below(4) {
                words.push(FILLER[rng.below(FILLER.len())].to_string());
            }
            rng.shuffle(&mut words);
            posts.push(words.join(" "));
        }
        let gender = ["female", "male", "unknown"][rng.below(3)].to_string();
        let age = if rng.next_f64() < 0.1 {
            None
        } else {
            Some(18.0 + rng.below(42) as f64)
        };
        let user_id = format!("u{u:05}");
        users.insert(
            user_id.clone(),
            UserRecord {
                user_id,
                description: desc,
                gender,
                age,
                region,
                posts,
            },
        );
    }

    // every user owns at least one sample; the rest are assigned uniformly
    let mut owners: Vec<usize> = (0..cfg.n_samples)
        .map(|i| {
            if i < cfg.n_users {
                i
            } else {
                rng.below(cfg.n_users)
            }
        })
        .collect();
    rng.shuffle(&mut owners);

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (i, &owner) in owners.iter().enumerate() {
        let dep = is_style_dependent(i, cfg.n_samples, cfg.rho);
        let m = rng.coin() as usize;
        let mut words = Vec::new();
        for _ in 0..7 + rng.below(6) {
            words.push(FILLER[rng.below(FILLER.len())].to_string());
        }
        if dep {
            words.push(AMBIG_MARKER.to_string());
        }
        if m == 1 {
            words.push(MARKER.to_string());
        }
        rng.shuffle(&mut words);
        let label = if dep { (m ^ style[owner]) as u8 } else { m as u8 };
        samples.push(Sample {
            id: format!("s{i:06}"),
            user_id: format!("u{owner:05}"),
            text: words.join(" "),
            label,
        });
    }

    Dataset { samples, users }
}

// ---- splits --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    BySample,
    ByUser,
}

impl SplitMode {
    pub fn parse(s: &str) -> Option<SplitMode> {
        Some(match s {
            "by-sample" => SplitMode::BySample,
            "by-user" => SplitMode::ByUser,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitMode::BySample => "by-sample",
            SplitMode::ByUser => "by-user",
        }
    }
}

/// Index triples into `Dataset::samples`.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic 0.70 / 0.15 / 0.15 split. Counts use floor for valid and
/// test with the remainder in train. By-user keeps all of a user's samples
/// in one part.
pub fn make_split(ds: &Dataset, mode: SplitMode, seed: u64) -> Split {
    let mut rng = SplitMix64::new(seed);
    match mode {
        SplitMode::BySample => {
            let mut idx: Vec<usize> = (0..ds.samples.len()).collect();
            rng.shuffle(&mut idx);
            let n = idx.len();
            let n_valid = (n as f64 * 0.15).floor() as usize;
            let n_test = n_valid;
            let n_train = n - n_valid - n_test;
            Split {
                train: idx[..n_train].to_vec(),
                valid: idx[n_train..n_train + n_valid].to_vec(),
                test: idx[n_train + n_valid..].to_vec(),
            }
        }
        SplitMode::ByUser => {
            let mut user_ids: Vec<&String> = {
                let mut v: Vec<&String> = ds.users.keys().collect();
                v.sort();
                v
            };
            rng.shuffle(&mut user_ids);
            let n = user_ids.len();
            let n_valid = (n as f64 * 0.15).floor() as usize;
            let n_test = n_valid;
            let n_train = n - n_valid - n_test;
            let part_of: HashMap<&String, usize> = user_ids
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let part = if i < n_train {
                        0
                    } else if i < n_train + n_valid {
                        1
                    } else {
                        2
                    };
                    (*u, part)
                })
                .collect();
            let mut parts = [Vec::new(), Vec::new(), Vec::new()];
            for (i, s) in ds.samples.iter().enumerate() {
                parts[part_of[&s.user_id]].push(i);
            }
            let [train, valid, test] = parts;
            Split { train, valid, test }
        }
    }
}

/// Shuffle then chunk into batches of at most `batch_size`.
pub fn batches(indices: &[usize], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0);
    let mut idx = indices.to_vec();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}
