//! Append-only results store.
//!
//! A run directory holds `config.lock` (the resolved config and its hash),
//! one JSON file per finished cell under `records/`, and `index.json`, which
//! is rebuilt from the record files whenever the store is opened. Record
//! files are written to a temporary name, synced and renamed, so a killed
//! process leaves either a complete record or nothing.

use std::fs;
use std::path::{Path, PathBuf};

use diffprobe::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Cell, RunConfig};
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const LOCK_FILE: &str = "config.lock";
pub const INDEX_FILE: &str = "index.json";
pub const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetric {
    /// Report column name.
    pub name: String,
    pub robust_accuracy: Option<f64>,
    /// Samples whose attack raised an error (counted as unperturbed).
    pub sample_errors: usize,
    /// Set when the attack could not run at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub backbone_sha256: String,
    pub cell: Cell,
    pub test_samples: usize,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackMetric>,
    /// Some attack failed outright or on some samples.
    pub partial: bool,
    pub wall_time_secs: f64,
    /// Head checkpoint directory, relative to the run directory.
    pub head_path: String,
}

impl RunRecord {
    pub fn robust(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.name == name).and_then(|a| a.robust_accuracy)
    }

    /// Metrics must be fractions and the schema current.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Store(format!(
                "record {} has schema {}, expected {SCHEMA_VERSION}",
                self.cell.key(),
                self.schema_version
            )));
        }
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.clean_accuracy) || self.attacks.iter().filter_map(|a| a.robust_accuracy).any(|v| !frac(v)) {
            return Err(HarnessError::Store(format!("record {} holds a metric outside [0, 1]", self.cell.key())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub backbone_sha256: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    config_hash: String,
    cells: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    cell: Cell,
    file: String,
}

pub struct RunStore {
    dir: PathBuf,
    lock: LockFile,
}

/// Fails when `dir` already holds a run of a different config. Returns the
/// existing lock, if any.
pub fn check_lock(dir: &Path, hash: &str) -> Result<Option<LockFile>> {
    let lock_path = dir.join(LOCK_FILE);
    if !lock_path.exists() {
        return Ok(None);
    }
    let old = read_lock(&lock_path)?;
    if old.config_hash != hash {
        return Err(HarnessError::Config(format!(
            "{} belongs to config {}, this config hashes to {}; use a fresh --out",
            dir.display(),
            &old.config_hash[..12],
            &hash[..12]
        )));
    }
    Ok(Some(old))
}

impl RunStore {
    /// Opens or creates the store for `cfg`. A directory created for a
    /// different configuration or backbone is refused.
    pub fn open(dir: &Path, cfg: &RunConfig, backbone_sha256: &str) -> Result<Self> {
        fs::create_dir_all(dir.join(RECORDS_DIR))?;
        let hash = config_hash(cfg);
        let lock_path = dir.join(LOCK_FILE);
        if let Some(old) = check_lock(dir, &hash)? {
            if old.backbone_sha256 != backbone_sha256 {
                return Err(HarnessError::Config(format!(
                    "{} was produced with a different backbone; use a fresh --out",
                    dir.display()
                )));
            }
        }
        let lock = LockFile {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            backbone_sha256: backbone_sha256.to_string(),
            config: cfg.clone(),
        };
        // Same hash, so only the sweep axes can differ from the old lock.
        write_atomic(&lock_path, toml::to_string_pretty(&lock).expect("lock serializes").as_bytes())?;
        let store = Self {
            dir: dir.to_path_buf(),
            lock,
        };
        store.rebuild_index()?;
        Ok(store)
    }

    /// Opens an existing store read-only, e.g. for reports.
    pub fn open_existing(dir: &Path) -> Result<Self> {
        let lock_path = dir.join(LOCK_FILE);
        if !lock_path.exists() {
            return Err(HarnessError::Config(format!("{} is not a run directory", dir.display())));
        }
        let lock = read_lock(&lock_path)?;
        let store = Self {
            dir: dir.to_path_buf(),
            lock,
        };
        store.rebuild_index()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn lock(&self) -> &LockFile {
        &self.lock
    }

    pub fn config_hash(&self) -> &str {
        &self.lock.config_hash
    }

    fn record_path(&self, cell: &Cell) -> PathBuf {
        self.dir.join(RECORDS_DIR).join(format!("{}.json", cell.key()))
    }

    pub fn get(&self, cell: &Cell) -> Result<Option<RunRecord>> {
        let p = self.record_path(cell);
        if !p.exists() {
            return Ok(None);
        }
        let r = self.read_record(&p)?;
        Ok(Some(r))
    }

    fn read_record(&self, p: &Path) -> Result<RunRecord> {
        let r: RunRecord = serde_json::from_slice(&fs::read(p)?)
            .map_err(|e| HarnessError::Store(format!("unreadable record {}: {e}", p.display())))?;
        r.validate()?;
        if r.config_hash != self.lock.config_hash {
            return Err(HarnessError::Store(format!(
                "record {} belongs to another config",
                p.display()
            )));
        }
        Ok(r)
    }

    /// Writes a new record. Existing records are never replaced.
    pub fn append(&self, record: &RunRecord) -> Result<()> {
        record.validate()?;
        if record.config_hash != self.lock.config_hash {
            return Err(HarnessError::Store("record hash does not match the store".into()));
        }
        let p = self.record_path(&record.cell);
        if p.exists() {
            return Err(HarnessError::Store(format!("{} is already recorded", record.cell.key())));
        }
        write_atomic(&p, &serde_json::to_vec_pretty(record)?)?;
        Ok(())
    }

    /// All complete records, sorted by cell.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.dir.join(RECORDS_DIR))? {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("json") {
                out.push(self.read_record(&p)?);
            }
        }
        out.sort_by_key(|r| r.cell);
        Ok(out)
    }

    /// Rewrites `index.json` from the record files and clears temporaries
    /// left by an interrupted write.
    pub fn rebuild_index(&self) -> Result<()> {
        for entry in fs::read_dir(self.dir.join(RECORDS_DIR))? {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("tmp") {
                log::warn!("removing incomplete write {}", p.display());
                fs::remove_file(&p)?;
            }
        }
        let cells = self
            .records()?
            .into_iter()
            .map(|r| IndexEntry {
                file: format!("{RECORDS_DIR}/{}.json", r.cell.key()),
                cell: r.cell,
            })
            .collect();
        let index = Index {
            config_hash: self.lock.config_hash.clone(),
            cells,
        };
        write_atomic(&self.dir.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }
}

fn read_lock(path: &Path) -> Result<LockFile> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| HarnessError::Store(format!("unreadable {}: {e}", path.display())))
}
