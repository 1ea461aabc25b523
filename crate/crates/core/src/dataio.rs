//! Corpus manifests, exact-duplicate removal, stratified splitting and client
//! partitioning.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("manifest json {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// SHA-256 content digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> std::result::Result<Self, String> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 32] =
            bytes.try_into().map_err(|b: Vec<u8>| format!("digest has {} bytes, expected 32", b.len()))?;
        Ok(Self(arr))
    }

    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub path: PathBuf,
    pub label: usize,
    #[serde(rename = "sha256")]
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { class_names, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn empty_like(&self) -> Self {
        Self { class_names: self.class_names.clone(), entries: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(DataError::Manifest(format!(
                    "entry {} has label {} but only {} classes",
                    e.sample_id,
                    e.label,
                    self.class_names.len()
                )));
            }
            if !ids.insert(e.sample_id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate sample id {}", e.sample_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    /// Resolve relative entry paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for e in &mut self.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
    }
}

pub fn hash_file(path: &Path) -> Result<Digest> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(Digest(hasher.finalize().into()))
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm") | Some("ppm")
    )
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(io_err)? {
        out.push(entry.map_err(io_err)?.path());
    }
    out.sort();
    Ok(out)
}

/// Build a manifest from `root/<class_name>/*.{pgm,ppm}`.
///
/// Classes are the sorted subdirectory names; sample ids are `class/file`.
pub fn ingest_dir(root: &Path) -> Result<Manifest> {
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::Manifest(format!("{} has no class subdirectories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for file in sorted_dir(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)) {
            let fname = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
            files.push((format!("{name}/{fname}"), file, label));
        }
        class_names.push(name);
    }
    let digests: Vec<Digest> =
        files.par_iter().map(|(_, path, _)| hash_file(path)).collect::<Result<_>>()?;
    let entries = files
        .into_iter()
        .zip(digests)
        .map(|((sample_id, path, label), digest)| ManifestEntry { sample_id, path, label, digest })
        .collect();
    Manifest::new(class_names, entries)
}

/// Remove exact duplicates. Each digest group keeps the entry with the
/// lexicographically smallest path, whatever the labels of the group.
pub fn dedup(manifest: &Manifest) -> (Manifest, Vec<ManifestEntry>) {
    let mut keeper: BTreeMap<Digest, usize> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        keeper
            .entry(e.digest)
            .and_modify(|k| {
                if e.path < manifest.entries[*k].path {
                    *k = i;
                }
            })
            .or_insert(i);
    }
    let mut kept = manifest.empty_like();
    let mut removed = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if keeper[&e.digest] == i {
            kept.entries.push(e.clone());
        } else {
            removed.push(e.clone());
        }
    }
    (kept, removed)
}

/// Per-class train counts: largest-remainder apportionment of a train total of
/// `ceil(N · fraction)` over the exact quotas `count · fraction`.
pub fn stratified_train_counts(counts: &[usize], train_fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * train_fraction).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let target = ((total as f64 * train_fraction) - 1e-9).ceil().max(0.0) as usize;
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Largest remainder first; ties go to the lower class index (stable sort).
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - seats[a] as f64;
        let rb = quotas[b] - seats[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &k in order.iter().take(target.saturating_sub(assigned)) {
        if seats[k] < counts[k] {
            seats[k] += 1;
        }
    }
    seats
}

fn class_members(manifest: &Manifest) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); manifest.class_names.len()];
    for (i, e) in manifest.entries.iter().enumerate() {
        members[e.label].push(i);
    }
    members
}

/// Seeded stratified split. Both outputs keep the input's entry order.
pub fn stratified_split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Split(format!("train_fraction {train_fraction} not in (0, 1)")));
    }
    let members = class_members(manifest);
    for (k, m) in members.iter().enumerate() {
        if m.len() < 2 {
            return Err(DataError::Split(format!(
                "class {} has {} entries, need at least 2",
                manifest.class_names[k],
                m.len()
            )));
        }
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let train_counts = stratified_train_counts(&counts, train_fraction);
    let mut in_train = vec![false; manifest.len()];
    for (k, mut idx) in members.into_iter().enumerate() {
        SplitMix64::new(derive_seed(seed, &[k as u64])).shuffle(&mut idx);
        for &i in idx.iter().take(train_counts[k]) {
            in_train[i] = true;
        }
    }
    let mut train = manifest.empty_like();
    let mut test = manifest.empty_like();
    for (e, &t) in manifest.entries.iter().zip(&in_train) {
        if t { &mut train } else { &mut test }.entries.push(e.clone());
    }
    Ok((train, test))
}

/// Deal each class's shuffled entries to clients round-robin. The dealing
/// position carries over from one class to the next.
pub fn partition_clients(train: &Manifest, num_clients: usize, seed: u64) -> Result<Vec<Manifest>> {
    if num_clients == 0 {
        return Err(DataError::Partition("num_clients must be >= 1".into()));
    }
    let members = class_members(train);
    for (k, m) in members.iter().enumerate() {
        if m.len() < num_clients {
            return Err(DataError::Partition(format!(
                "class {} has {} entries for {num_clients} clients",
                train.class_names[k],
                m.len()
            )));
        }
    }
    let mut owner = vec![0usize; train.len()];
    let mut next = 0usize;
    for (k, mut idx) in members.into_iter().enumerate() {
        SplitMix64::new(derive_seed(seed, &[k as u64])).shuffle(&mut idx);
        for i in idx {
            owner[i] = next;
            next = (next + 1) % num_clients;
        }
    }
    let mut clients = vec![train.empty_like(); num_clients];
    for (e, &c) in train.entries.iter().zip(&owner) {
        clients[c].entries.push(e.clone());
    }
    Ok(clients)
}
