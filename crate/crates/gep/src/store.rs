//! File-backed, append-only asset store with an immutable event ledger.
//!
//! Layout under the store root (stable, documented):
//!
//! ```text
//! <root>/assets/gene/<asset_id>.json      canonical bytes, one file per asset
//! <root>/assets/skill/<asset_id>.json
//! <root>/assets/capsule/<asset_id>.json
//! <root>/events.log                       one canonical event per line
//! <root>/index.log                        gene-id → asset-id pointer records
//! ```
//!
//! Assets are immutable once written and never deleted. The event ledger is
//! strictly ordered by a store-assigned monotonic `seq`; wall-clock
//! timestamps are advisory and never affect protocol order. The gene index
//! is an append-only pointer log replayed at open, so the latest pointer
//! always names an existing asset even after a crash between writes.
//!
//! Writes are serialized by an internal lock; reads may run concurrently
//! from any number of tasks.

use crate::objects::{
    canonicalize, compute_asset_id, from_canonical_bytes, AnyObject, AssetId, Canonical, Capsule,
    Event, EventDraft, EventType, Gene, OrderingKey, SkillPackage, ValidationReport,
    ValidationResult,
};
use chrono::SecondsFormat;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

/// Kind of a stored asset. Events live in the ledger, not the asset map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AssetKind {
    Gene,
    Skill,
    Capsule,
}

impl AssetKind {
    pub const ALL: [AssetKind; 3] = [AssetKind::Gene, AssetKind::Skill, AssetKind::Capsule];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::Gene => "gene",
            AssetKind::Skill => "skill",
            AssetKind::Capsule => "capsule",
        }
    }
}

impl std::fmt::Display for AssetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw stored asset: its kind and exact canonical bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredAsset {
    pub kind: AssetKind,
    pub bytes: Vec<u8>,
}

/// Store failures.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store data at {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("integrity error: asset {id} already stored with different bytes")]
    IdCollision { id: AssetId },
    #[error("asset {id} not found")]
    NotFound { id: AssetId },
    #[error("asset {id} is a {found}, not a {expected}")]
    WrongKind {
        id: AssetId,
        expected: AssetKind,
        found: AssetKind,
    },
    #[error("reference error: {context} refers to missing asset {id}")]
    DanglingReference { id: AssetId, context: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid object: {0}")]
    Invalid(ValidationReport),
}

struct Inner {
    root: PathBuf,
    assets: HashMap<AssetId, StoredAsset>,
    events: Vec<Event>,
    /// Gene id → latest asset id, in pointer-log replay order.
    index: BTreeMap<String, AssetId>,
}

/// The asset store. Cheap to share behind a reference across threads.
pub struct Store {
    inner: RwLock<Inner>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexRecord {
    gene_id: String,
    asset_id: AssetId,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`, verifying that
    /// every stored asset still hashes to its file name and that the ledger
    /// is gapless.
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        for kind in AssetKind::ALL {
            fs::create_dir_all(root.join("assets").join(kind.as_str()))?;
        }

        let mut assets = HashMap::new();
        for kind in AssetKind::ALL {
            let dir = root.join("assets").join(kind.as_str());
            let mut names: Vec<PathBuf> = Vec::new();
            for entry in fs::read_dir(&dir)? {
                names.push(entry?.path());
            }
            for path in names {
                let display = path.display().to_string();
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let id = AssetId::parse(stem).map_err(|e| StoreError::Corrupt {
                    path: display.clone(),
                    detail: e.to_string(),
                })?;
                let bytes = fs::read(&path)?;
                if compute_asset_id(&bytes) != id {
                    return Err(StoreError::Corrupt {
                        path: display,
                        detail: "stored bytes do not hash to the file name".to_string(),
                    });
                }
                assets.insert(id, StoredAsset { kind, bytes });
            }
        }

        let mut events = Vec::new();
        let log_path = root.join("events.log");
        if log_path.exists() {
            let text = fs::read_to_string(&log_path)?;
            for (i, line) in text.lines().enumerate() {
                let event: Event =
                    from_canonical_bytes(line.as_bytes()).map_err(|e| StoreError::Corrupt {
                        path: format!("{}:{}", log_path.display(), i + 1),
                        detail: e.to_string(),
                    })?;
                if event.ordering.seq != (i as u64) + 1 {
                    return Err(StoreError::Corrupt {
                        path: format!("{}:{}", log_path.display(), i + 1),
                        detail: format!(
                            "ledger gap: expected seq {}, found {}",
                            i + 1,
                            event.ordering.seq
                        ),
                    });
                }
                events.push(event);
            }
        }

        let mut index = BTreeMap::new();
        let index_path = root.join("index.log");
        if index_path.exists() {
            let text = fs::read_to_string(&index_path)?;
            for (i, line) in text.lines().enumerate() {
                let record: IndexRecord =
                    serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                        path: format!("{}:{}", index_path.display(), i + 1),
                        detail: e.to_string(),
                    })?;
                if !assets.contains_key(&record.asset_id) {
                    return Err(StoreError::Corrupt {
                        path: format!("{}:{}", index_path.display(), i + 1),
                        detail: format!("index points at missing asset {}", record.asset_id),
                    });
                }
                index.insert(record.gene_id, record.asset_id);
            }
        }

        Ok(Store {
            inner: RwLock::new(Inner {
                root,
                assets,
                events,
                index,
            }),
        })
    }

    fn write_locked(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    fn read_locked(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn put_bytes(
        &self,
        kind: AssetKind,
        id: &AssetId,
        bytes: &[u8],
        gene_id: Option<&str>,
    ) -> Result<AssetId, StoreError> {
        let mut inner = self.write_locked();
        if let Some(existing) = inner.assets.get(id) {
            if existing.bytes == bytes {
                return Ok(id.clone());
            }
            return Err(StoreError::IdCollision { id: id.clone() });
        }
        let path = inner
            .root
            .join("assets")
            .join(kind.as_str())
            .join(format!("{id}.json"));
        fs::write(&path, bytes)?;
        if let Some(gene_id) = gene_id {
            let record = IndexRecord {
                gene_id: gene_id.to_string(),
                asset_id: id.clone(),
            };
            append_line(
                &inner.root.join("index.log"),
                &serde_json::to_vec(&record).expect("index records serialize"),
            )?;
            inner.index.insert(gene_id.to_string(), id.clone());
        }
        inner.assets.insert(
            id.clone(),
            StoredAsset {
                kind,
                bytes: bytes.to_vec(),
            },
        );
        Ok(id.clone())
    }

    /// Stores a canonical gene and updates the gene index. Idempotent.
    pub fn put_gene(&self, gene: &Canonical<Gene>) -> Result<AssetId, StoreError> {
        self.put_bytes(
            AssetKind::Gene,
            gene.asset_id(),
            gene.bytes(),
            Some(&gene.object().id),
        )
    }

    /// Stores a canonical skill package. Idempotent.
    pub fn put_skill(&self, skill: &Canonical<SkillPackage>) -> Result<AssetId, StoreError> {
        self.put_bytes(AssetKind::Skill, skill.asset_id(), skill.bytes(), None)
    }

    /// Stores a canonical capsule after checking that every gene it
    /// references already resolves in this store. Idempotent.
    pub fn put_capsule(&self, capsule: &Canonical<Capsule>) -> Result<AssetId, StoreError> {
        {
            let inner = self.read_locked();
            for gene_ref in &capsule.object().gene_refs {
                if !inner.assets.contains_key(gene_ref) {
                    return Err(StoreError::DanglingReference {
                        id: gene_ref.clone(),
                        context: format!("capsule {} gene_refs", capsule.object().id),
                    });
                }
            }
        }
        self.put_bytes(AssetKind::Capsule, capsule.asset_id(), capsule.bytes(), None)
    }

    /// Stores any parsed asset object (canonicalizing it), dispatching on
    /// its type. Events are not assets and are rejected here; they enter
    /// through [`Store::append_event`].
    pub fn put_any(&self, object: &AnyObject) -> Result<(AssetId, AssetKind), StoreError> {
        match object {
            AnyObject::Gene(g) => {
                let c = canonicalize(g).map_err(StoreError::Invalid)?;
                Ok((self.put_gene(&c)?, AssetKind::Gene))
            }
            AnyObject::Skill(s) => {
                let c = canonicalize(s).map_err(StoreError::Invalid)?;
                Ok((self.put_skill(&c)?, AssetKind::Skill))
            }
            AnyObject::Capsule(c) => {
                let c = canonicalize(c).map_err(StoreError::Invalid)?;
                Ok((self.put_capsule(&c)?, AssetKind::Capsule))
            }
            AnyObject::Event(_) => Err(StoreError::Protocol(
                "events are ledger records, not assets; append them through an evolution run"
                    .to_string(),
            )),
        }
    }

    /// Returns the exact stored bytes and kind for an asset id.
    pub fn get_asset(&self, id: &AssetId) -> Result<StoredAsset, StoreError> {
        self.read_locked()
            .assets
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound { id: id.clone() })
    }

    pub fn contains(&self, id: &AssetId) -> bool {
        self.read_locked().assets.contains_key(id)
    }

    fn get_typed<T>(&self, id: &AssetId, expected: AssetKind) -> Result<Canonical<T>, StoreError>
    where
        T: serde::de::DeserializeOwned + crate::objects::Canonize,
    {
        let stored = self.get_asset(id)?;
        if stored.kind != expected {
            return Err(StoreError::WrongKind {
                id: id.clone(),
                expected,
                found: stored.kind,
            });
        }
        let object: T = from_canonical_bytes(&stored.bytes).map_err(|e| StoreError::Corrupt {
            path: format!("assets/{}/{}.json", expected.as_str(), id),
            detail: e.to_string(),
        })?;
        canonicalize(&object).map_err(StoreError::Invalid)
    }

    pub fn get_gene(&self, id: &AssetId) -> Result<Canonical<Gene>, StoreError> {
        self.get_typed(id, AssetKind::Gene)
    }

    pub fn get_skill(&self, id: &AssetId) -> Result<Canonical<SkillPackage>, StoreError> {
        self.get_typed(id, AssetKind::Skill)
    }

    pub fn get_capsule(&self, id: &AssetId) -> Result<Canonical<Capsule>, StoreError> {
        self.get_typed(id, AssetKind::Capsule)
    }

    /// Latest asset id stored under a gene identifier, if any.
    pub fn latest_gene(&self, gene_id: &str) -> Option<AssetId> {
        self.read_locked().index.get(gene_id).cloned()
    }

    /// The full gene index: gene id → latest asset id, sorted by gene id.
    pub fn gene_index(&self) -> BTreeMap<String, AssetId> {
        self.read_locked().index.clone()
    }

    /// All asset ids of one kind, sorted.
    pub fn list_assets(&self, kind: AssetKind) -> Vec<AssetId> {
        let inner = self.read_locked();
        let mut ids: Vec<AssetId> = inner
            .assets
            .iter()
            .filter(|(_, a)| a.kind == kind)
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort_by(|a, b| a.as_str().cmp(b.as_str()));
        ids
    }

    pub fn asset_count(&self) -> usize {
        self.read_locked().assets.len()
    }

    /// Appends an event to the ledger, assigning the next ordering key.
    ///
    /// # Errors
    ///
    /// Dangling `src_asset`, `dst_asset`, or `intent.target_asset`
    /// references are reference errors; a solidify draft without a passing
    /// validation result and a destination asset is a protocol error.
    pub fn append_event(&self, draft: EventDraft) -> Result<OrderingKey, StoreError> {
        if draft.event_type == EventType::Solidify {
            if draft.validation_result != ValidationResult::Pass {
                return Err(StoreError::Protocol(
                    "solidify events require validation_result \"pass\"".to_string(),
                ));
            }
            if draft.dst_asset.is_none() {
                return Err(StoreError::Protocol(
                    "solidify events require a dst_asset".to_string(),
                ));
            }
        }
        let mut inner = self.write_locked();
        for (reference, context) in [
            (draft.src_asset.as_ref(), "src_asset"),
            (draft.dst_asset.as_ref(), "dst_asset"),
            (Some(&draft.intent.target_asset), "intent.target_asset"),
        ] {
            if let Some(id) = reference {
                if !inner.assets.contains_key(id) {
                    return Err(StoreError::DanglingReference {
                        id: id.clone(),
                        context: context.to_string(),
                    });
                }
            }
        }
        let seq = inner.events.len() as u64 + 1;
        let at = chrono::Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true);
        let event = draft.into_event(seq, at);
        let canonical = canonicalize(&event).map_err(StoreError::Invalid)?;
        append_line(&inner.root.join("events.log"), canonical.bytes())?;
        let ordering = canonical.object().ordering.clone();
        inner.events.push(canonical.into_object());
        Ok(ordering)
    }

    /// The whole ledger, oldest first.
    pub fn events(&self) -> Vec<Event> {
        self.read_locked().events.clone()
    }

    pub fn event_count(&self) -> usize {
        self.read_locked().events.len()
    }

    /// Events whose `run_id` matches, oldest first.
    pub fn events_for_run(&self, run_id: &str) -> Vec<Event> {
        self.read_locked()
            .events
            .iter()
            .filter(|e| e.run_id == run_id)
            .cloned()
            .collect()
    }

    /// The chain of events reachable from `id` by following dst→src links,
    /// oldest first — plus destination-less events (validation attempts)
    /// recorded against any asset in that ancestor chain. Empty for root
    /// assets with no recorded history.
    pub fn lineage(&self, id: &AssetId) -> Vec<Event> {
        let inner = self.read_locked();
        let mut ancestors: HashSet<AssetId> = HashSet::from([id.clone()]);
        let mut chain = Vec::new();
        for event in inner.events.iter().rev() {
            let produces_ancestor = event
                .dst_asset
                .as_ref()
                .is_some_and(|d| ancestors.contains(d));
            let records_on_ancestor = event.dst_asset.is_none()
                && event
                    .src_asset
                    .as_ref()
                    .is_some_and(|s| ancestors.contains(s));
            if produces_ancestor || records_on_ancestor {
                if let Some(src) = &event.src_asset {
                    ancestors.insert(src.clone());
                }
                chain.push(event.clone());
            }
        }
        chain.reverse();
        chain
    }
}

fn append_line(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(bytes)?;
    file.write_all(b"\n")?;
    Ok(())
}
