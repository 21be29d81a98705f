//! Module registry persisted through a [`RecordStore`].

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::app::compare_versions;
use super::descriptor::{parse_descriptor, ModuleDescriptor};
use crate::store::{RecordStore, StoreError};
use crate::xml::XmlError;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("registry record {index} holds an invalid descriptor: {source}")]
    Descriptor { index: usize, source: XmlError },
    #[error("registry record {index} is malformed: {reason}")]
    Record { index: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    version: String,
    xml: String,
}

/// Read-modify-write access is serialized by an internal lock so concurrent
/// registrations cannot lose each other's entries.
pub struct Registry<S: RecordStore> {
    store: S,
    writer: Mutex<()>,
}

impl<S: RecordStore> Registry<S> {
    pub fn new(store: S) -> Self {
        Self {
            store,
            writer: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    /// Adds a descriptor, replacing any entry with the same name and version.
    pub fn register(&self, descriptor: &ModuleDescriptor) -> Result<(), RegistryError> {
        let _guard = self.writer.lock();
        let mut list = self.load_all()?;
        list.retain(|d| !(d.name == descriptor.name && d.version == descriptor.version));
        list.push(descriptor.clone());
        sort(&mut list);
        let records = list
            .iter()
            .map(|d| {
                serde_json::to_string(&Entry {
                    name: d.name.clone(),
                    version: d.version.clone(),
                    xml: d.to_xml(),
                })
                .expect("registry entry serializes")
            })
            .collect::<Vec<_>>();
        self.store.save(&records)?;
        Ok(())
    }

    /// All descriptors ordered by name, then version.
    pub fn list(&self) -> Result<Vec<ModuleDescriptor>, RegistryError> {
        let _guard = self.writer.lock();
        self.load_all()
    }

    fn load_all(&self) -> Result<Vec<ModuleDescriptor>, RegistryError> {
        let Some(records) = self.store.load()? else {
            return Ok(Vec::new());
        };
        let mut out = Vec::with_capacity(records.len());
        for (index, record) in records.iter().enumerate() {
            let entry: Entry = serde_json::from_str(record).map_err(|e| RegistryError::Record {
                index,
                reason: e.to_string(),
            })?;
            let d = parse_descriptor(&entry.xml).map_err(|source| RegistryError::Descriptor { index, source })?;
            if d.name != entry.name || d.version != entry.version {
                return Err(RegistryError::Record {
                    index,
                    reason: "key does not match the embedded descriptor".into(),
                });
            }
            out.push(d);
        }
        sort(&mut out);
        Ok(out)
    }
}

fn sort(list: &mut [ModuleDescriptor]) {
    list.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| compare_versions(&a.version, &b.version)));
}
