use std::collections::BTreeMap;

use crate::model::{ComputeCapability, NodeId};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub capability: ComputeCapability,
    pub last_advertised: f64,
}

/// Capabilities collected by the compute offload controlling node, one
/// entry per Computing Node. A new advertisement replaces the old one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CapabilityRegistry {
    entries: BTreeMap<NodeId, RegistryEntry>,
}

impl CapabilityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advertise(&mut self, capability: ComputeCapability, at: f64) {
        let id = capability.node_id.clone();
        self.entries.insert(id, RegistryEntry { capability, last_advertised: at });
    }

    pub fn get(&self, id: &NodeId) -> Option<&RegistryEntry> {
        self.entries.get(id)
    }

    pub fn capability(&self, id: &NodeId) -> Option<&ComputeCapability> {
        self.entries.get(id).map(|e| &e.capability)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in node-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &RegistryEntry)> {
        self.entries.iter()
    }
}
