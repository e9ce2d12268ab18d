use std::collections::BTreeMap;

use baton_core::wire::{LogEntry, LogOp, Namespace};

/// Latest value per key, per namespace.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KvState {
    maps: BTreeMap<Namespace, BTreeMap<String, Vec<u8>>>,
}

impl KvState {
    pub fn apply(&mut self, e: &LogEntry) {
        let map = self.maps.entry(e.namespace).or_default();
        match e.op {
            LogOp::Put => {
                map.insert(e.key.clone(), e.value.clone());
            }
            LogOp::Delete => {
                map.remove(&e.key);
            }
        }
    }

    pub fn get(&self, ns: Namespace, key: &str) -> Option<&Vec<u8>> {
        self.maps.get(&ns)?.get(key)
    }

    pub fn scan(&self, ns: Namespace) -> Vec<(String, Vec<u8>)> {
        self.maps
            .get(&ns)
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.maps.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
