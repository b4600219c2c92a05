//! Local replica storage for the DHT. Values are write-once per key.

use std::collections::BTreeMap;

use crate::identity::{hash160, Kid, KID_BYTES};

pub type DhtKey = [u8; KID_BYTES];

pub const DEFAULT_MAX_VALUE: usize = 64 * 1024;

/// The DHT key under which information about `kid` is stored: η(kid).
pub fn dht_key(kid: &Kid) -> DhtKey {
    hash160(&kid.0)
}

#[derive(Debug, Clone)]
pub struct DhtStorage {
    values: BTreeMap<DhtKey, Vec<u8>>,
    max_value: usize,
}

impl Default for DhtStorage {
    fn default() -> Self {
        DhtStorage::new(DEFAULT_MAX_VALUE)
    }
}

impl DhtStorage {
    pub fn new(max_value: usize) -> Self {
        DhtStorage {
            values: BTreeMap::new(),
            max_value,
        }
    }

    /// Stores `value` unless the key already holds one or it is too large.
    pub fn store(&mut self, key: DhtKey, value: Vec<u8>) -> bool {
        if value.len() > self.max_value || self.values.contains_key(&key) {
            return false;
        }
        self.values.insert(key, value);
        true
    }

    pub fn get(&self, key: &DhtKey) -> Option<&[u8]> {
        self.values.get(key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
