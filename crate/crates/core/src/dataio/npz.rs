use std::collections::BTreeMap;
use std::path::Path;

use super::npy::{read_npy, write_npy, NpyArray};
use super::zip::{read_zip, write_zip};
use crate::error::{io_err, Result};

/// A ZIP of `.npy` members plus any other raw entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Npz {
    /// Arrays keyed by member name without the `.npy` suffix.
    pub arrays: BTreeMap<String, NpyArray>,
    /// Non-NPY members, kept byte for byte.
    pub extras: BTreeMap<String, Vec<u8>>,
}

impl Npz {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, a: NpyArray) {
        self.arrays.insert(name.into(), a);
    }

    pub fn get(&self, name: &str) -> Option<&NpyArray> {
        self.arrays.get(name)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut npz = Self::new();
        for (name, data) in read_zip(b)? {
            match name.strip_suffix(".npy") {
                Some(stem) => {
                    npz.arrays.insert(stem.to_string(), read_npy(&data)?);
                }
                None => {
                    npz.extras.insert(name, data);
                }
            }
        }
        Ok(npz)
    }

    /// Arrays first in name order, then extras in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<u8>)> =
            self.arrays.iter().map(|(k, v)| (format!("{k}.npy"), write_npy(v))).collect();
        entries.extend(self.extras.iter().map(|(k, v)| (k.clone(), v.clone())));
        write_zip(&entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }
}
