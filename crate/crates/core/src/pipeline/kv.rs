//! Per-layer key/value cache indexed by global token index.
//!
//! Entries are written once. Pruning and exit only clear the `active` bit,
//! so a surviving row is never recomputed.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    /// `layers[l - 1][token]`
    layers: Vec<Vec<Option<KvEntry>>>,
}

impl KvCache {
    pub fn new(layers: usize, tokens: usize) -> Self {
        Self {
            layers: vec![vec![None; tokens]; layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn write(&mut self, l: usize, token: usize, key: Vec<f64>, value: Vec<f64>) -> Result<()> {
        let slot = &mut self.layers[l - 1][token];
        if slot.is_some() {
            return Err(Error::Invariant(format!(
                "KV entry for token {token} at layer {l} written twice"
            )));
        }
        *slot = Some(KvEntry {
            key,
            value,
            active: true,
        });
        Ok(())
    }

    pub fn get(&self, l: usize, token: usize) -> Option<&KvEntry> {
        self.layers[l - 1][token].as_ref()
    }

    pub fn contains(&self, l: usize, token: usize) -> bool {
        self.get(l, token).is_some()
    }

    /// Active entries of layer `l` with index `<= upto`, in index order.
    pub fn active(&self, l: usize, upto: usize) -> impl Iterator<Item = (usize, &KvEntry)> {
        self.layers[l - 1][..=upto]
            .iter()
            .enumerate()
            .filter_map(|(t, e)| e.as_ref().filter(|e| e.active).map(|e| (t, e)))
    }

    /// Every active entry as `(layer, token, entry)`.
    pub fn active_entries(&self) -> Vec<(usize, usize, &KvEntry)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (t, e) in layer.iter().enumerate() {
                if let Some(e) = e.as_ref().filter(|e| e.active) {
                    out.push((l + 1, t, e));
                }
            }
        }
        out
    }

    /// Deactivates `token` on every layer from `from` onward.
    pub fn deactivate(&mut self, token: usize, from: usize) {
        for layer in self.layers.iter_mut().skip(from.saturating_sub(1)) {
            if let Some(e) = layer[token].as_mut() {
                e.active = false;
            }
        }
    }

    /// Adds an empty slot for a new token on every layer.
    pub fn push_token(&mut self) -> usize {
        for layer in &mut self.layers {
            layer.push(None);
        }
        self.num_tokens() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_once_and_deactivate() {
        let mut c = KvCache::new(2, 3);
        c.write(1, 0, vec![1.0], vec![2.0]).unwrap();
        c.write(1, 2, vec![3.0], vec![4.0]).unwrap();
        c.write(2, 2, vec![5.0], vec![6.0]).unwrap();
        assert!(c.write(1, 0, vec![0.0], vec![0.0]).is_err());
        assert_eq!(c.active(1, 2).map(|(t, _)| t).collect::<Vec<_>>(), vec![0, 2]);
        c.deactivate(2, 2);
        assert_eq!(c.active(1, 2).count(), 2);
        assert_eq!(c.active(2, 2).count(), 0);
        assert_eq!(c.get(2, 2).unwrap().key, vec![5.0]);
        assert_eq!(c.push_token(), 3);
        assert!(!c.contains(1, 3));
    }
}
