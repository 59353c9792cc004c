//! Masked-row feature extraction, per-head linear probes and Top-K head
//! selection.

mod taps;
mod train;

pub use taps::{
    extract_features, load_taps, save_taps, MaskedTaps, StandardTaps, TapLayout, TapSet, TapTable,
};
pub use train::{split_train, train_all, train_probe, Loss, Probe, ProbeBank, ProbeConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedHead {
    pub layer: usize,
    pub head: usize,
    pub test_acc: f64,
}

/// The Top-K heads, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub k: usize,
    pub heads: Vec<SelectedHead>,
}

impl HeadSet {
    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.heads.iter().any(|h| h.layer == layer && h.head == head)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.heads.iter().map(|h| (h.layer, h.head)).collect()
    }

    /// First `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        let heads: Vec<_> = self.heads.iter().take(k).cloned().collect();
        Self { k: heads.len(), heads }
    }
}

/// Top-K by test accuracy; ties go to the smaller `(layer, head)`.
pub fn select_heads(bank: &ProbeBank, k: usize) -> Result<HeadSet> {
    let total = bank.layers * bank.heads;
    if k > total {
        return Err(Error::Input(format!("K = {k} exceeds the {total} heads of the grid")));
    }
    let mut ranked: Vec<SelectedHead> = bank
        .probes
        .iter()
        .map(|p| SelectedHead {
            layer: p.layer,
            head: p.head,
            test_acc: p.test_acc,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.test_acc
            .total_cmp(&a.test_acc)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    ranked.truncate(k);
    Ok(HeadSet { k, heads: ranked })
}
