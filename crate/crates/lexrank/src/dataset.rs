//! Preference datasets: an indexed store of alternatives plus counts of
//! observed pairwise preferences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rewards::Alternative;

/// Index of an alternative within a dataset.
pub type AltId = u32;

/// Observed preferences: alternatives plus a sparse count map where
/// `counts[(a, b)] = n` means `a` was preferred to `b` exactly `n` times.
/// Mutual preferences (`n(a,b) > 0` and `n(b,a) > 0`) are allowed;
/// self-pairs are not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    alternatives: Vec<Alternative>,
    counts: BTreeMap<(AltId, AltId), u32>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(
        alternatives: Vec<Alternative>,
        counts: BTreeMap<(AltId, AltId), u32>,
    ) -> Result<Self> {
        let ds = Self {
            alternatives,
            counts,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.alternatives.len() as u32;
        for (&(a, b), &count) in &self.counts {
            if a >= n || b >= n {
                return Err(Error::invalid(format!(
                    "preference ({a}, {b}) references an alternative outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::invalid(format!("self-pair ({a}, {a}) not allowed")));
            }
            if count == 0 {
                return Err(Error::invalid(format!(
                    "count for ({a}, {b}) must be at least 1"
                )));
            }
        }
        Ok(())
    }

    pub fn push_alternative(&mut self, x: Alternative) -> AltId {
        self.alternatives.push(x);
        (self.alternatives.len() - 1) as AltId
    }

    /// Records one observation of `star` being preferred to `circ`.
    pub fn record(&mut self, star: AltId, circ: AltId) -> Result<()> {
        let n = self.alternatives.len() as AltId;
        if star >= n || circ >= n {
            return Err(Error::invalid(format!(
                "preference ({star}, {circ}) references an alternative outside 0..{n}"
            )));
        }
        if star == circ {
            return Err(Error::invalid("self-pairs are not allowed"));
        }
        *self.counts.entry((star, circ)).or_insert(0) += 1;
        Ok(())
    }

    pub fn alternatives(&self) -> &[Alternative] {
        &self.alternatives
    }

    pub fn alternative(&self, id: AltId) -> &Alternative {
        &self.alternatives[id as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Ordered (star, circ, n) entries with n > 0, in deterministic order.
    pub fn iter_counts(&self) -> impl Iterator<Item = (AltId, AltId, u32)> + '_ {
        self.counts.iter().map(|(&(a, b), &n)| (a, b, n))
    }

    pub fn n(&self, star: AltId, circ: AltId) -> u32 {
        self.counts.get(&(star, circ)).copied().unwrap_or(0)
    }

    /// Total comparisons of the unordered pair: n(a,b) + n(b,a).
    pub fn total(&self, a: AltId, b: AltId) -> u32 {
        self.n(a, b) + self.n(b, a)
    }

    /// Number of recorded preference events (sum of all counts).
    pub fn num_events(&self) -> u64 {
        self.counts.values().map(|&n| n as u64).sum()
    }

    pub fn num_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn into_parts(self) -> (Vec<Alternative>, BTreeMap<(AltId, AltId), u32>) {
        (self.alternatives, self.counts)
    }
}
