//! Domain types shared by every module.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, mismatch, Error, Result};

/// Absolute tolerance on `Σ λ = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// One client's local dataset. Features are row-major `n × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub client_id: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub attributes: Vec<u32>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.features[i * dim..(i + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub attribute_arity: usize,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl FederatedDataset {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.class_count == 0 || self.attribute_arity == 0 {
            return Err(Error::Data("feature_dim, class_count and attribute_arity must be >= 1".into()));
        }
        for (i, c) in self.clients.iter().enumerate() {
            let n = c.labels.len();
            if c.attributes.len() != n || c.features.len() != n * self.feature_dim {
                return Err(Error::Data(format!("client {i}: features/labels/attributes lengths disagree")));
            }
            if let Some(l) = c.labels.iter().find(|&&l| l as usize >= self.class_count) {
                return Err(Error::Data(format!("client {i}: label {l} out of range")));
            }
            if let Some(a) = c.attributes.iter().find(|&&a| a as usize >= self.attribute_arity) {
                return Err(Error::Data(format!("client {i}: attribute {a} out of range")));
            }
            if c.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("client {i}: non-finite feature")));
            }
        }
        if self.total_samples() == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        Ok(())
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientData::len).sum()
    }

    /// `N × A` matrix of subgroup sizes.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|c| {
                let mut row = vec![0usize; self.attribute_arity];
                for &a in &c.attributes {
                    row[a as usize] += 1;
                }
                row
            })
            .collect()
    }

    /// Same dataset with every client's samples appended a second time.
    pub fn duplicated(&self) -> FederatedDataset {
        let mut out = self.clone();
        for c in &mut out.clients {
            c.features.extend_from_within(..);
            c.labels.extend_from_within(..);
            c.attributes.extend_from_within(..);
        }
        out
    }
}

/// A non-empty subgroup `D^u_{i,k}`: samples of client `client` with attribute `attribute`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub client: usize,
    pub attribute: usize,
    pub size: usize,
    /// Positions of the subgroup's samples inside the client's arrays, ascending.
    pub indices: Vec<usize>,
}

/// Table of non-empty subgroups ordered by `(client, attribute)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub entries: Vec<GroupEntry>,
    pub per_client_counts: Vec<usize>,
    client_offsets: Vec<usize>,
    client_sizes: Vec<usize>,
    attribute_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntrySummary {
    pub client: usize,
    pub attribute: usize,
    pub size: usize,
}

/// Serializable view of a [`GroupIndex`] (sample positions omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupIndexSummary {
    pub total_groups: usize,
    pub total_samples: usize,
    pub per_client_counts: Vec<usize>,
    pub entries: Vec<GroupEntrySummary>,
}

impl GroupIndex {
    pub fn build(data: &FederatedDataset) -> GroupIndex {
        let arity = data.attribute_arity;
        let mut entries = Vec::new();
        let mut per_client_counts = Vec::with_capacity(data.clients.len());
        let mut client_offsets = vec![0];
        let mut attribute_sizes = vec![0; arity];
        for (i, c) in data.clients.iter().enumerate() {
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); arity];
            for (s, &a) in c.attributes.iter().enumerate() {
                buckets[a as usize].push(s);
            }
            let mut count = 0;
            for (k, idx) in buckets.into_iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                attribute_sizes[k] += idx.len();
                entries.push(GroupEntry { client: i, attribute: k, size: idx.len(), indices: idx });
                count += 1;
            }
            per_client_counts.push(count);
            client_offsets.push(entries.len());
        }
        let client_sizes = data.clients.iter().map(ClientData::len).collect();
        GroupIndex { entries, per_client_counts, client_offsets, client_sizes, attribute_sizes }
    }

    /// Total subgroup count `M`.
    pub fn group_count(&self) -> usize {
        self.entries.len()
    }

    pub fn client_count(&self) -> usize {
        self.per_client_counts.len()
    }

    pub fn attribute_arity(&self) -> usize {
        self.attribute_sizes.len()
    }

    pub fn total_samples(&self) -> usize {
        self.entries.iter().map(|e| e.size).sum()
    }

    /// `n^c_i`.
    pub fn client_size(&self, client: usize) -> usize {
        self.client_sizes[client]
    }

    /// `n^a_k`.
    pub fn attribute_size(&self, attribute: usize) -> usize {
        self.attribute_sizes[attribute]
    }

    /// Range of entry positions belonging to `client`.
    pub fn client_entries(&self, client: usize) -> std::ops::Range<usize> {
        self.client_offsets[client]..self.client_offsets[client + 1]
    }

    /// Clients holding at least one sample.
    pub fn active_clients(&self) -> Vec<usize> {
        (0..self.client_count()).filter(|&i| self.per_client_counts[i] > 0).collect()
    }

    /// `λ^c_i = Σ_k λ^u_{i,k}` for every client (zero for empty clients).
    pub fn client_marginals(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.client_count()).map(|i| self.client_entries(i).map(|j| lambda[j]).sum()).collect()
    }

    /// `n^u_{i,k} / n` for every entry.
    pub fn size_proportional(&self) -> SimplexWeights {
        let n = self.total_samples() as f64;
        SimplexWeights::from_positive(self.entries.iter().map(|e| e.size as f64 / n).collect())
            .expect("group index has at least one non-empty group")
    }

    pub fn summary(&self) -> GroupIndexSummary {
        GroupIndexSummary {
            total_groups: self.group_count(),
            total_samples: self.total_samples(),
            per_client_counts: self.per_client_counts.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| GroupEntrySummary { client: e.client, attribute: e.attribute, size: e.size })
                .collect(),
        }
    }

    /// SHA-256 over the `(client, attribute, size)` table, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.client_count() as u64).to_le_bytes());
        h.update((self.attribute_arity() as u64).to_le_bytes());
        for e in &self.entries {
            h.update((e.client as u64).to_le_bytes());
            h.update((e.attribute as u64).to_le_bytes());
            h.update((e.size as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A point on the standard simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("simplex weights must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("simplex weight {v} is negative or non-finite")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("simplex weights sum to {sum}")));
        }
        Ok(SimplexWeights(values))
    }

    /// Normalizes a nonnegative vector with positive mass.
    pub fn from_positive(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let sum: f64 = values.iter().sum();
        if values.is_empty() || sum <= 0.0 {
            return Err(invalid("weights need positive total mass"));
        }
        SimplexWeights::new(values.into_iter().map(|v| v / sum).collect())
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform weights need at least one coordinate");
        SimplexWeights(vec![1.0 / len as f64; len])
    }

    /// Unit mass on coordinate `at`.
    pub fn vertex(len: usize, at: usize) -> Self {
        let mut v = vec![0.0; len];
        v[at] = 1.0;
        SimplexWeights(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<f64>> for SimplexWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexWeights::new(v)
    }
}

impl From<SimplexWeights> for Vec<f64> {
    fn from(w: SimplexWeights) -> Vec<f64> {
        w.0
    }
}

/// Flat parameter vector of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("model parameters must be finite".into()));
        }
        Ok(ModelParams(values))
    }

    pub fn zeros(len: usize) -> Self {
        ModelParams(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_len(&self, other: &ModelParams) -> Result<()> {
        if self.len() != other.len() {
            return Err(mismatch(format!("parameter lengths {} vs {}", self.len(), other.len())));
        }
        Ok(())
    }

    /// SHA-256 of the little-endian bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<f64>> for ModelParams {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ModelParams::new(v)
    }
}

impl From<ModelParams> for Vec<f64> {
    fn from(p: ModelParams) -> Vec<f64> {
        p.0
    }
}
