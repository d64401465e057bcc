//! Flat and nested partitions.
//!
//! A [`Partition`] is a dense label vector in canonical form (labels in
//! order of first appearance). Samplers keep raw truncation labels, which
//! may skip empty clusters; they are canonicalized only for summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl Partition {
    /// Canonical relabeling by order of first appearance.
    pub fn canonicalize(labels: &[usize]) -> Result<Partition> {
        if labels.is_empty() {
            return Err(Error::Validation("cannot build a partition of zero items".into()));
        }
        Ok(Self::canonical_unchecked(labels))
    }

    pub(crate) fn canonical_unchecked(labels: &[usize]) -> Partition {
        let max = labels.iter().copied().max().unwrap_or(0);
        let mut map = vec![usize::MAX; max + 1];
        let mut next = 0;
        let mut out = Vec::with_capacity(labels.len());
        for &l in labels {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            out.push(map[l]);
        }
        Partition {
            labels: out,
            n_clusters: next,
        }
    }

    pub fn singletons(n: usize) -> Partition {
        Partition {
            labels: (0..n).collect(),
            n_clusters: n,
        }
    }

    pub fn one_cluster(n: usize) -> Partition {
        Partition {
            labels: vec![0; n],
            n_clusters: usize::from(n > 0),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of occupied clusters, K⁺.
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Members of each cluster, in item order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.n_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            blocks[l].push(i);
        }
        blocks
    }

    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }
}

/// Number of distinct labels in a raw label vector.
pub fn count_occupied(labels: &[usize], truncation: usize) -> usize {
    let mut seen = vec![false; truncation];
    labels.iter().filter(|&&l| !std::mem::replace(&mut seen[l], true)).count()
}

/// Occupancy counts of a raw label vector over `truncation` labels.
pub fn occupancy(labels: &[usize], truncation: usize) -> Vec<usize> {
    let mut counts = vec![0; truncation];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

fn validate_coclustering(coclust: &DMatrix<f64>, n: usize) -> Result<()> {
    if coclust.nrows() != n || coclust.ncols() != n {
        return Err(Error::Validation(format!(
            "co-clustering matrix is {}x{}, expected {n}x{n}",
            coclust.nrows(),
            coclust.ncols()
        )));
    }
    for i in 0..n {
        if (coclust[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("diagonal entry {i} is {}", coclust[(i, i)])));
        }
        for j in (i + 1)..n {
            let v = coclust[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("entry ({i},{j}) = {v} outside [0,1]")));
            }
            if (v - coclust[(j, i)]).abs() > 1e-12 {
                return Err(Error::Validation(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Binder loss with equal unit costs:
/// `Σ_{i<i′} (1[same cluster] − p_{ii′})²`.
pub fn binder_loss(p: &Partition, coclust: &DMatrix<f64>) -> Result<f64> {
    validate_coclustering(coclust, p.len())?;
    Ok(binder_loss_unchecked(p.labels(), coclust))
}

pub(crate) fn binder_loss_unchecked(labels: &[usize], coclust: &DMatrix<f64>) -> f64 {
    let n = labels.len();
    let mut loss = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let ind = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            let d = ind - coclust[(i, j)];
            loss += d * d;
        }
    }
    loss
}

/// Posterior co-clustering probabilities: fraction of draws placing each
/// pair of items together.
pub fn coclustering_matrix<L: AsRef<[usize]>>(draws: &[L]) -> Result<DMatrix<f64>> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Validation("no draws to summarize".into()))?;
    let n = first.as_ref().len();
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for (m, d) in draws.iter().enumerate() {
        let labels = d.as_ref();
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "draw {m} has {} items, expected {n}",
                labels.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    counts[(i, j)] += 1.0;
                }
            }
        }
    }
    let m = draws.len() as f64;
    for i in 0..n {
        counts[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = counts[(i, j)] / m;
            counts[(i, j)] = v;
            counts[(j, i)] = v;
        }
    }
    Ok(counts)
}

impl AsRef<[usize]> for Partition {
    fn as_ref(&self) -> &[usize] {
        &self.labels
    }
}

/// Nested partition of a data matrix: a partition `S` of the J columns and,
/// for every column cluster `k` (occupied or not), labels `M[k][i]` of the I
/// rows. Columns in one cluster share the row partition by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedPartitionState {
    /// `S_j` in `0..K`.
    pub subject_labels: Vec<usize>,
    /// `M_{ik}` stored as `row_labels[k][i]`, values in `0..L`.
    pub row_labels: Vec<Vec<usize>>,
    pub k: usize,
    pub l: usize,
}

impl NestedPartitionState {
    pub fn new(subject_labels: Vec<usize>, row_labels: Vec<Vec<usize>>, k: usize, l: usize) -> Result<Self> {
        let s = NestedPartitionState {
            subject_labels,
            row_labels,
            k,
            l,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_labels.len() != self.k {
            return Err(Error::Validation(format!(
                "row labels cover {} column clusters, expected K = {}",
                self.row_labels.len(),
                self.k
            )));
        }
        if let Some(&s) = self.subject_labels.iter().find(|&&s| s >= self.k) {
            return Err(Error::Validation(format!("subject label {s} >= K = {}", self.k)));
        }
        let n_rows = self.row_labels.first().map_or(0, Vec::len);
        for (k, row) in self.row_labels.iter().enumerate() {
            if row.len() != n_rows {
                return Err(Error::Validation(format!("row labels for cluster {k} have wrong length")));
            }
            if let Some(&m) = row.iter().find(|&&m| m >= self.l) {
                return Err(Error::Validation(format!("row label {m} >= L = {}", self.l)));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.row_labels.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.subject_labels.len()
    }

    /// Cluster label of cell `(i, j)`: `M_{i, S_j}`.
    pub fn cell_label(&self, i: usize, j: usize) -> usize {
        self.row_labels[self.subject_labels[j]][i]
    }

    pub fn subject_partition(&self) -> Partition {
        Partition::canonical_unchecked(&self.subject_labels)
    }

    /// Row partition Ψ_j induced in column `j`.
    pub fn row_partition(&self, j: usize) -> Partition {
        Partition::canonical_unchecked(&self.row_labels[self.subject_labels[j]])
    }

    /// Columns in one cluster induce the same row partition.
    pub fn shares_row_partitions(&self) -> bool {
        let j = self.n_cols();
        (0..j).all(|a| {
            (a + 1..j).all(|b| {
                self.subject_labels[a] != self.subject_labels[b] || self.row_partition(a) == self.row_partition(b)
            })
        })
    }
}
