//! Episodic memory of raw samples together with the trunk representation
//! each sample had when it was stored.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;

pub const DEFAULT_QUOTA: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub input: Array1<f64>,
    pub label: usize,
    pub task_id: usize,
    /// Trunk feature at store time; never updated afterwards.
    pub representation: Array1<f64>,
}

/// Per-task memory with a fixed quota per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    quota: usize,
    entries: BTreeMap<usize, Vec<MemoryEntry>>,
}

/// Replay batch drawn from the union of all stored tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct RefBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
    pub representations: Array2<f64>,
}

impl RefBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of the batch grouped by source task, in task order.
    pub fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &k) in self.task_ids.iter().enumerate() {
            groups.entry(k).or_default().push(i);
        }
        groups
    }
}

impl MemoryStore {
    pub fn new(quota: usize) -> Result<Self> {
        if quota == 0 {
            return Err(Error::Config("memory quota must be >= 1".into()));
        }
        Ok(Self {
            quota,
            entries: BTreeMap::new(),
        })
    }

    /// Rebuilds a store from saved entries, checking the quota invariant.
    pub fn from_entries(quota: usize, entries: Vec<MemoryEntry>) -> Result<Self> {
        let mut store = Self::new(quota)?;
        for e in entries {
            store.entries.entry(e.task_id).or_default().push(e);
        }
        if let Some((k, v)) = store.entries.iter().find(|(_, v)| v.len() > quota) {
            return Err(Error::State(format!(
                "task {k} holds {} entries, above quota {quota}",
                v.len()
            )));
        }
        Ok(store)
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn task_entries(&self, task_id: usize) -> &[MemoryEntry] {
        self.entries.get(&task_id).map_or(&[], Vec::as_slice)
    }

    /// All entries in task order.
    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values().flatten()
    }

    /// Stores `quota` samples of `dataset`, drawn uniformly without
    /// replacement, with their current trunk features.
    pub fn store_mem(&mut self, task_id: usize, dataset: &LabeledDataset, net: &Network, seed: u64) -> Result<()> {
        if self.entries.contains_key(&task_id) {
            return Err(Error::State(format!("memory already holds task {task_id}")));
        }
        if dataset.dim() != net.input_dim() {
            return Err(crate::error::shape_err("memory input width", net.input_dim(), dataset.dim()));
        }
        let n = dataset.len();
        let picked: Vec<usize> = if self.quota >= n {
            if self.quota > n {
                log::warn!(
                    "memory quota {} exceeds the {n} samples of task {task_id}; storing all of them",
                    self.quota
                );
            }
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, n, self.quota).into_vec()
        };
        let inputs = dataset.inputs().select(Axis(0), &picked);
        let reps = net.infer(inputs.view())?;
        let entries = picked
            .iter()
            .zip(inputs.outer_iter().zip(reps.outer_iter()))
            .map(|(&i, (x, r))| MemoryEntry {
                input: x.to_owned(),
                label: dataset.labels()[i],
                task_id,
                representation: r.to_owned(),
            })
            .collect();
        self.entries.insert(task_id, entries);
        Ok(())
    }

    /// `batch_size` entries drawn uniformly with replacement over the union
    /// of all tasks.
    pub fn sample_ref_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<RefBatch> {
        if batch_size == 0 {
            return Err(Error::Config("reference batch size must be >= 1".into()));
        }
        let all: Vec<&MemoryEntry> = self.iter().collect();
        let Some(first) = all.first() else {
            return Err(Error::State("cannot sample from an empty memory".into()));
        };
        let (d_in, d_rep) = (first.input.len(), first.representation.len());
        let mut inputs = Array2::zeros((batch_size, d_in));
        let mut representations = Array2::zeros((batch_size, d_rep));
        let mut labels = Vec::with_capacity(batch_size);
        let mut task_ids = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let e = all[rng.random_range(0..all.len())];
            inputs.row_mut(i).assign(&e.input);
            representations.row_mut(i).assign(&e.representation);
            labels.push(e.label);
            task_ids.push(e.task_id);
        }
        Ok(RefBatch {
            inputs,
            labels,
            task_ids,
            representations,
        })
    }
}
