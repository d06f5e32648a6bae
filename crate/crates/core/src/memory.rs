//! Bounded replay memory.
//!
//! The default policy runs reservoir sampling over identities rather than
//! over individual samples: every identity offered so far stays resident
//! with probability `M / n`, and a resident identity keeps up to `K`
//! samples. FIFO and classical instance-wise reservoir policies are kept as
//! baselines.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::Sample;
use crate::error::{Error, Result};
use crate::losses::{Batch, BatchKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    IdRs,
    InstanceRs,
    Fifo,
}

impl MemoryPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MemoryPolicy::IdRs => "id_rs",
            MemoryPolicy::InstanceRs => "instance_rs",
            MemoryPolicy::Fifo => "fifo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub policy: MemoryPolicy,
    /// Resident identity capacity `M`.
    pub capacity_ids: usize,
    /// Samples kept per identity `K`.
    pub per_id_cap: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            policy: MemoryPolicy::IdRs,
            capacity_ids: 128,
            per_id_cap: 4,
        }
    }
}

impl MemoryConfig {
    pub fn sample_capacity(&self) -> usize {
        self.capacity_ids * self.per_id_cap
    }
}

/// What happened to one offer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Admitted,
    AdmittedEvicting(usize),
    Rejected,
    /// The id was already resident; samples were merged and re-subsampled.
    Merged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    label: usize,
    samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    config: MemoryConfig,
    /// Identity slots in admission order. The instance-wise policy keeps
    /// slots too, but its reservoir runs over the flattened samples.
    slots: Vec<Slot>,
    ids_seen: u64,
    samples_seen: u64,
    merges: u64,
    rng: ChaCha8Rng,
}

impl MemoryBuffer {
    pub fn new(config: MemoryConfig, seed: u64) -> Result<Self> {
        if config.capacity_ids == 0 || config.per_id_cap == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        Ok(Self {
            config,
            slots: Vec::new(),
            ids_seen: 0,
            samples_seen: 0,
            merges: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn num_ids(&self) -> usize {
        self.slots.len()
    }

    pub fn num_samples(&self) -> usize {
        self.slots.iter().map(|s| s.samples.len()).sum()
    }

    pub fn ids_seen(&self) -> u64 {
        self.ids_seen
    }

    pub fn merges(&self) -> u64 {
        self.merges
    }

    /// Resident labels in slot order.
    pub fn resident_labels(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.label).collect()
    }

    pub fn samples_of(&self, label: usize) -> Option<&[Sample]> {
        self.slots
            .iter()
            .find(|s| s.label == label)
            .map(|s| s.samples.as_slice())
    }

    fn subsample(&mut self, mut samples: Vec<Sample>) -> Vec<Sample> {
        let k = self.config.per_id_cap;
        if samples.len() <= k {
            return samples;
        }
        let mut keep = sample(&mut self.rng, samples.len(), k).into_vec();
        keep.sort_unstable();
        let mut out = Vec::with_capacity(k);
        for (i, s) in samples.drain(..).enumerate() {
            if keep.binary_search(&i).is_ok() {
                out.push(s);
            }
        }
        out
    }

    fn check_offer(label: usize, samples: &[Sample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Protocol(format!("offer of id {label} carries no samples")));
        }
        if let Some(s) = samples.iter().find(|s| s.label != Some(label)) {
            return Err(Error::Protocol(format!(
                "sample tagged {:?} offered under id {label}",
                s.label
            )));
        }
        Ok(())
    }

    fn try_merge(&mut self, label: usize, samples: &[Sample]) -> Option<Admission> {
        let pos = self.slots.iter().position(|s| s.label == label)?;
        let mut merged = std::mem::take(&mut self.slots[pos].samples);
        merged.extend_from_slice(samples);
        self.slots[pos].samples = self.subsample(merged);
        self.merges += 1;
        Some(Admission::Merged)
    }

    /// Offers one identity under the configured identity policy.
    pub fn offer(&mut self, label: usize, samples: &[Sample]) -> Result<Admission> {
        match self.config.policy {
            MemoryPolicy::IdRs => self.offer_id(label, samples),
            MemoryPolicy::Fifo => self.fifo_offer(label, samples),
            MemoryPolicy::InstanceRs => {
                Self::check_offer(label, samples)?;
                let mut any = Admission::Rejected;
                for s in samples {
                    if self.instancewise_offer(s.clone())? != Admission::Rejected {
                        any = Admission::Admitted;
                    }
                }
                Ok(any)
            }
        }
    }

    /// ID-wise reservoir: admit while below `M`; otherwise admit with
    /// probability `M / n` by replacing a uniformly chosen resident.
    pub fn offer_id(&mut self, label: usize, samples: &[Sample]) -> Result<Admission> {
        Self::check_offer(label, samples)?;
        if let Some(a) = self.try_merge(label, samples) {
            return Ok(a);
        }
        self.ids_seen += 1;
        let m = self.config.capacity_ids;
        if self.slots.len() < m {
            let kept = self.subsample(samples.to_vec());
            self.slots.push(Slot { label, samples: kept });
            return Ok(Admission::Admitted);
        }
        let j = self.rng.random_range(0..self.ids_seen) as usize;
        if j >= m {
            return Ok(Admission::Rejected);
        }
        let evicted = self.slots[j].label;
        let kept = self.subsample(samples.to_vec());
        self.slots[j] = Slot { label, samples: kept };
        Ok(Admission::AdmittedEvicting(evicted))
    }

    /// First-in-first-out over identities.
    pub fn fifo_offer(&mut self, label: usize, samples: &[Sample]) -> Result<Admission> {
        Self::check_offer(label, samples)?;
        if let Some(a) = self.try_merge(label, samples) {
            return Ok(a);
        }
        self.ids_seen += 1;
        let kept = self.subsample(samples.to_vec());
        let mut result = Admission::Admitted;
        if self.slots.len() >= self.config.capacity_ids {
            result = Admission::AdmittedEvicting(self.slots.remove(0).label);
        }
        self.slots.push(Slot { label, samples: kept });
        Ok(result)
    }

    /// Classical reservoir over single samples with capacity `M × K`,
    /// ignoring identities.
    pub fn instancewise_offer(&mut self, s: Sample) -> Result<Admission> {
        let label = s
            .label
            .ok_or_else(|| Error::Protocol("instance-wise offer of an unlabeled sample".into()))?;
        self.samples_seen += 1;
        let cap = self.config.sample_capacity();
        let total = self.num_samples();
        if total < cap {
            self.push_sample(label, s);
            return Ok(Admission::Admitted);
        }
        let j = self.rng.random_range(0..self.samples_seen) as usize;
        if j >= cap {
            return Ok(Admission::Rejected);
        }
        self.remove_flat(j);
        self.push_sample(label, s);
        Ok(Admission::Admitted)
    }

    fn push_sample(&mut self, label: usize, s: Sample) {
        match self.slots.iter_mut().find(|sl| sl.label == label) {
            Some(slot) => slot.samples.push(s),
            None => {
                self.ids_seen += 1;
                self.slots.push(Slot {
                    label,
                    samples: vec![s],
                })
            }
        }
    }

    fn remove_flat(&mut self, mut j: usize) {
        for i in 0..self.slots.len() {
            let len = self.slots[i].samples.len();
            if j < len {
                self.slots[i].samples.remove(j);
                if self.slots[i].samples.is_empty() {
                    self.slots.remove(i);
                }
                return;
            }
            j -= len;
        }
    }

    /// `p` resident identities uniformly without replacement, `k` samples
    /// each (with replacement when a slot holds fewer than `k`).
    pub fn sample_old_batch<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
        if self.slots.len() < p {
            return Err(Error::WarmUp {
                resident: self.slots.len(),
                required: p,
            });
        }
        let mut inputs = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for i in sample(rng, self.slots.len(), p).into_iter() {
            let slot = &self.slots[i];
            let n = slot.samples.len();
            let picks: Vec<usize> = if n >= k {
                sample(rng, n, k).into_vec()
            } else {
                (0..k).map(|_| rng.random_range(0..n)).collect()
            };
            for j in picks {
                inputs.push(slot.samples[j].x.clone());
                labels.push(slot.label);
            }
        }
        Batch::new(inputs, labels, BatchKind::Old)
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            config: self.config.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| SlotSnapshot {
                    label: s.label,
                    samples: s.samples.iter().map(|x| SampleRef { stage: x.stage, index: x.index }).collect(),
                })
                .collect(),
            ids_seen: self.ids_seen,
            samples_seen: self.samples_seen,
            merges: self.merges,
            rng: self.rng.clone(),
        }
    }

    /// Rebuilds a buffer from a snapshot; `lookup` resolves stored sample
    /// references against regenerated data.
    pub fn restore<F>(snap: &MemorySnapshot, lookup: F) -> Result<Self>
    where
        F: Fn(SampleRef) -> Option<Sample>,
    {
        let mut slots = Vec::with_capacity(snap.slots.len());
        for s in &snap.slots {
            let samples = s
                .samples
                .iter()
                .map(|r| {
                    lookup(*r).map(|mut x| {
                        x.label = Some(s.label);
                        x
                    })
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Protocol(format!("snapshot of id {} references unknown samples", s.label)))?;
            slots.push(Slot {
                label: s.label,
                samples,
            });
        }
        Ok(Self {
            config: snap.config.clone(),
            slots,
            ids_seen: snap.ids_seen,
            samples_seen: snap.samples_seen,
            merges: snap.merges,
            rng: snap.rng.clone(),
        })
    }

    /// Label histogram of resident samples.
    pub fn label_counts(&self) -> BTreeMap<usize, usize> {
        self.slots.iter().map(|s| (s.label, s.samples.len())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub stage: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSnapshot {
    pub label: usize,
    pub samples: Vec<SampleRef>,
}

/// Serializable buffer state for resumable runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub config: MemoryConfig,
    pub slots: Vec<SlotSnapshot>,
    pub ids_seen: u64,
    pub samples_seen: u64,
    pub merges: u64,
    pub rng: ChaCha8Rng,
}
