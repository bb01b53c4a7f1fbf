use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::augment;
use super::PlanEntry;
use super::{assemble_input, rebalance, Manifest, ManifestRow, Modality};
use crate::error::{Error, Result};
use crate::tensor::{deterministic, map_indices, Tensor};

/// A preprocessed network input `[C, S, S]` with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub patient_id: String,
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Arc<Vec<Example>>,
    pub modality: Modality,
    pub size: usize,
}

impl Dataset {
    /// Loads and preprocesses `rows` of `manifest`, preserving row order.
    pub fn load(manifest: &Manifest, rows: &[&ManifestRow], modality: Modality, size: usize) -> Result<Self> {
        let examples = map_indices(rows.len(), |i| -> Result<Example> {
            let sample = manifest.load_sample(rows[i])?;
            Ok(Example {
                patient_id: sample.patient_id.clone(),
                x: assemble_input(&sample, modality, size)?,
                label: sample.label,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples: Arc::new(examples),
            modality,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Order, duplication and augmentation seeds for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub entries: Vec<PlanEntry>,
    /// Per-entry augmentation seed.
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub augment: bool,
}

impl EpochPlan {
    /// Draws the epoch from stream `epoch` of the master seed: rebalance,
    /// shuffle, then one augmentation seed per entry in final order.
    pub fn new(labels: &[usize], seed: u64, epoch: u64, batch_size: usize, balance: bool, augment: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("epoch_plan", "batch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut entries = if balance {
            rebalance(labels, &mut rng)?
        } else {
            (0..labels.len())
                .map(|index| PlanEntry {
                    index,
                    duplicate: false,
                })
                .collect()
        };
        entries.shuffle(&mut rng);
        let seeds = entries.iter().map(|_| rng.gen()).collect();
        Ok(Self {
            entries,
            seeds,
            batch_size,
            augment,
        })
    }

    /// Fixed order without shuffling or augmentation, for evaluation.
    pub fn sequential(n: usize, batch_size: usize) -> Self {
        Self {
            entries: (0..n)
                .map(|index| PlanEntry {
                    index,
                    duplicate: false,
                })
                .collect(),
            seeds: vec![0; n],
            batch_size: batch_size.max(1),
            augment: false,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.entries.len().div_ceil(self.batch_size)
    }

    pub fn make_batch(&self, examples: &[Example], b: usize) -> Result<Batch> {
        let start = b * self.batch_size;
        let end = (start + self.batch_size).min(self.entries.len());
        if start >= end {
            return Err(Error::invalid("make_batch", format!("batch {b} out of range")));
        }
        let xs = map_indices(end - start, |k| -> Result<Tensor> {
            let entry = self.entries[start + k];
            let x = &examples[entry.index].x;
            if self.augment {
                augment(x, self.seeds[start + k])
            } else {
                Ok(x.clone())
            }
        });
        let mut shape = vec![end - start];
        let mut data = Vec::new();
        for x in xs {
            let x = x?;
            if shape.len() == 1 {
                shape.extend_from_slice(x.shape());
            }
            data.extend(x.into_data());
        }
        let entries = &self.entries[start..end];
        Ok(Batch {
            x: Tensor::new(shape, data)?,
            labels: entries.iter().map(|e| examples[e.index].label).collect(),
            indices: entries.iter().map(|e| e.index).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, C, S, S]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

/// Iterator over an epoch's batches. With `prefetch` (and determinism off),
/// batches are prepared one ahead on a worker thread; order is unchanged.
pub struct BatchStream {
    inner: StreamInner,
}

enum StreamInner {
    Inline {
        examples: Arc<Vec<Example>>,
        plan: EpochPlan,
        next: usize,
    },
    Prefetch {
        rx: Receiver<Result<Batch>>,
        worker: Option<JoinHandle<()>>,
    },
}

impl BatchStream {
    pub fn new(examples: Arc<Vec<Example>>, plan: EpochPlan, prefetch: bool) -> Self {
        if !prefetch || deterministic() {
            return Self {
                inner: StreamInner::Inline {
                    examples,
                    plan,
                    next: 0,
                },
            };
        }
        let (tx, rx) = sync_channel(2);
        let worker = std::thread::spawn(move || {
            for b in 0..plan.num_batches() {
                if tx.send(plan.make_batch(&examples, b)).is_err() {
                    break;
                }
            }
        });
        Self {
            inner: StreamInner::Prefetch {
                rx,
                worker: Some(worker),
            },
        }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            StreamInner::Inline { examples, plan, next } => {
                if *next >= plan.num_batches() {
                    return None;
                }
                *next += 1;
                Some(plan.make_batch(examples, *next - 1))
            }
            StreamInner::Prefetch { rx, worker } => match rx.recv() {
                Ok(b) => Some(b),
                Err(_) => {
                    if let Some(w) = worker.take() {
                        let _ = w.join();
                    }
                    None
                }
            },
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let StreamInner::Prefetch { rx, worker } = &mut self.inner {
            // Unblock the worker before joining.
            while rx.try_recv().is_ok() {}
            let (_, dummy) = sync_channel(0);
            drop(std::mem::replace(rx, dummy));
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}
