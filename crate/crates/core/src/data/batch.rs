use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, PdaDataset};
use crate::autodiff::Tensor;

/// One training step's worth of samples: equal halves from each domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Tensor,
    pub source_labels: Vec<usize>,
    pub target: Tensor,
    pub source_index: Vec<usize>,
    pub target_index: Vec<usize>,
}

impl Batch {
    pub fn num_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn num_target(&self) -> usize {
        self.target.rows()
    }

    /// Source rows followed by target rows.
    pub fn stacked(&self) -> Tensor {
        Tensor::vstack(&self.source, &self.target).expect("same feature width")
    }
}

/// Shuffled index stream over one split, reshuffled on every pass and
/// dropping the remainder that does not fill a batch.
#[derive(Debug)]
struct Cursor {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Cursor { perm, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.pos + k > self.perm.len() {
            self.perm.sort_unstable();
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

/// Endless stream of [`Batch`]es.
///
/// An epoch is one pass over the source split; each source sample appears at
/// most once per epoch. The target split runs on its own shuffled cursor.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    ds: &'a PdaDataset,
    half: usize,
    source: Cursor,
    target: Cursor,
}

impl<'a> BatchIterator<'a> {
    pub fn new(ds: &'a PdaDataset, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(DataError::Validation(format!(
                "batch size must be even and at least 2, got {batch_size}"
            )));
        }
        let half = batch_size / 2;
        if half > ds.num_source() || half > ds.num_target() {
            return Err(DataError::Validation(format!(
                "batch size {batch_size} needs {half} samples per domain; have {} source and {} target",
                ds.num_source(),
                ds.num_target()
            )));
        }
        if batch_size < 2 * ds.source_classes().len() {
            log::warn!(
                "batch size {batch_size} is below twice the number of source classes ({}); \
                 per-batch class coverage will be sparse",
                ds.source_classes().len()
            );
        }
        Ok(BatchIterator {
            ds,
            half,
            source: Cursor::new(ds.num_source(), seed, 0),
            target: Cursor::new(ds.num_target(), seed, 1),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.ds.num_source() / self.half
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let source_index = self.source.take(self.half);
        let target_index = self.target.take(self.half);
        Some(Batch {
            source: self.ds.gather_source(&source_index),
            source_labels: source_index
                .iter()
                .map(|&i| self.ds.source_labels()[i])
                .collect(),
            target: self.ds.gather_target(&target_index),
            source_index,
            target_index,
        })
    }
}
