//! Mixed-domain mini-batches: half source, half target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Indices into the source and target training corpora.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Endless shuffled pass over `0..n`, reshuffled each time it wraps.
#[derive(Clone, Debug)]
struct CyclicStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = CyclicStream {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Batch generator whose streams persist across epochs. An epoch is
/// `max(1, floor(max(Ns, Nt) / half))` batches, so the larger corpus is
/// consumed about once per epoch.
#[derive(Clone, Debug)]
pub struct MixedBatches {
    source: CyclicStream,
    target: CyclicStream,
    half: usize,
    per_epoch: usize,
}

impl MixedBatches {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_source == 0 {
            return Err(Error::EmptyCorpus("source training corpus"));
        }
        if n_target == 0 {
            return Err(Error::EmptyCorpus("target training corpus"));
        }
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {batch_size}"
            )));
        }
        let half = batch_size / 2;
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let source = CyclicStream::new(n_source, ChaCha8Rng::from_rng(&mut seeder).unwrap());
        let target = CyclicStream::new(n_target, ChaCha8Rng::from_rng(&mut seeder).unwrap());
        Ok(MixedBatches {
            source,
            target,
            half,
            per_epoch: (n_source.max(n_target) / half).max(1),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        Batch {
            source: self.source.take(self.half),
            target: self.target.take(self.half),
        }
    }

    pub fn epoch(&mut self) -> Vec<Batch> {
        (0..self.per_epoch).map(|_| self.next_batch()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_epoch_sizes() {
        let mut b = MixedBatches::new(64, 64, 64, 1).unwrap();
        let e = b.epoch();
        assert_eq!(e.len(), 2);
        assert!(e.iter().all(|x| x.source.len() == 32 && x.target.len() == 32));
    }

    #[test]
    fn smaller_corpus_recycles() {
        let mut b = MixedBatches::new(100, 40, 64, 3).unwrap();
        let e = b.epoch();
        assert_eq!(e.len(), 3);
        let targets: Vec<usize> = e.iter().flat_map(|x| x.target.clone()).collect();
        // the first 40 draws are a permutation of the corpus
        let mut first: Vec<usize> = targets[..40].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..40).collect::<Vec<_>>());
        // 96 source draws without repetition
        let mut src: Vec<usize> = e.iter().flat_map(|x| x.source.clone()).collect();
        src.sort_unstable();
        src.dedup();
        assert_eq!(src.len(), 96);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = MixedBatches::new(50, 30, 8, 7).unwrap().epoch();
        let b = MixedBatches::new(50, 30, 8, 7).unwrap().epoch();
        let c = MixedBatches::new(50, 30, 8, 8).unwrap().epoch();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty() {
        assert!(MixedBatches::new(0, 3, 64, 0).is_err());
        assert!(MixedBatches::new(3, 0, 64, 0).is_err());
    }
}
