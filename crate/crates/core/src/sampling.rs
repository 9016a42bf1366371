use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded minibatch sampler: without replacement within an epoch, reshuffled
/// at every epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        if self.order.is_empty() {
            return batch;
        }
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Independent stream for a `(seed, index)` pair.
pub fn keyed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_every_index_once() {
        let mut s = EpochSampler::new(10, 3);
        let mut seen = s.next_batch(4);
        seen.extend(s.next_batch(6));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let mut a = EpochSampler::new(7, 1);
        let mut b = EpochSampler::new(7, 1);
        for _ in 0..5 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
    }

    proptest::proptest! {
        #[test]
        fn every_epoch_is_a_permutation(n in 1usize..40, batch in 1usize..13, seed in 0u64..1000) {
            let mut s = EpochSampler::new(n, seed);
            let drawn: Vec<usize> = (0..n * 3).map(|_| s.next_batch(1)[0]).collect();
            for epoch in drawn.chunks(n) {
                let mut e = epoch.to_vec();
                e.sort();
                proptest::prop_assert_eq!(e, (0..n).collect::<Vec<_>>());
            }
            let mut by_batch = EpochSampler::new(n, seed);
            let mut flat = Vec::new();
            while flat.len() < drawn.len() {
                flat.extend(by_batch.next_batch(batch));
            }
            flat.truncate(drawn.len());
            proptest::prop_assert_eq!(flat, drawn);
        }
    }
}
