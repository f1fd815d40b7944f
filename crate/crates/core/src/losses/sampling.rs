use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Pair;

/// One optimization step's worth of samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    /// `(user, positive item, negative item)`
    pub bpr: Vec<(u32, u32, u32)>,
    /// `(user, item j1, item j2)` with no polarity constraint on the items.
    pub kd: Vec<(u32, u32, u32)>,
}

impl TrainingBatch {
    /// Distinct users across both tuple kinds, ascending.
    pub fn users(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.bpr.iter().map(|t| t.0 as usize).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// Distinct BPR items (positives and negatives), ascending.
    pub fn items(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.bpr.iter().flat_map(|t| [t.1 as usize, t.2 as usize]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Draws BPR triples over the training interactions and unconstrained KD tuples.
#[derive(Debug, Clone)]
pub struct Sampler {
    num_users: usize,
    num_items: usize,
    train: Vec<Pair>,
    positives: Vec<Vec<u32>>,
}

impl Sampler {
    pub fn new(num_users: usize, num_items: usize, train: &[Pair]) -> Self {
        let mut positives = vec![Vec::new(); num_users];
        for &(u, v) in train {
            positives[u as usize].push(v);
        }
        for p in &mut positives {
            p.sort_unstable();
            p.dedup();
        }
        Sampler {
            num_users,
            num_items,
            train: train.to_vec(),
            positives,
        }
    }

    pub fn is_positive(&self, u: usize, v: u32) -> bool {
        self.positives[u].binary_search(&v).is_ok()
    }

    /// Uniform item the user has not interacted with (rejection sampling).
    /// Falls back to any item for users who interacted with everything.
    pub fn negative<R: Rng>(&self, u: usize, rng: &mut R) -> u32 {
        if self.positives[u].len() >= self.num_items {
            return rng.random_range(0..self.num_items as u32);
        }
        loop {
            let v = rng.random_range(0..self.num_items as u32);
            if !self.is_positive(u, v) {
                return v;
            }
        }
    }

    /// One epoch: every training interaction once, shuffled, cut into batches.
    /// KD tuples per batch match the BPR batch size.
    pub fn epoch<R: Rng>(&self, batch_size: usize, with_kd: bool, rng: &mut R) -> Vec<TrainingBatch> {
        let mut order = self.train.clone();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let bpr = chunk
                    .iter()
                    .map(|&(u, v)| (u, v, self.negative(u as usize, rng)))
                    .collect::<Vec<_>>();
                let kd = if with_kd {
                    (0..bpr.len())
                        .map(|_| {
                            (
                                rng.random_range(0..self.num_users as u32),
                                rng.random_range(0..self.num_items as u32),
                                rng.random_range(0..self.num_items as u32),
                            )
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                TrainingBatch { bpr, kd }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn negatives_are_never_positive() {
        let train: Vec<Pair> = (0..10).flat_map(|u| (0..5).map(move |v| (u, (u + v) % 12))).collect();
        let s = Sampler::new(10, 12, &train);
        let mut r = rng::stream(0, rng::SAMPLING);
        for batch in s.epoch(7, true, &mut r) {
            for &(u, p, n) in &batch.bpr {
                assert!(s.is_positive(u as usize, p));
                assert!(!s.is_positive(u as usize, n));
            }
            assert_eq!(batch.kd.len(), batch.bpr.len());
        }
    }

    #[test]
    fn epoch_covers_every_interaction_once() {
        let train: Vec<Pair> = vec![(0, 0), (0, 1), (1, 2), (2, 0), (2, 2)];
        let s = Sampler::new(3, 4, &train);
        let batches = s.epoch(2, false, &mut rng::stream(1, rng::SAMPLING));
        let mut seen: Vec<Pair> = batches.iter().flat_map(|b| b.bpr.iter().map(|t| (t.0, t.1))).collect();
        seen.sort_unstable();
        assert_eq!(seen, train);
        assert!(batches.iter().all(|b| b.kd.is_empty()));
    }
}
