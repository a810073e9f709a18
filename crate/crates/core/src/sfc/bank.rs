use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synthworld::ClassId;

/// One slot per foreground class holding the index of the most recent
/// training scene that contained the class.
#[derive(Clone, Debug)]
pub struct ImageBank {
    slots: Vec<Option<usize>>,
    rng: ChaCha8Rng,
}

impl ImageBank {
    pub fn new(class_count: usize, seed: u64) -> Self {
        Self {
            slots: vec![None; class_count],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn slot(&self, class: ClassId) -> Option<usize> {
        self.slots[class - 1]
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn reseed(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Sets `slots[c]` directly; used to prime a bank in tests and tools.
    pub fn fill(&mut self, class: ClassId, scene: usize) {
        self.slots[class - 1] = Some(scene);
    }
}

/// Visits the batch in order; each scene overwrites the slots of its classes.
pub fn bank_update<'a>(bank: &mut ImageBank, batch: impl IntoIterator<Item = (usize, &'a [ClassId])>) {
    for (scene, classes) in batch {
        for &c in classes {
            bank.slots[c - 1] = Some(scene);
        }
    }
}

/// `n_ibr` uniform draws with replacement over the filled slots.
pub fn bank_sample(bank: &mut ImageBank, n_ibr: usize) -> Vec<usize> {
    let filled: Vec<usize> = bank.slots.iter().flatten().copied().collect();
    if filled.is_empty() {
        return Vec::new();
    }
    (0..n_ibr)
        .map(|_| filled[bank.rng.gen_range(0..filled.len())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_rules() {
        let mut bank = ImageBank::new(3, 0);
        bank_update(&mut bank, [(7, &[1, 2][..])]);
        assert_eq!(bank.slots(), &[Some(7), Some(7), None]);
        bank_update(&mut bank, [(8, &[1][..]), (9, &[1][..])]);
        assert_eq!(bank.slots(), &[Some(9), Some(7), None]);
    }

    #[test]
    fn sampling_degenerate_cases() {
        let mut bank = ImageBank::new(3, 1);
        assert!(bank_sample(&mut bank, 4).is_empty());
        bank.fill(2, 5);
        assert_eq!(bank_sample(&mut bank, 4), vec![5; 4]);
    }
}
