use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

/// Pre-sampled inverted-dropout mask.
///
/// Kept elements are scaled by `1 / (1 - rate)`, dropped elements by 0. The
/// mask is a value so that a finite-difference check can replay it.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    factors: Vec<f64>,
}

impl DropoutMask {
    pub fn identity(len: usize) -> Self {
        Self { factors: vec![1.0; len] }
    }

    pub fn sample<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return Self::identity(len);
        }
        if rate >= 1.0 {
            return Self { factors: vec![0.0; len] };
        }
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..len).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        Self { factors }
    }

    /// Samples a mask when `train` is set, identity otherwise.
    pub fn for_mode<R: Rng + ?Sized>(len: usize, rate: f64, train: bool, rng: &mut R) -> Self {
        if train {
            Self::sample(len, rate, rng)
        } else {
            Self::identity(len)
        }
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn dropped(&self) -> usize {
        self.factors.iter().filter(|&&f| f == 0.0).count()
    }
}
