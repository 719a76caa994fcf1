// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Temperature / top-k sampling settings. Temperature 0 means greedy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampler {
    pub temperature: f32,
    /// 0 disables top-k filtering.
    #[serde(default)]
    pub top_k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            seed: 0,
        }
    }
}

impl Sampler {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&self, logits: &[f32], rng: &mut R) -> usize {
        if self.temperature <= 0.0 {
            return argmax(logits);
        }
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        if self.top_k > 0 && self.top_k < logits.len() {
            // stable sort keeps ties in id order
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
            idx.truncate(self.top_k);
        }
        let max = idx.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
        let weights: Vec<f64> = idx
            .iter()
            .map(|&i| f64::from((logits[i] - max) / self.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&i, w) in idx.iter().zip(&weights) {
            if u < *w {
                return i;
            }
            u -= w;
        }
        *idx.last().expect("nonempty logits")
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_picks_first_max() {
        let s = Sampler::greedy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.sample(&[0.1, 2.0, 2.0, -1.0], &mut rng), 1);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let s = Sampler {
            temperature: 1.0,
            top_k: 1,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(s.sample(&[0.0, 0.5, 3.0, 1.0], &mut rng), 2);
        }
    }
}
