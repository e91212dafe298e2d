//! Seeded, stream-separated random number generation.
//!
//! Every draw in the system comes from a ChaCha8 generator keyed by a 64-bit
//! seed and a stream label. The label is hashed (FNV-1a) into the ChaCha
//! stream id, so independent consumers never share a sequence and adding a
//! new consumer does not perturb existing ones.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Name recorded in reports so results can be reproduced exactly.
pub const GENERATOR: &str = "chacha8/fnv1a-stream/standard-normal-ziggurat";

fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: String,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(stream));
        Self {
            seed,
            stream: stream.to_owned(),
            inner,
        }
    }

    /// A fresh generator on the sub-stream `"<stream>/<label>"`, independent
    /// of how many values have been drawn from `self`.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(self.seed, &format!("{}/{label}", self.stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `low..=high`.
    pub fn int_inclusive(&mut self, low: usize, high: usize) -> usize {
        self.inner.random_range(low..=high)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        Tensor::new(rows, cols, self.normal_vec(rows * cols, std))
            .expect("gaussian draws are finite")
    }

    /// A `rows x cols` matrix with orthonormal columns (`rows >= cols`), from
    /// Gram-Schmidt on gaussian columns.
    pub fn orthonormal_columns(&mut self, rows: usize, cols: usize) -> Tensor {
        assert!(rows >= cols, "need rows >= cols for orthonormal columns");
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while columns.len() < cols {
            let mut v = self.normal_vec(rows, 1.0);
            for c in &columns {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= proj * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            columns.push(v.into_iter().map(|x| x / norm).collect());
        }
        let mut t = Tensor::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                t.set(i, j, *v);
            }
        }
        t
    }
}
