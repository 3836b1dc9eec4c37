use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use unas_autodiff::Array;

use crate::error::{Error, Result};
use crate::rng::Streams;

/// Features `[n, d]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Array,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        Batch {
            x: Array::matrix(idx.len(), d, data),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// `size` rows drawn uniformly with replacement; the whole batch when
    /// `size` is 0 or at least the batch length.
    pub fn minibatch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        if size == 0 || size >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&idx)
    }
}

/// Gaussian-blob classification generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Distance scale between class centres, in units of the within-class
    /// standard deviation.
    pub separation: f64,
    /// Fraction of training labels replaced by a different random class.
    pub label_noise: f64,
    /// Blobs per class; more than one makes the classes non-convex.
    pub modes: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            dim: 8,
            classes: 3,
            train_size: 256,
            val_size: 256,
            separation: 2.0,
            label_noise: 0.0,
            modes: 1,
            seed: 0,
        }
    }
}

/// Train and validation splits drawn from disjoint samples of the same
/// blobs. Label noise touches the train split only.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub spec: TaskSpec,
    pub train: Batch,
    pub val: Batch,
}

impl ToyTask {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        if spec.dim == 0
            || spec.classes < 2
            || spec.modes == 0
            || spec.train_size == 0
            || spec.val_size == 0
        {
            return Err(Error::Config(
                "task needs dim >= 1, classes >= 2, modes >= 1 and nonempty splits".into(),
            ));
        }
        if !(0.0..=1.0).contains(&spec.label_noise) {
            return Err(Error::Config(format!(
                "label_noise {} outside [0, 1]",
                spec.label_noise
            )));
        }
        let streams = Streams::new(spec.seed);
        let mut rng = streams.stream(0);
        let centres: Vec<Vec<f64>> = (0..spec.classes * spec.modes)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        spec.separation * g
                    })
                    .collect()
            })
            .collect();
        let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut data = Vec::with_capacity(n * spec.dim);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % spec.classes;
                let mode = (i / spec.classes) % spec.modes;
                y.push(c);
                for &m in &centres[c * spec.modes + mode] {
                    let e: f64 = StandardNormal.sample(rng);
                    data.push(m + e);
                }
            }
            Batch {
                x: Array::matrix(n, spec.dim, data),
                y,
            }
        };
        let mut train = draw(spec.train_size, &mut streams.stream(1));
        let val = draw(spec.val_size, &mut streams.stream(2));
        let mut noise = streams.stream(3);
        for label in &mut train.y {
            if noise.random::<f64>() < spec.label_noise {
                let shift = noise.random_range(1..spec.classes);
                *label = (*label + shift) % spec.classes;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            train,
            val,
        })
    }
}
