//! Layer wrappers, weight initialization, the SGD-with-momentum optimizer and
//! checkpoint (de)serialization glue shared by every network.

use crate::autodiff::{self as ad, Mode, Result as AdResult, Tensor};
use crate::ckpt::{self, CkptError, Entry};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let fan_in = in_ch * k * k;
        let bound = (1.0 / fan_in as f32).sqrt();
        Conv2d {
            w: Tensor::param(uniform_init(rng, out_ch * in_ch * k * k, bound), &[out_ch, in_ch, k, k]),
            b: Tensor::param(uniform_init(rng, out_ch, bound), &[out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> AdResult<Tensor> {
        ad::conv2d(x, &self.w, &self.b, self.stride, self.padding)
    }
}

/// Transposed convolution; weight layout [in_ch, out_ch, k, k].
pub struct ConvT2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvT2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvT2d {
        let fan_in = in_ch * k * k;
        let bound = (1.0 / fan_in as f32).sqrt();
        ConvT2d {
            w: Tensor::param(uniform_init(rng, in_ch * out_ch * k * k, bound), &[in_ch, out_ch, k, k]),
            b: Tensor::param(uniform_init(rng, out_ch, bound), &[out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> AdResult<Tensor> {
        ad::conv2d_transpose(x, &self.w, &self.b, self.stride, self.padding)
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(vec![1.0; ch], &[ch]),
            beta: Tensor::param(vec![0.0; ch], &[ch]),
            running_mean: Tensor::new(vec![0.0; ch], &[ch]),
            running_var: Tensor::new(vec![1.0; ch], &[ch]),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> AdResult<Tensor> {
        ad::batchnorm(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, mode)
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_f: usize, out_f: usize) -> Linear {
        let bound = (1.0 / in_f as f32).sqrt();
        Linear {
            w: Tensor::param(uniform_init(rng, out_f * in_f, bound), &[out_f, in_f]),
            b: Tensor::param(uniform_init(rng, out_f, bound), &[out_f]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> AdResult<Tensor> {
        ad::linear(x, &self.w, &self.b)
    }
}

/// Anything that can enumerate its tensors by name. Trainable parameters are
/// the subset with requires_grad; running stats ride along for checkpoints.
pub trait Net {
    fn named_tensors(&self) -> Vec<(String, Tensor)>;

    fn parameters(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).filter(|t| t.requires_grad()).collect()
    }

    fn save(&self, path: &Path) -> Result<(), CkptError> {
        let entries: Vec<Entry> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| Entry { name, shape: t.shape(), data: t.data() })
            .collect();
        ckpt::save(path, &entries)
    }

    /// Loads a checkpoint into this architecture; the first name or shape
    /// mismatch is reported by tensor name.
    fn load(&self, path: &Path) -> Result<(), CkptError> {
        let entries = ckpt::load(path)?;
        let mine = self.named_tensors();
        if entries.len() != mine.len() {
            return Err(CkptError::Incompatible(format!(
                "checkpoint has {} tensors, architecture expects {}",
                entries.len(),
                mine.len()
            )));
        }
        for ((name, tensor), entry) in mine.into_iter().zip(&entries) {
            if entry.name != name {
                return Err(CkptError::Incompatible(format!(
                    "architecture mismatch at tensor `{name}` (checkpoint has `{}`)",
                    entry.name
                )));
            }
            if entry.shape != tensor.shape() {
                return Err(CkptError::Incompatible(format!(
                    "architecture mismatch at tensor `{name}`: shape {:?} vs expected {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(entry.data.clone());
        }
        Ok(())
    }

    /// Snapshot of all tensor values, for best-epoch retention.
    fn snapshot(&self) -> Vec<Vec<f32>> {
        self.named_tensors().iter().map(|(_, t)| t.data()).collect()
    }

    fn restore(&self, snap: &[Vec<f32>]) {
        for ((_, t), d) in self.named_tensors().iter().zip(snap) {
            t.set_data(d.clone());
        }
    }
}

/// Plain SGD with classical momentum: v ← m·v + g; p ← p − lr·v.
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f32>>,
    pub lr: f32,
    pub momentum: f32,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f32, momentum: f32) -> Sgd {
        let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Sgd { params, velocity, lr, momentum }
    }

    pub fn step(&mut self) {
        for (p, v) in self.params.iter().zip(&mut self.velocity) {
            let Some(g) = p.grad() else { continue };
            p.map_data_mut(|data| {
                for ((d, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                    *vi = self.momentum * *vi + gi;
                    *d -= self.lr * *vi;
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Deterministic in-place Fisher-Yates shuffle of indices.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Shared training-loop hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Multiplicative LR decay factor applied every `decay_every` epochs.
    pub lr_decay: f32,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 0.9,
            decay_every: 50,
            epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}
