//! The imitator G: a transposed-convolution generator that clones the engine,
//! plus its training loop.

use crate::autodiff::{self as ad, Elem, Mode, Tensor};
use crate::dataset::Dataset;
use crate::imgio::Image;
use crate::nn::{shuffled_indices, BatchNorm2d, ConvT2d, Net, Sgd, TrainConfig};
use crate::renderer::{ParamVector, IMG_SIDE, TOTAL_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Channel widths of the five transposed-conv layers (input is D=34).
const CHANNELS: [usize; 6] = [TOTAL_DIM, 256, 128, 64, 32, 3];

pub struct ImitatorNet {
    pub layers: Vec<ConvT2d>,
    pub bns: Vec<BatchNorm2d>,
}

/// The five-layer generator graph over any element type; used with f32
/// handles in production and f64 handles by the finite-difference oracle.
#[allow(clippy::type_complexity)]
pub fn forward_generic<T: Elem>(
    convs: &[(Tensor<T>, Tensor<T>)],
    bns: &[(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)],
    x: &Tensor<T>,
    mode: Mode,
) -> ad::Result<Tensor<T>> {
    assert_eq!(convs.len(), 5);
    assert_eq!(bns.len(), 4);
    let mut h = x.clone();
    for (i, (w, b)) in convs.iter().enumerate() {
        let (stride, padding) = if i == 0 { (1, 0) } else { (2, 1) };
        h = ad::conv2d_transpose(&h, w, b, stride, padding)?;
        if i < 4 {
            let (g, be, rm, rv) = &bns[i];
            h = ad::batchnorm(&h, g, be, rm, rv, mode)?;
            h = ad::relu(&h);
        }
    }
    Ok(h)
}

impl ImitatorNet {
    pub fn new(seed: u64) -> ImitatorNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut bns = Vec::new();
        for i in 0..5 {
            let (stride, padding) = if i == 0 { (1, 0) } else { (2, 1) };
            layers.push(ConvT2d::new(&mut rng, CHANNELS[i], CHANNELS[i + 1], 4, stride, padding));
            if i < 4 {
                bns.push(BatchNorm2d::new(CHANNELS[i + 1]));
            }
        }
        ImitatorNet { layers, bns }
    }

    fn handles(&self) -> (Vec<(Tensor, Tensor)>, Vec<(Tensor, Tensor, Tensor, Tensor)>) {
        let convs = self.layers.iter().map(|l| (l.w.clone(), l.b.clone())).collect();
        let bns = self
            .bns
            .iter()
            .map(|b| {
                (b.gamma.clone(), b.beta.clone(), b.running_mean.clone(), b.running_var.clone())
            })
            .collect();
        (convs, bns)
    }

    /// Same graph with f64 copies of the current weights, for oracles.
    #[allow(clippy::type_complexity)]
    pub fn f64_handles(
        &self,
    ) -> (Vec<(Tensor<f64>, Tensor<f64>)>, Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>)>)
    {
        let convs = self.layers.iter().map(|l| (l.w.to_f64(), l.b.to_f64())).collect();
        let bns = self
            .bns
            .iter()
            .map(|b| {
                (
                    b.gamma.to_f64(),
                    b.beta.to_f64(),
                    b.running_mean.to_f64(),
                    b.running_var.to_f64(),
                )
            })
            .collect();
        (convs, bns)
    }

    /// Forward over a batch: x is [N, 34, 1, 1], output [N, 3, 64, 64].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> ad::Result<Tensor> {
        let (convs, bns) = self.handles();
        forward_generic(&convs, &bns, x, mode)
    }

    /// Convenience: render one parameter vector through G in eval mode,
    /// clamped to [0,1] for display.
    pub fn generate(&self, p: &ParamVector) -> Image {
        let x = Tensor::new(p.flatten(), &[1, TOTAL_DIM, 1, 1]);
        let out = ad::no_grad(|| self.forward(&x, Mode::Eval).expect("imitator forward"));
        let data = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image { width: IMG_SIDE, height: IMG_SIDE, data }
    }
}

impl Net for ImitatorNet {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("deconv{i}.weight"), l.w.clone()));
            out.push((format!("deconv{i}.bias"), l.b.clone()));
        }
        for (i, b) in self.bns.iter().enumerate() {
            out.push((format!("bn{i}.gamma"), b.gamma.clone()));
            out.push((format!("bn{i}.beta"), b.beta.clone()));
            out.push((format!("bn{i}.running_mean"), b.running_mean.clone()));
            out.push((format!("bn{i}.running_var"), b.running_var.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_l1: f32,
    pub val_l1: f32,
    pub lr: f32,
}

pub struct TrainOutcome {
    pub stats: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_l1: f32,
}

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    /// Non-finite loss; carries the offending epoch.
    Divergence { epoch: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::Divergence { epoch } => write!(f, "divergence at epoch {epoch}"),
        }
    }
}

impl std::error::Error for TrainError {}

/// Batch of flattened parameter vectors as a [N,34,1,1] tensor.
pub fn batch_params(samples: &Dataset, indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * TOTAL_DIM);
    for &i in indices {
        data.extend(samples.samples[i].params.flatten());
    }
    Tensor::new(data, &[indices.len(), TOTAL_DIM, 1, 1])
}

/// Batch of target images as a [N,3,64,64] tensor.
pub fn batch_images(samples: &Dataset, indices: &[usize]) -> Tensor {
    let px = 3 * IMG_SIDE * IMG_SIDE;
    let mut data = Vec::with_capacity(indices.len() * px);
    for &i in indices {
        data.extend_from_slice(&samples.samples[i].image.data);
    }
    Tensor::new(data, &[indices.len(), 3, IMG_SIDE, IMG_SIDE])
}

/// Mean per-pixel L1 of G against the engine over the given indices.
/// Eval mode, no gradients; the eval-side output is clamped to the image
/// range [0,1] (only the training loss compares unclamped output).
pub fn eval_l1(net: &ImitatorNet, data: &Dataset, indices: &[usize], batch: usize) -> f32 {
    ad::no_grad(|| {
        let mut total = 0f64;
        let mut count = 0usize;
        for chunk in indices.chunks(batch) {
            let x = batch_params(data, chunk);
            let y = batch_images(data, chunk);
            let out = net.forward(&x, Mode::Eval).expect("imitator forward");
            total += out
                .with_data(|od| {
                    y.with_data(|yd| {
                        od.iter()
                            .zip(yd)
                            .map(|(&o, &t)| (o.clamp(0.0, 1.0) - t).abs() as f64)
                            .sum::<f64>()
                    })
                });
            count += out.len();
        }
        (total / count as f64) as f32
    })
}

/// Mean-image baseline: mean L1 between each validation render and the
/// pixel-wise mean of the training renders. Computed directly on raw image
/// buffers, independent of the network stack.
pub fn mean_image_baseline(data: &Dataset) -> f32 {
    let px = 3 * IMG_SIDE * IMG_SIDE;
    let mut mean = vec![0f64; px];
    for &i in &data.split.train {
        for (m, &v) in mean.iter_mut().zip(&data.samples[i].image.data) {
            *m += v as f64;
        }
    }
    let n = data.split.train.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut total = 0f64;
    for &i in &data.split.val {
        let img = &data.samples[i].image.data;
        let l1: f64 =
            img.iter().zip(&mean).map(|(&v, &m)| (v as f64 - m).abs()).sum::<f64>() / px as f64;
        total += l1;
    }
    (total / data.split.val.len() as f64) as f32
}

pub fn train_imitator(
    net: &ImitatorNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStat),
) -> Result<TrainOutcome, TrainError> {
    if data.split.train.is_empty() || data.split.val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net.parameters(), cfg.learning_rate, cfg.momentum);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut best_val = f32::INFINITY;
    let mut best_epoch = 0;
    let mut best_snap = net.snapshot();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at_epoch(epoch);
        let order: Vec<usize> =
            shuffled_indices(data.split.train.len(), &mut rng).iter().map(|&i| data.split.train[i]).collect();
        let mut epoch_loss = 0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_params(data, chunk);
            let y = batch_images(data, chunk);
            opt.zero_grad();
            let out = net.forward(&x, Mode::Train).expect("imitator forward");
            let loss = ad::l1_loss(&out, &y).expect("l1");
            let lv = loss.value();
            if !lv.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            loss.backward().expect("backward");
            opt.step();
            epoch_loss += lv as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_l1 = (epoch_loss / seen as f64) as f32;
        // Bigger eval batches amortize the GEMMs; eval mode is
        // batch-size-invariant (running BN stats), so only speed changes.
        let val_l1 = eval_l1(net, data, &data.split.val, cfg.batch_size.max(64));
        if !val_l1.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        if val_l1 < best_val {
            best_val = val_l1;
            best_epoch = epoch;
            best_snap = net.snapshot();
        }
        let stat = EpochStat { epoch, train_l1, val_l1, lr: opt.lr };
        progress(&stat);
        stats.push(stat);
    }
    net.restore(&best_snap);
    Ok(TrainOutcome { stats, best_epoch, best_val_l1: best_val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer;
    use tempfile::tempdir;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let dir = tempdir().unwrap();
        crate::dataset::generate(dir.path(), n, seed).unwrap();
        crate::dataset::read_dataset(dir.path()).unwrap()
    }

    #[test]
    fn output_shape_is_3x64x64() {
        let net = ImitatorNet::new(1);
        let x = Tensor::new(vec![0.5; 2 * TOTAL_DIM], &[2, TOTAL_DIM, 1, 1]);
        let out = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 64, 64]);
    }

    #[test]
    fn eval_mode_is_deterministic_across_batch() {
        let net = ImitatorNet::new(2);
        let one: Vec<f32> = renderer::ParamVector::average().flatten();
        let mut batch = Vec::new();
        for _ in 0..4 {
            batch.extend(&one);
        }
        let out = net.forward(&Tensor::new(batch, &[4, TOTAL_DIM, 1, 1]), Mode::Eval).unwrap();
        let d = out.data();
        let per = 3 * 64 * 64;
        for i in 1..4 {
            assert_eq!(d[..per], d[i * per..(i + 1) * per], "row {i} differs");
        }
    }

    #[test]
    fn gradient_wrt_input_matches_finite_differences() {
        let net = ImitatorNet::new(3);
        let (convs, bns) = net.f64_handles();
        let mut x0: Vec<f64> = renderer::ParamVector::average().flatten().iter().map(|&v| v as f64).collect();
        for (i, v) in x0.iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0) / 7.0;
        }
        let r = crate::gradcheck::check_scalar_fn(
            "imitator/input",
            &x0,
            &[1, TOTAL_DIM, 1, 1],
            1e-3,
            move |x| {
                ad::mean_all(&forward_generic(&convs, &bns, x, Mode::Eval).unwrap())
            },
        );
        assert!(r.pass, "{r}");
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let data = tiny_dataset(40, 11);
        let cfg = TrainConfig { epochs: 3, seed: 5, ..Default::default() };

        let net1 = ImitatorNet::new(7);
        let out1 = train_imitator(&net1, &data, &cfg, |_| {}).unwrap();
        assert!(
            out1.stats.last().unwrap().train_l1 < out1.stats[0].train_l1,
            "loss did not decrease: {:?}",
            out1.stats
        );

        let net2 = ImitatorNet::new(7);
        let out2 = train_imitator(&net2, &data, &cfg, |_| {}).unwrap();
        assert_eq!(net1.layers[0].w.data(), net2.layers[0].w.data());
        assert_eq!(out1.best_epoch, out2.best_epoch);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut data = tiny_dataset(5, 1);
        data.split.train.clear();
        assert!(matches!(
            train_imitator(&ImitatorNet::new(1), &data, &TrainConfig::default(), |_| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let net = ImitatorNet::new(9);
        net.save(&path).unwrap();
        let other = ImitatorNet::new(10);
        other.load(&path).unwrap();
        for ((_, a), (_, b)) in net.named_tensors().iter().zip(other.named_tensors().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn baseline_is_positive_on_varied_data() {
        let data = tiny_dataset(20, 13);
        let b = mean_image_baseline(&data);
        assert!(b > 0.01, "baseline suspiciously small: {b}");
    }
}
