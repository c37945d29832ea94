//! The two frozen measurement networks: F1, an identity embedder trained by
//! classification, and F2, a semantic segmenter whose features and class
//! probabilities drive the facial content loss.

use crate::autodiff::{self as ad, Elem, Mode, Tensor};
use crate::dataset::Dataset;
use crate::imgio::{Image, LabelMap, CLASS_EYE, CLASS_MOUTH, CLASS_NOSE, NUM_CLASSES};
use crate::nn::{shuffled_indices, BatchNorm2d, Conv2d, Linear, Net, Sgd, TrainConfig};
use crate::renderer::{IdentityView, IMG_SIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

pub const EMBED_DIM: usize = 32;
/// Segmenter feature/logit resolution (output stride 1/4 of 64).
pub const SEG_SIDE: usize = IMG_SIDE / 4;

#[derive(Debug)]
pub enum ExtractorError {
    /// Identity corpus with fewer than two classes.
    SingleClass,
    Train(crate::imitator::TrainError),
}

impl fmt::Display for ExtractorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorError::SingleClass => write!(f, "identity corpus has fewer than two classes"),
            ExtractorError::Train(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ExtractorError {}

// ---------------------------------------------------------------------------
// F1: recognizer
// ---------------------------------------------------------------------------

pub struct RecognizerNet {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub embed: Linear,
    pub head: Linear,
    pub num_classes: usize,
}

const REC_CHANNELS: [usize; 5] = [3, 32, 64, 128, 128];

/// Recognizer trunk over any element type; returns the 32-d embedding batch.
#[allow(clippy::type_complexity)]
pub fn recognizer_embed_generic<T: Elem>(
    convs: &[(Tensor<T>, Tensor<T>)],
    bns: &[(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)],
    embed: &(Tensor<T>, Tensor<T>),
    x: &Tensor<T>,
    mode: Mode,
) -> ad::Result<Tensor<T>> {
    let mut h = x.clone();
    for ((w, b), (g, be, rm, rv)) in convs.iter().zip(bns) {
        h = ad::conv2d(&h, w, b, 1, 1)?;
        h = ad::batchnorm(&h, g, be, rm, rv, mode)?;
        h = ad::relu(&h);
        h = ad::maxpool2d(&h, 2, 2)?;
    }
    let s = h.shape();
    let flat = ad::reshape(&h, &[s[0], s[1] * s[2] * s[3]])?;
    ad::linear(&flat, &embed.0, &embed.1)
}

impl RecognizerNet {
    pub fn new(seed: u64, num_classes: usize) -> RecognizerNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(&mut rng, REC_CHANNELS[i], REC_CHANNELS[i + 1], 3, 1, 1));
            bns.push(BatchNorm2d::new(REC_CHANNELS[i + 1]));
        }
        let flat = REC_CHANNELS[4] * (IMG_SIDE / 16) * (IMG_SIDE / 16);
        RecognizerNet {
            convs,
            bns,
            embed: Linear::new(&mut rng, flat, EMBED_DIM),
            head: Linear::new(&mut rng, EMBED_DIM, num_classes),
            num_classes,
        }
    }

    fn handles(&self) -> (Vec<(Tensor, Tensor)>, Vec<(Tensor, Tensor, Tensor, Tensor)>) {
        let convs = self.convs.iter().map(|c| (c.w.clone(), c.b.clone())).collect();
        let bns = self
            .bns
            .iter()
            .map(|b| (b.gamma.clone(), b.beta.clone(), b.running_mean.clone(), b.running_var.clone()))
            .collect();
        (convs, bns)
    }

    /// Embedding batch: x [N,3,64,64] → [N,32].
    pub fn embed_batch(&self, x: &Tensor, mode: Mode) -> ad::Result<Tensor> {
        let (convs, bns) = self.handles();
        recognizer_embed_generic(&convs, &bns, &(self.embed.w.clone(), self.embed.b.clone()), x, mode)
    }

    /// Class logits (training head).
    pub fn logits(&self, x: &Tensor, mode: Mode) -> ad::Result<Tensor> {
        self.head.forward(&self.embed_batch(x, mode)?)
    }

    /// Detached eval-mode embedding of a single image.
    pub fn embed_image(&self, img: &Image) -> Vec<f32> {
        let x = Tensor::new(img.data.clone(), &[1, 3, IMG_SIDE, IMG_SIDE]);
        ad::no_grad(|| self.embed_batch(&x, Mode::Eval).expect("embed").data())
    }

    /// f64 copies of trunk + embedding weights, for the FD oracle.
    #[allow(clippy::type_complexity)]
    pub fn f64_handles(
        &self,
    ) -> (
        Vec<(Tensor<f64>, Tensor<f64>)>,
        Vec<(Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>)>,
        (Tensor<f64>, Tensor<f64>),
    ) {
        let convs = self.convs.iter().map(|c| (c.w.to_f64(), c.b.to_f64())).collect();
        let bns = self
            .bns
            .iter()
            .map(|b| (b.gamma.to_f64(), b.beta.to_f64(), b.running_mean.to_f64(), b.running_var.to_f64()))
            .collect();
        (convs, bns, (self.embed.w.to_f64(), self.embed.b.to_f64()))
    }
}

impl Net for RecognizerNet {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.w.clone()));
            out.push((format!("conv{i}.bias"), c.b.clone()));
        }
        for (i, b) in self.bns.iter().enumerate() {
            out.push((format!("bn{i}.gamma"), b.gamma.clone()));
            out.push((format!("bn{i}.beta"), b.beta.clone()));
            out.push((format!("bn{i}.running_mean"), b.running_mean.clone()));
            out.push((format!("bn{i}.running_var"), b.running_var.clone()));
        }
        out.push(("embed.weight".into(), self.embed.w.clone()));
        out.push(("embed.bias".into(), self.embed.b.clone()));
        out.push(("head.weight".into(), self.head.w.clone()));
        out.push(("head.bias".into(), self.head.b.clone()));
        out
    }
}

fn batch_views(views: &[IdentityView], indices: &[usize]) -> (Tensor, Vec<usize>) {
    let px = 3 * IMG_SIDE * IMG_SIDE;
    let mut data = Vec::with_capacity(indices.len() * px);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&views[i].image.data);
        labels.push(views[i].identity);
    }
    (Tensor::new(data, &[indices.len(), 3, IMG_SIDE, IMG_SIDE]), labels)
}

/// Per-identity split: the final `1/holdout_denom` of each identity's views
/// are held out (denominator 4 → 25% held out).
pub fn identity_split(views: &[IdentityView], holdout_denom: usize) -> (Vec<usize>, Vec<usize>) {
    let k = views.iter().map(|v| v.identity).max().map_or(0, |m| m + 1);
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, v) in views.iter().enumerate() {
        per[v.identity].push(i);
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for idxs in per {
        let cut = idxs.len() - idxs.len() / holdout_denom;
        train.extend_from_slice(&idxs[..cut]);
        held.extend_from_slice(&idxs[cut..]);
    }
    (train, held)
}

pub fn top1_accuracy(net: &RecognizerNet, views: &[IdentityView], indices: &[usize]) -> f32 {
    ad::no_grad(|| {
        let mut correct = 0usize;
        for chunk in indices.chunks(32) {
            let (x, labels) = batch_views(views, chunk);
            let logits = net.logits(&x, Mode::Eval).expect("logits");
            let d = logits.data();
            let k = net.num_classes;
            for (row, &label) in labels.iter().enumerate() {
                let lane = &d[row * k..(row + 1) * k];
                let mut best = 0;
                for (i, &v) in lane.iter().enumerate() {
                    if v > lane[best] {
                        best = i;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
        }
        correct as f32 / indices.len() as f32
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RecEpochStat {
    pub epoch: usize,
    pub train_ce: f32,
    pub held_out_top1: f32,
    pub lr: f32,
}

pub fn train_recognizer(
    net: &RecognizerNet,
    views: &[IdentityView],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&RecEpochStat),
) -> Result<Vec<RecEpochStat>, ExtractorError> {
    let classes: std::collections::HashSet<usize> = views.iter().map(|v| v.identity).collect();
    if classes.len() < 2 {
        return Err(ExtractorError::SingleClass);
    }
    let (train, held) = identity_split(views, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net.parameters(), cfg.learning_rate, cfg.momentum);
    let mut stats = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at_epoch(epoch);
        let order: Vec<usize> =
            shuffled_indices(train.len(), &mut rng).iter().map(|&i| train[i]).collect();
        let mut total = 0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = batch_views(views, chunk);
            opt.zero_grad();
            let logits = net.logits(&x, Mode::Train).expect("logits");
            let loss = ad::cross_entropy_mean(&logits, &labels).expect("ce");
            let lv = loss.value();
            if !lv.is_finite() {
                return Err(ExtractorError::Train(crate::imitator::TrainError::Divergence {
                    epoch,
                }));
            }
            loss.backward().expect("backward");
            opt.step();
            total += lv as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let stat = RecEpochStat {
            epoch,
            train_ce: (total / seen as f64) as f32,
            held_out_top1: top1_accuracy(net, views, &held),
            lr: opt.lr,
        };
        progress(&stat);
        stats.push(stat);
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// F2: segmenter
// ---------------------------------------------------------------------------

pub struct SegmenterNet {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub head: Conv2d,
}

/// (in_ch, out_ch, pool_after) per trunk conv.
const SEG_LAYERS: [(usize, usize, bool); 7] = [
    (3, 32, false),
    (32, 32, true),
    (32, 64, false),
    (64, 64, true),
    (64, 64, false),
    (64, 64, false),
    (64, 64, false),
];

/// Segmenter trunk over any element type; returns (features, logits).
#[allow(clippy::type_complexity)]
pub fn segmenter_forward_generic<T: Elem>(
    convs: &[(Tensor<T>, Tensor<T>)],
    bns: &[(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)],
    head: &(Tensor<T>, Tensor<T>),
    x: &Tensor<T>,
    mode: Mode,
) -> ad::Result<(Tensor<T>, Tensor<T>)> {
    let mut h = x.clone();
    for (i, ((w, b), (g, be, rm, rv))) in convs.iter().zip(bns).enumerate() {
        h = ad::conv2d(&h, w, b, 1, 1)?;
        h = ad::batchnorm(&h, g, be, rm, rv, mode)?;
        h = ad::relu(&h);
        if SEG_LAYERS[i].2 {
            h = ad::maxpool2d(&h, 2, 2)?;
        }
    }
    let logits = ad::conv2d(&h, &head.0, &head.1, 1, 0)?;
    Ok((h, logits))
}

impl SegmenterNet {
    pub fn new(seed: u64) -> SegmenterNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (ic, oc, _) in SEG_LAYERS {
            convs.push(Conv2d::new(&mut rng, ic, oc, 3, 1, 1));
            bns.push(BatchNorm2d::new(oc));
        }
        SegmenterNet { convs, bns, head: Conv2d::new(&mut rng, 64, NUM_CLASSES, 1, 1, 0) }
    }

    fn handles(&self) -> (Vec<(Tensor, Tensor)>, Vec<(Tensor, Tensor, Tensor, Tensor)>) {
        let convs = self.convs.iter().map(|c| (c.w.clone(), c.b.clone())).collect();
        let bns = self
            .bns
            .iter()
            .map(|b| (b.gamma.clone(), b.beta.clone(), b.running_mean.clone(), b.running_var.clone()))
            .collect();
        (convs, bns)
    }

    /// x [N,3,64,64] → (features [N,64,16,16], logits [N,7,16,16]).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> ad::Result<(Tensor, Tensor)> {
        let (convs, bns) = self.handles();
        segmenter_forward_generic(&convs, &bns, &(self.head.w.clone(), self.head.b.clone()), x, mode)
    }

    /// Eq. 6 ingredients: the 64-channel feature layer and the eye+nose+mouth
    /// probability map ω, both differentiable wrt x.
    pub fn features_and_weights(&self, x: &Tensor) -> ad::Result<(Tensor, Tensor)> {
        let (features, logits) = self.forward(x, Mode::Eval)?;
        let probs = ad::softmax(&logits, 1)?;
        let weights = ad::sum_channels(
            &probs,
            &[CLASS_EYE as usize, CLASS_NOSE as usize, CLASS_MOUTH as usize],
        )?;
        Ok((features, weights))
    }
}

impl Net for SegmenterNet {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.w.clone()));
            out.push((format!("conv{i}.bias"), c.b.clone()));
        }
        for (i, b) in self.bns.iter().enumerate() {
            out.push((format!("bn{i}.gamma"), b.gamma.clone()));
            out.push((format!("bn{i}.beta"), b.beta.clone()));
            out.push((format!("bn{i}.running_mean"), b.running_mean.clone()));
            out.push((format!("bn{i}.running_var"), b.running_var.clone()));
        }
        out.push(("head.weight".into(), self.head.w.clone()));
        out.push(("head.bias".into(), self.head.b.clone()));
        out
    }
}

/// Majority-vote downsample of a 64×64 label map to 16×16 (4×4 blocks, ties
/// break to the lowest class index).
pub fn downsample_labels(map: &LabelMap) -> Vec<u8> {
    let f = map.width / SEG_SIDE;
    let mut out = Vec::with_capacity(SEG_SIDE * SEG_SIDE);
    for by in 0..SEG_SIDE {
        for bx in 0..SEG_SIDE {
            let mut counts = [0usize; NUM_CLASSES];
            for dy in 0..f {
                for dx in 0..f {
                    counts[map.get(bx * f + dx, by * f + dy) as usize] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

fn batch_seg(data: &Dataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let px = 3 * IMG_SIDE * IMG_SIDE;
    let mut xs = Vec::with_capacity(indices.len() * px);
    let mut ys = Vec::with_capacity(indices.len() * SEG_SIDE * SEG_SIDE);
    for &i in indices {
        xs.extend_from_slice(&data.samples[i].image.data);
        ys.extend(downsample_labels(&data.samples[i].labels).iter().map(|&c| c as usize));
    }
    (Tensor::new(xs, &[indices.len(), 3, IMG_SIDE, IMG_SIDE]), ys)
}

/// Per-class IoU over a set of images (eval mode). Classes absent from both
/// prediction and truth are reported as NaN and skipped by `mean_iou`.
pub fn class_iou(net: &SegmenterNet, data: &Dataset, indices: &[usize]) -> [f32; NUM_CLASSES] {
    ad::no_grad(|| {
        let mut inter = [0usize; NUM_CLASSES];
        let mut union = [0usize; NUM_CLASSES];
        for chunk in indices.chunks(16) {
            let (x, truth) = batch_seg(data, chunk);
            let (_, logits) = net.forward(&x, Mode::Eval).expect("segmenter forward");
            let d = logits.data();
            let hw = SEG_SIDE * SEG_SIDE;
            for (pix, &t) in truth.iter().enumerate() {
                let (row, off) = (pix / hw, pix % hw);
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if d[(row * NUM_CLASSES + c) * hw + off] > d[(row * NUM_CLASSES + best) * hw + off]
                    {
                        best = c;
                    }
                }
                if best == t {
                    inter[t] += 1;
                    union[t] += 1;
                } else {
                    union[t] += 1;
                    union[best] += 1;
                }
            }
        }
        let mut out = [f32::NAN; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            if union[c] > 0 {
                out[c] = inter[c] as f32 / union[c] as f32;
            }
        }
        out
    })
}

pub fn mean_iou(per_class: &[f32; NUM_CLASSES]) -> f32 {
    let vals: Vec<f32> = per_class.iter().copied().filter(|v| v.is_finite()).collect();
    vals.iter().sum::<f32>() / vals.len() as f32
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SegEpochStat {
    pub epoch: usize,
    pub train_ce: f32,
    pub val_mean_iou: f32,
    pub lr: f32,
}

/// Inverse-square-root-frequency class weights for the segmenter loss,
/// measured on the 16×16 training labels. Face parts cover well under 1% of
/// the pixels, so an unweighted loss leaves them with no usable gradient;
/// the square root tempers the reweighting enough that the dominant classes
/// still train. Absent classes get weight 0 (they contribute no pixels).
fn seg_class_weights(data: &Dataset, train: &[usize]) -> [f32; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &i in train {
        for &c in downsample_labels(&data.samples[i].labels).iter() {
            counts[c as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut w = [0f32; NUM_CLASSES];
    for (wc, &n) in w.iter_mut().zip(&counts) {
        if n > 0 {
            *wc = (total as f32 / n as f32).sqrt();
        }
    }
    w
}

pub fn train_segmenter(
    net: &SegmenterNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&SegEpochStat),
) -> Result<Vec<SegEpochStat>, ExtractorError> {
    if data.split.train.is_empty() || data.split.val.is_empty() {
        return Err(ExtractorError::Train(crate::imitator::TrainError::EmptyDataset));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(net.parameters(), cfg.learning_rate, cfg.momentum);
    let class_weights = seg_class_weights(data, &data.split.train);
    let mut stats = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at_epoch(epoch);
        let order: Vec<usize> = shuffled_indices(data.split.train.len(), &mut rng)
            .iter()
            .map(|&i| data.split.train[i])
            .collect();
        let mut total = 0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, targets) = batch_seg(data, chunk);
            opt.zero_grad();
            let (_, logits) = net.forward(&x, Mode::Train).expect("segmenter forward");
            let loss =
                ad::cross_entropy_weighted_mean(&logits, &targets, &class_weights).expect("ce");
            let lv = loss.value();
            if !lv.is_finite() {
                return Err(ExtractorError::Train(crate::imitator::TrainError::Divergence {
                    epoch,
                }));
            }
            loss.backward().expect("backward");
            opt.step();
            total += lv as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let iou = class_iou(net, data, &data.split.val);
        let stat = SegEpochStat {
            epoch,
            train_ce: (total / seen as f64) as f32,
            val_mean_iou: mean_iou(&iou),
            lr: opt.lr,
        };
        progress(&stat);
        stats.push(stat);
    }
    Ok(stats)
}
