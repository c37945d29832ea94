//! Stage II: projected gradient descent over the parameter vector through the
//! frozen imitator and extractors, under the combined similarity loss.

use crate::autodiff::{self as ad, Mode, Tensor};
use crate::extractors::{RecognizerNet, SegmenterNet};
use crate::imgio::Image;
use crate::imitator::ImitatorNet;
use crate::renderer::{ParamVector, DISCRETE_GROUPS, IMG_SIDE, NUM_CONTINUOUS, TOTAL_DIM};
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Weight of the discriminative term.
    pub alpha: f32,
    /// Softmax smoothing temperature for discrete blocks.
    pub beta: f32,
    pub max_iters: usize,
    /// Base learning rate μ.
    pub learning_rate: f32,
    /// Multiplicative decay factor applied every `decay_every` iterations.
    pub lr_decay: f32,
    pub decay_every: usize,
    /// Calibration knob multiplying μ; the losses here are mean-normalized,
    /// so the published μ needs a one-time scale correction.
    pub lr_scale: f32,
    /// Weight of the content term (1 in the full loss, 0 for the L1-only
    /// ablation arm).
    pub content_weight: f32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            alpha: 0.01,
            beta: 100.0,
            max_iters: 50,
            learning_rate: 10.0,
            lr_decay: 0.8,
            decay_every: 5,
            lr_scale: 1.0,
            content_weight: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn lr_at_iter(&self, iter: usize) -> f32 {
        self.learning_rate * self.lr_scale * self.lr_decay.powi((iter / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub l1: f32,
    pub l2: f32,
    pub ls: f32,
    pub lr: f32,
    pub x: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStatus {
    Success,
    NoImprovement,
}

pub struct SearchResult {
    pub params: ParamVector,
    pub trace: Vec<TraceRow>,
    pub status: SearchStatus,
}

#[derive(Debug)]
pub enum SearchError {
    Ad(ad::AdError),
    /// Non-finite gradient; carries the iteration index.
    NonFinite { iter: usize },
}

impl fmt::Display for SearchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchError::Ad(e) => write!(f, "{e}"),
            SearchError::NonFinite { iter } => write!(f, "non-finite gradient at iteration {iter}"),
        }
    }
}

impl std::error::Error for SearchError {}

impl From<ad::AdError> for SearchError {
    fn from(e: ad::AdError) -> Self {
        SearchError::Ad(e)
    }
}

fn group_sizes() -> Vec<usize> {
    DISCRETE_GROUPS.iter().map(|&(_, c)| c).collect()
}

/// Eq. 9 smoothing of one discrete block.
pub fn smooth_discrete(logits: &[f32], beta: f32) -> Vec<f32> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (beta * (v - mx)).exp()).collect();
    let z: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Flattened parameters with each discrete block replaced by its smoothed
/// softmax — the representation the imitator saw during search.
pub fn smoothed_flat(p: &ParamVector, beta: f32) -> Vec<f32> {
    let mut out = p.continuous.clone();
    for g in &p.discrete {
        out.extend(smooth_discrete(g, beta));
    }
    out
}

/// Imitator output for smoothed parameters, clamped for display.
pub fn generate_smoothed(g: &ImitatorNet, p: &ParamVector, beta: f32) -> Image {
    ad::no_grad(|| {
        let x = Tensor::new(smoothed_flat(p, beta), &[1, TOTAL_DIM, 1, 1]);
        let out = g.forward(&x, Mode::Eval).expect("imitator forward");
        let mut img = Image { width: IMG_SIDE, height: IMG_SIDE, data: out.data() };
        img.clamp01();
        img
    })
}

/// Pre-computed target-side quantities; the target is a constant in the loss.
pub struct TargetFeatures {
    pub embedding: Tensor,
    pub weighted_features: Tensor,
}

pub fn target_features(
    target: &Image,
    f1: &RecognizerNet,
    f2: &SegmenterNet,
) -> ad::Result<TargetFeatures> {
    ad::no_grad(|| {
        let y = Tensor::new(target.data.clone(), &[1, 3, IMG_SIDE, IMG_SIDE]);
        let embedding = f1.embed_batch(&y, Mode::Eval)?;
        let (feat, w) = f2.features_and_weights(&y)?;
        let weighted = ad::mul_channel_weight(&feat, &w)?;
        Ok(TargetFeatures { embedding: embedding.detach(), weighted_features: weighted.detach() })
    })
}

pub struct LossBreakdown {
    pub l1: f32,
    pub l2: f32,
    pub ls: f32,
}

/// Builds the differentiable L_S graph from the flat parameter tensor.
/// Returns (scalar loss, breakdown).
pub fn loss_ls(
    x: &Tensor,
    target: &TargetFeatures,
    g: &ImitatorNet,
    f1: &RecognizerNet,
    f2: &SegmenterNet,
    cfg: &SearchConfig,
) -> Result<(Tensor, LossBreakdown), SearchError> {
    let smoothed = ad::smooth_groups(x, NUM_CONTINUOUS, &group_sizes(), cfg.beta)?;
    let as_input = ad::reshape(&smoothed, &[1, TOTAL_DIM, 1, 1])?;
    let image = g.forward(&as_input, Mode::Eval)?;

    let emb = f1.embed_batch(&image, Mode::Eval)?;
    let one = Tensor::scalar(1.0);
    let l1 = ad::sub(&one, &ad::cosine(&emb, &target.embedding)?)?;

    let (feat, w) = f2.features_and_weights(&image)?;
    let weighted = ad::mul_channel_weight(&feat, &w)?;
    let l2 = ad::l1_loss(&weighted, &target.weighted_features)?;

    let ls = ad::add(&ad::scale(&l1, cfg.alpha), &ad::scale(&l2, cfg.content_weight))?;
    let breakdown = LossBreakdown { l1: l1.value(), l2: l2.value(), ls: ls.value() };
    Ok((ls, breakdown))
}

/// Projected gradient descent from the average face. Every iterate is clamped
/// coordinate-wise to [0,1].
pub fn create(
    target: &Image,
    cfg: &SearchConfig,
    g: &ImitatorNet,
    f1: &RecognizerNet,
    f2: &SegmenterNet,
) -> Result<SearchResult, SearchError> {
    let tf = target_features(target, f1, f2)?;
    let x = Tensor::param(ParamVector::average().flatten(), &[TOTAL_DIM]);

    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let record = |trace: &mut Vec<TraceRow>, iter: usize, b: &LossBreakdown, lr: f32, x: &Tensor| {
        trace.push(TraceRow { iter, l1: b.l1, l2: b.l2, ls: b.ls, lr, x: x.data() });
    };

    let (loss, breakdown) = loss_ls(&x, &tf, g, f1, f2, cfg)?;
    let init_ls = breakdown.ls;
    record(&mut trace, 0, &breakdown, cfg.lr_at_iter(0), &x);
    drop(loss);

    let mut final_ls = init_ls;
    for iter in 0..cfg.max_iters {
        let lr = cfg.lr_at_iter(iter);
        x.zero_grad();
        let (loss, _) = loss_ls(&x, &tf, g, f1, f2, cfg)?;
        loss.backward()?;
        let grad = x.grad().expect("loss depends on x");
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(SearchError::NonFinite { iter });
        }
        x.map_data_mut(|d| {
            for (v, gi) in d.iter_mut().zip(&grad) {
                *v = (*v - lr * gi).clamp(0.0, 1.0);
            }
        });
        let (_, b) = loss_ls(&x, &tf, g, f1, f2, cfg)?;
        final_ls = b.ls;
        record(&mut trace, iter + 1, &b, lr, &x);
    }

    let params = ParamVector::from_flat(&x.data()).expect("x has dimension D");
    let status =
        if final_ls <= init_ls { SearchStatus::Success } else { SearchStatus::NoImprovement };
    Ok(SearchResult { params, trace, status })
}

/// Continuous mean absolute error between two parameter vectors.
pub fn continuous_mae(a: &ParamVector, b: &ParamVector) -> f32 {
    let s: f32 =
        a.continuous.iter().zip(&b.continuous).map(|(x, y)| (x - y).abs()).sum();
    s / NUM_CONTINUOUS as f32
}

/// Number of discrete groups whose argmax agrees.
pub fn discrete_matches(a: &ParamVector, b: &ParamVector) -> usize {
    (0..DISCRETE_GROUPS.len()).filter(|&g| a.group_argmax(g) == b.group_argmax(g)).count()
}

/// The params.json payload for a finished search.
#[derive(Serialize)]
pub struct ParamsFile {
    pub schema_version: u32,
    pub schema_hash: u32,
    pub continuous: Vec<(String, f32)>,
    pub discrete: Vec<GroupOut>,
    pub status: SearchStatus,
    pub trace_summary: TraceSummary,
}

#[derive(Serialize)]
pub struct GroupOut {
    pub name: String,
    pub logits: Vec<f32>,
    pub one_hot: Vec<f32>,
    pub argmax: usize,
}

#[derive(Serialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub init_ls: f32,
    pub final_ls: f32,
    pub init_l1: f32,
    pub final_l1: f32,
    pub init_l2: f32,
    pub final_l2: f32,
}

pub fn params_file(result: &SearchResult) -> ParamsFile {
    let p = &result.params;
    let finalized = p.finalized();
    let first = result.trace.first().expect("trace has init row");
    let last = result.trace.last().expect("trace non-empty");
    ParamsFile {
        schema_version: 1,
        schema_hash: crate::renderer::schema_hash(),
        continuous: crate::renderer::CONTINUOUS_NAMES
            .iter()
            .zip(&p.continuous)
            .map(|(n, &v)| (n.to_string(), v))
            .collect(),
        discrete: DISCRETE_GROUPS
            .iter()
            .enumerate()
            .map(|(g, &(name, _))| GroupOut {
                name: name.to_string(),
                logits: p.discrete[g].clone(),
                one_hot: finalized.discrete[g].clone(),
                argmax: p.group_argmax(g),
            })
            .collect(),
        status: result.status,
        trace_summary: TraceSummary {
            iterations: result.trace.len() - 1,
            init_ls: first.ls,
            final_ls: last.ls,
            init_l1: first.l1,
            final_l1: last.l1,
            init_l2: first.l2,
            final_l2: last.l2,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer;

    fn nets() -> (ImitatorNet, RecognizerNet, SegmenterNet) {
        (ImitatorNet::new(31), RecognizerNet::new(32, 4), SegmenterNet::new(33))
    }

    #[test]
    fn smooth_discrete_examples() {
        // Equal logits → exactly uniform.
        let u = smooth_discrete(&[0.0, 0.0, 0.0], 5.0);
        for v in &u {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // [1,0,0], beta 1 → [e/(e+2), 1/(e+2), 1/(e+2)].
        let p = smooth_discrete(&[1.0, 0.0, 0.0], 1.0);
        let e = std::f32::consts::E;
        assert!((p[0] - e / (e + 2.0)).abs() < 1e-6);
        assert!((p[1] - 1.0 / (e + 2.0)).abs() < 1e-6);
        // beta 100 saturates.
        let p = smooth_discrete(&[1.0, 0.0, 0.0], 100.0);
        assert!(p[0] > 1.0 - 1e-6);
        // Max component nondecreasing in beta.
        let mut prev = 0.0;
        for beta in [1.0, 10.0, 100.0, 1000.0] {
            let p = smooth_discrete(&[0.7, 0.2, 0.4], beta);
            let mx = p.iter().cloned().fold(0.0f32, f32::max);
            assert!(mx >= prev);
            prev = mx;
        }
    }

    #[test]
    fn self_target_loss_is_zero() {
        let (g, f1, f2) = nets();
        // Target = G(x) exactly: feed the imitator's own output.
        let x0 = ParamVector::average();
        let img = g.generate(&x0);
        // generate() clamps for display; regenerate unclamped to match the
        // graph output exactly.
        let xt = Tensor::new(x0.flatten(), &[1, TOTAL_DIM, 1, 1]);
        let raw = ad::no_grad(|| g.forward(&xt, Mode::Eval).unwrap());
        let target = Image { width: IMG_SIDE, height: IMG_SIDE, data: raw.data() };
        drop(img);
        let tf = target_features(&target, &f1, &f2).unwrap();
        let x = Tensor::param(x0.flatten(), &[TOTAL_DIM]);
        let cfg = SearchConfig::default();
        let (_, b) = loss_ls(&x, &tf, &g, &f1, &f2, &cfg).unwrap();
        assert!(b.l1.abs() < 1e-5, "L1 = {}", b.l1);
        assert!(b.l2.abs() < 1e-5, "L2 = {}", b.l2);
        assert!(b.ls.abs() < 1e-5, "LS = {}", b.ls);
    }

    #[test]
    fn alpha_zero_reduces_to_content_loss() {
        let (g, f1, f2) = nets();
        let (target, _) = renderer::render(&ParamVector::average());
        let tf = target_features(&target, &f1, &f2).unwrap();
        let x = Tensor::param(ParamVector::average().flatten(), &[TOTAL_DIM]);
        let cfg = SearchConfig { alpha: 0.0, ..Default::default() };
        let (_, b) = loss_ls(&x, &tf, &g, &f1, &f2, &cfg).unwrap();
        assert_eq!(b.ls, b.l2);
    }

    #[test]
    fn gradient_of_ls_matches_finite_differences() {
        // Composite check in f32 at the coarser 1e-2 tolerance: the full
        // graph G → F1/F2 → losses, probed on all 34 coordinates.
        let (g, f1, f2) = nets();
        let (target, _) = renderer::render(&ParamVector::average());
        let tf = target_features(&target, &f1, &f2).unwrap();
        // A lower temperature keeps the discrete softmax away from
        // saturation where gradients vanish below FD resolution.
        let cfg = SearchConfig { beta: 4.0, ..Default::default() };

        let mut x0 = ParamVector::average().flatten();
        for (i, v) in x0.iter_mut().enumerate() {
            *v += 0.02 * (((i * 13 + 5) % 11) as f32 / 11.0 - 0.5);
        }
        let x = Tensor::param(x0.clone(), &[TOTAL_DIM]);
        let (loss, _) = loss_ls(&x, &tf, &g, &f1, &f2, &cfg).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();

        let h = 1e-2f32;
        let mut max_rel = 0f64;
        for i in 0..TOTAL_DIM {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let (fp, fm) = ad::no_grad(|| {
                let lp = loss_ls(&Tensor::new(plus, &[TOTAL_DIM]), &tf, &g, &f1, &f2, &cfg)
                    .unwrap()
                    .1
                    .ls;
                let lm = loss_ls(&Tensor::new(minus, &[TOTAL_DIM]), &tf, &g, &f1, &f2, &cfg)
                    .unwrap()
                    .1
                    .ls;
                (lp as f64, lm as f64)
            });
            let fd = (fp - fm) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-2, "max rel err {max_rel}");
    }

    #[test]
    fn zero_iterations_returns_average_face() {
        let (g, f1, f2) = nets();
        let (target, _) = renderer::render(&ParamVector::average());
        let cfg = SearchConfig { max_iters: 0, ..Default::default() };
        let result = create(&target, &cfg, &g, &f1, &f2).unwrap();
        assert_eq!(result.trace.len(), 1);
        assert_eq!(result.params, ParamVector::average());
        assert_eq!(result.status, SearchStatus::Success);
    }

    #[test]
    fn iterates_stay_in_unit_box_and_nets_stay_frozen() {
        let (g, f1, f2) = nets();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let (target, _) = renderer::render(&ParamVector::sample(&mut rng));
        use crate::nn::Net;
        let before_g = g.snapshot();
        let before_f1 = f1.snapshot();
        let before_f2 = f2.snapshot();
        // Deliberately large step scale to stress the projection.
        let cfg = SearchConfig { max_iters: 8, lr_scale: 30.0, ..Default::default() };
        let result = create(&target, &cfg, &g, &f1, &f2).unwrap();
        for row in &result.trace {
            assert!(row.x.iter().all(|&v| (0.0..=1.0).contains(&v)), "iterate left [0,1]");
        }
        assert_eq!(before_g, g.snapshot(), "imitator weights changed");
        assert_eq!(before_f1, f1.snapshot(), "recognizer weights changed");
        assert_eq!(before_f2, f2.snapshot(), "segmenter weights changed");
    }

    #[test]
    fn finalize_examples_via_params_file() {
        let mut p = ParamVector::average();
        p.discrete[0] = vec![0.2, 0.9, 0.9, 0.1];
        let result = SearchResult {
            params: p,
            trace: vec![TraceRow { iter: 0, l1: 0.0, l2: 0.0, ls: 0.0, lr: 1.0, x: vec![] }],
            status: SearchStatus::Success,
        };
        let pf = params_file(&result);
        assert_eq!(pf.discrete[0].one_hot, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(pf.discrete[0].argmax, 1);
        assert_eq!(pf.continuous.len(), NUM_CONTINUOUS);
    }

    #[test]
    fn mae_and_discrete_match_metrics() {
        let a = ParamVector::average();
        let mut b = ParamVector::average();
        b.continuous[0] = 1.0; // +0.5 on one of 24 coordinates
        assert!((continuous_mae(&a, &b) - 0.5 / 24.0).abs() < 1e-6);
        assert_eq!(discrete_matches(&a, &b), 3);
        b.discrete[2] = vec![0.0, 0.0, 1.0];
        assert_eq!(discrete_matches(&a, &b), 2);
    }

    #[test]
    fn lr_schedule_decays_twenty_percent_every_five() {
        let cfg = SearchConfig::default();
        assert_eq!(cfg.lr_at_iter(0), 10.0);
        assert_eq!(cfg.lr_at_iter(4), 10.0);
        assert!((cfg.lr_at_iter(5) - 8.0).abs() < 1e-5);
        assert!((cfg.lr_at_iter(10) - 6.4).abs() < 1e-5);
    }
}
