//! Quantitative harness: parameter recovery, ablation arms, Fréchet embedding
//! distance, and robustness sweeps over photo-shift strength.

use crate::autodiff::{self as ad, Mode, Tensor};
use crate::extractors::{RecognizerNet, SegmenterNet};
use crate::imgio::Image;
use crate::imitator::ImitatorNet;
use crate::renderer::{self, ParamVector, IMG_SIDE};
use crate::search::{self, SearchConfig, SearchError};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::time::Instant;

#[derive(Debug)]
pub enum EvalError {
    Search(SearchError),
    Ad(ad::AdError),
    /// Covariance remained degenerate after shrinkage.
    DegenerateCovariance,
    EmptySet,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Search(e) => write!(f, "search failed: {e}"),
            EvalError::Ad(e) => write!(f, "{e}"),
            EvalError::DegenerateCovariance => {
                write!(f, "embedding covariance degenerate after shrinkage")
            }
            EvalError::EmptySet => write!(f, "empty image set"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<SearchError> for EvalError {
    fn from(e: SearchError) -> Self {
        EvalError::Search(e)
    }
}

impl From<ad::AdError> for EvalError {
    fn from(e: ad::AdError) -> Self {
        EvalError::Ad(e)
    }
}

pub struct Checkpoints<'a> {
    pub imitator: &'a ImitatorNet,
    pub recognizer: &'a RecognizerNet,
    pub segmenter: &'a SegmenterNet,
}

fn embed_image(f1: &RecognizerNet, img: &Image) -> ad::Result<Vec<f32>> {
    ad::no_grad(|| {
        let x = Tensor::new(img.data.clone(), &[1, 3, IMG_SIDE, IMG_SIDE]);
        Ok(f1.embed_batch(&x, Mode::Eval)?.data())
    })
}

fn vec_cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)) as f32
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryRow {
    pub target_index: usize,
    pub continuous_mae: f32,
    /// Discrete groups (of 3) whose argmax matches the ground truth.
    pub discrete_correct: usize,
    pub init_cosine: f32,
    pub final_cosine: f32,
    pub init_ls: f32,
    pub final_ls: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RecoveryReport {
    pub shift_strength: f32,
    pub seed: u64,
    pub rows: Vec<RecoveryRow>,
    pub mean_mae: f32,
    pub std_mae: f32,
    pub mean_discrete_correct: f32,
    pub mean_init_cosine: f32,
    pub mean_final_cosine: f32,
    /// Fraction of targets where L_S(final) < L_S(init).
    pub descent_fraction: f32,
    pub mean_seconds: f64,
}

fn mean_std(xs: impl Iterator<Item = f32> + Clone) -> (f32, f32) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().map(|v| v as f64).sum::<f64>() / n as f64;
    let var = xs.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    (mean as f32, var.sqrt() as f32)
}

fn aggregate(rows: Vec<RecoveryRow>, shift_strength: f32, seed: u64) -> RecoveryReport {
    let n = rows.len();
    if n == 0 {
        return RecoveryReport { shift_strength, seed, ..Default::default() };
    }
    let (mean_mae, std_mae) = mean_std(rows.iter().map(|r| r.continuous_mae));
    let mean_discrete_correct =
        rows.iter().map(|r| r.discrete_correct as f32).sum::<f32>() / n as f32;
    let (mean_init_cosine, _) = mean_std(rows.iter().map(|r| r.init_cosine));
    let (mean_final_cosine, _) = mean_std(rows.iter().map(|r| r.final_cosine));
    let descent_fraction =
        rows.iter().filter(|r| r.final_ls < r.init_ls).count() as f32 / n as f32;
    let mean_seconds = rows.iter().map(|r| r.seconds).sum::<f64>() / n as f64;
    RecoveryReport {
        shift_strength,
        seed,
        rows,
        mean_mae,
        std_mae,
        mean_discrete_correct,
        mean_init_cosine,
        mean_final_cosine,
        descent_fraction,
        mean_seconds,
    }
}

/// Samples `n` ground-truth parameter vectors, renders (optionally
/// photo-shifted) targets, runs the search on each, and scores recovery.
pub fn run_recovery_suite(
    n: usize,
    shift_strength: f32,
    seed: u64,
    ckpts: &Checkpoints,
    cfg: &SearchConfig,
) -> Result<RecoveryReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let truth = ParamVector::sample(&mut rng);
        let (clean, _) = renderer::render(&truth.finalized());
        let target = renderer::photo_shift(&clean, seed ^ (i as u64).wrapping_mul(0x9E37), shift_strength);

        let start = Instant::now();
        let result = search::create(&target, cfg, ckpts.imitator, ckpts.recognizer, ckpts.segmenter)?;
        let seconds = start.elapsed().as_secs_f64();

        let target_emb = embed_image(ckpts.recognizer, &target)?;
        let init_img = search::generate_smoothed(ckpts.imitator, &ParamVector::average(), cfg.beta);
        let final_img = search::generate_smoothed(ckpts.imitator, &result.params, cfg.beta);
        let init_cosine = vec_cosine(&embed_image(ckpts.recognizer, &init_img)?, &target_emb);
        let final_cosine = vec_cosine(&embed_image(ckpts.recognizer, &final_img)?, &target_emb);

        let first = result.trace.first().expect("trace has init row");
        let last = result.trace.last().expect("trace non-empty");
        rows.push(RecoveryRow {
            target_index: i,
            continuous_mae: search::continuous_mae(&result.params, &truth),
            discrete_correct: search::discrete_matches(&result.params, &truth),
            init_cosine,
            final_cosine,
            init_ls: first.ls,
            final_ls: last.ls,
            seconds,
        });
    }
    Ok(aggregate(rows, shift_strength, seed))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub name: String,
    pub mean_final_cosine: f32,
    /// Mean weighted segmenter-feature L1 error against the target (lower is
    /// better agreement).
    pub mean_feature_error: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub shift_strength: f32,
    pub init: AblationArm,
    pub l1_only: AblationArm,
    pub l2_only: AblationArm,
    pub combined: AblationArm,
}

fn feature_error(
    f2: &SegmenterNet,
    img: &Image,
    target_weighted: &Tensor,
) -> ad::Result<f32> {
    ad::no_grad(|| {
        let x = Tensor::new(img.data.clone(), &[1, 3, IMG_SIDE, IMG_SIDE]);
        let (feat, w) = f2.features_and_weights(&x)?;
        let weighted = ad::mul_channel_weight(&feat, &w)?;
        Ok(ad::l1_loss(&weighted, target_weighted)?.value())
    })
}

/// Three-arm ablation over a shared target suite: discriminative-only
/// (content weight 0), content-only (α = 0), and the combined loss. Also
/// reports the untouched average-face init as a floor.
pub fn run_ablation(
    n: usize,
    shift_strength: f32,
    seed: u64,
    ckpts: &Checkpoints,
    base: &SearchConfig,
) -> Result<AblationReport, EvalError> {
    let arms: [(&str, SearchConfig); 3] = [
        ("l1_only", SearchConfig { content_weight: 0.0, alpha: 1.0, ..base.clone() }),
        ("l2_only", SearchConfig { alpha: 0.0, ..base.clone() }),
        ("combined", base.clone()),
    ];

    // Shared targets across arms.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let truth = ParamVector::sample(&mut rng);
        let (clean, _) = renderer::render(&truth.finalized());
        targets.push(renderer::photo_shift(&clean, seed ^ (i as u64).wrapping_mul(0x9E37), shift_strength));
    }

    let init_img = search::generate_smoothed(ckpts.imitator, &ParamVector::average(), base.beta);
    let init_emb = embed_image(ckpts.recognizer, &init_img)?;

    let mut init_cos = Vec::with_capacity(n);
    let mut init_feat = Vec::with_capacity(n);
    let mut arm_cos = vec![Vec::with_capacity(n); 3];
    let mut arm_feat = vec![Vec::with_capacity(n); 3];

    for target in &targets {
        let target_emb = embed_image(ckpts.recognizer, target)?;
        let tf = search::target_features(target, ckpts.recognizer, ckpts.segmenter)?;
        init_cos.push(vec_cosine(&init_emb, &target_emb));
        init_feat.push(feature_error(ckpts.segmenter, &init_img, &tf.weighted_features)?);
        for (a, (_, cfg)) in arms.iter().enumerate() {
            let result =
                search::create(target, cfg, ckpts.imitator, ckpts.recognizer, ckpts.segmenter)?;
            let img = search::generate_smoothed(ckpts.imitator, &result.params, cfg.beta);
            arm_cos[a].push(vec_cosine(&embed_image(ckpts.recognizer, &img)?, &target_emb));
            arm_feat[a].push(feature_error(ckpts.segmenter, &img, &tf.weighted_features)?);
        }
    }

    let mk = |name: &str, cos: &[f32], feat: &[f32]| AblationArm {
        name: name.to_string(),
        mean_final_cosine: mean_std(cos.iter().cloned()).0,
        mean_feature_error: mean_std(feat.iter().cloned()).0,
    };
    Ok(AblationReport {
        seed,
        shift_strength,
        init: mk("init", &init_cos, &init_feat),
        l1_only: mk(arms[0].0, &arm_cos[0], &arm_feat[0]),
        l2_only: mk(arms[1].0, &arm_cos[1], &arm_feat[1]),
        combined: mk(arms[2].0, &arm_cos[2], &arm_feat[2]),
    })
}

const SHRINKAGE: f64 = 1e-6;

fn gaussian_fit(embeddings: &[Vec<f32>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = embeddings.len();
    let d = embeddings[0].len();
    let mut mu = DVector::<f64>::zeros(d);
    for e in embeddings {
        for (j, &v) in e.iter().enumerate() {
            mu[j] += v as f64;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for e in embeddings {
        let x = DVector::from_iterator(d, e.iter().map(|&v| v as f64)) - &mu;
        sigma += &x * x.transpose();
    }
    sigma /= (n.max(2) - 1) as f64;
    for j in 0..d {
        sigma[(j, j)] += SHRINKAGE;
    }
    (mu, sigma)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (numerical noise) are clamped to 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::DegenerateCovariance);
    }
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Squared Fréchet distance between Gaussian fits of two embedding clouds:
/// d² = ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^{1/2}), clamped at 0.
pub fn frechet_from_embeddings(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let (mu1, s1) = gaussian_fit(a);
    let (mu2, s2) = gaussian_fit(b);
    let s1_sqrt = sqrtm_psd(&s1)?;
    // (Σ₁Σ₂)^{1/2} shares its trace with the symmetric (√Σ₁ Σ₂ √Σ₁)^{1/2}.
    let inner = sqrtm_psd(&(&s1_sqrt * &s2 * &s1_sqrt))?;
    let diff = &mu1 - &mu2;
    let d2 = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * inner.trace();
    if !d2.is_finite() {
        return Err(EvalError::DegenerateCovariance);
    }
    Ok(d2.max(0.0))
}

/// Fréchet distance between two image sets under the recognizer embedding.
pub fn frechet_distance(
    set_a: &[Image],
    set_b: &[Image],
    f1: &RecognizerNet,
) -> Result<f64, EvalError> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let embed_all = |set: &[Image]| -> ad::Result<Vec<Vec<f32>>> {
        set.iter().map(|img| embed_image(f1, img)).collect()
    };
    frechet_from_embeddings(&embed_all(set_a)?, &embed_all(set_b)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub rows: Vec<RecoveryReport>,
}

/// Recovery suite repeated across photo-shift strengths.
pub fn robustness_sweep(
    n: usize,
    strengths: &[f32],
    seed: u64,
    ckpts: &Checkpoints,
    cfg: &SearchConfig,
) -> Result<RobustnessReport, EvalError> {
    let rows = strengths
        .iter()
        .map(|&s| run_recovery_suite(n, s, seed, ckpts, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RobustnessReport { rows })
}

pub fn recovery_summary_text(r: &RecoveryReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "recovery suite: n={} shift={} seed={}\n",
        r.rows.len(),
        r.shift_strength,
        r.seed
    ));
    s.push_str("  idx    mae  disc  cos_init  cos_final   ls_init  ls_final   sec\n");
    for row in &r.rows {
        s.push_str(&format!(
            "  {:3}  {:.3}   {}/3    {:+.4}    {:+.4}  {:>8.4}  {:>8.4}  {:.2}\n",
            row.target_index,
            row.continuous_mae,
            row.discrete_correct,
            row.init_cosine,
            row.final_cosine,
            row.init_ls,
            row.final_ls,
            row.seconds
        ));
    }
    s.push_str(&format!(
        "  mean mae {:.4} (std {:.4}); mean discrete {:.2}/3; cosine {:+.4} -> {:+.4}; descent {:.0}%; {:.2}s/target\n",
        r.mean_mae,
        r.std_mae,
        r.mean_discrete_correct,
        r.mean_init_cosine,
        r.mean_final_cosine,
        r.descent_fraction * 100.0,
        r.mean_seconds
    ));
    s
}

pub fn ablation_summary_text(r: &AblationReport) -> String {
    let mut s = format!("ablation: shift={} seed={}\n", r.shift_strength, r.seed);
    s.push_str("  arm        mean_cosine  mean_feature_err\n");
    for arm in [&r.init, &r.l1_only, &r.l2_only, &r.combined] {
        s.push_str(&format!(
            "  {:<9}      {:+.4}          {:.5}\n",
            arm.name, arm.mean_final_cosine, arm.mean_feature_error
        ));
    }
    s
}

/// Side-by-side contact sheet: target | imitator output | engine render.
pub fn contact_sheet(target: &Image, imitated: &Image, engine: &Image) -> Image {
    let w = IMG_SIDE;
    let mut out = Image::new(w * 3, IMG_SIDE);
    for (i, src) in [target, imitated, engine].iter().enumerate() {
        for y in 0..IMG_SIDE {
            for x in 0..w {
                let rgb = [src.get(x, y, 0), src.get(x, y, 1), src.get(x, y, 2)];
                out.set(i * w + x, y, rgb);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize, d: usize, shift: f32) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0) + shift).collect())
            .collect()
    }

    #[test]
    fn frechet_identity_is_zero() {
        let a = cloud(1, 40, 32, 0.0);
        let d = frechet_from_embeddings(&a, &a).unwrap();
        assert!(d <= 1e-6, "d(A,A) = {d}");
    }

    #[test]
    fn frechet_symmetric_and_order_invariant() {
        let a = cloud(2, 40, 32, 0.0);
        let b = cloud(3, 40, 32, 0.5);
        let dab = frechet_from_embeddings(&a, &b).unwrap();
        let dba = frechet_from_embeddings(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-8);
        let mut shuffled = a.clone();
        shuffled.reverse();
        let dshuf = frechet_from_embeddings(&shuffled, &b).unwrap();
        assert!((dab - dshuf).abs() < 1e-9);
    }

    #[test]
    fn frechet_mean_shift_hand_value() {
        // Same cloud translated by a constant vector: covariances are equal,
        // so d² reduces to ‖μ₁−μ₂‖² = d · shift².
        let a = cloud(4, 60, 8, 0.0);
        let b: Vec<Vec<f32>> = a.iter().map(|e| e.iter().map(|&v| v + 0.3).collect()).collect();
        let d2 = frechet_from_embeddings(&a, &b).unwrap();
        let expect = 8.0 * 0.3f64 * 0.3;
        assert!((d2 - expect).abs() < 1e-4, "d² = {d2}, expected {expect}");
    }

    #[test]
    fn frechet_grows_with_separation() {
        let a = cloud(5, 50, 16, 0.0);
        let near = cloud(6, 50, 16, 0.2);
        let far = cloud(7, 50, 16, 1.0);
        let dn = frechet_from_embeddings(&a, &near).unwrap();
        let df = frechet_from_embeddings(&a, &far).unwrap();
        assert!(df > dn);
    }

    #[test]
    fn frechet_rejects_empty() {
        let a = cloud(8, 10, 4, 0.0);
        assert!(matches!(frechet_from_embeddings(&a, &[]), Err(EvalError::EmptySet)));
    }

    #[test]
    fn empty_recovery_report() {
        let g = ImitatorNet::new(11);
        let f1 = RecognizerNet::new(12, 4);
        let f2 = SegmenterNet::new(13);
        let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
        let r = run_recovery_suite(0, 0.0, 9, &ckpts, &SearchConfig::default()).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.mean_mae, 0.0);
    }

    #[test]
    fn recovery_deterministic_and_aggregates_consistent() {
        let g = ImitatorNet::new(21);
        let f1 = RecognizerNet::new(22, 4);
        let f2 = SegmenterNet::new(23);
        let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
        let cfg = SearchConfig { max_iters: 2, ..Default::default() };
        let r1 = run_recovery_suite(3, 0.3, 7, &ckpts, &cfg).unwrap();
        let r2 = run_recovery_suite(3, 0.3, 7, &ckpts, &cfg).unwrap();
        assert_eq!(r1.rows.len(), 3);
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.continuous_mae, b.continuous_mae);
            assert_eq!(a.final_ls, b.final_ls);
            assert_eq!(a.final_cosine, b.final_cosine);
        }
        // Aggregates recomputable from rows.
        let mean: f32 =
            r1.rows.iter().map(|r| r.continuous_mae).sum::<f32>() / r1.rows.len() as f32;
        assert!((mean - r1.mean_mae).abs() < 1e-6);
        for row in &r1.rows {
            assert!((-1.0..=1.0).contains(&row.final_cosine));
        }
    }

    #[test]
    fn robustness_strength_zero_matches_recovery_suite() {
        let g = ImitatorNet::new(31);
        let f1 = RecognizerNet::new(32, 4);
        let f2 = SegmenterNet::new(33);
        let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
        let cfg = SearchConfig { max_iters: 1, ..Default::default() };
        let sweep = robustness_sweep(2, &[0.0, 0.5], 5, &ckpts, &cfg).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        let direct = run_recovery_suite(2, 0.0, 5, &ckpts, &cfg).unwrap();
        assert_eq!(sweep.rows[0].rows.len(), direct.rows.len());
        for (a, b) in sweep.rows[0].rows.iter().zip(&direct.rows) {
            assert_eq!(a.continuous_mae, b.continuous_mae);
            assert_eq!(a.final_ls, b.final_ls);
        }
    }

    #[test]
    fn contact_sheet_dimensions() {
        let a = Image::new(IMG_SIDE, IMG_SIDE);
        let sheet = contact_sheet(&a, &a, &a);
        assert_eq!(sheet.width, IMG_SIDE * 3);
        assert_eq!(sheet.height, IMG_SIDE);
    }
}
