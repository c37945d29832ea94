//! The black-box parametric face engine: schema, deterministic hard-edged
//! rasterizer, dataset sampling, and the photo-domain shift transform.
//!
//! The rasterizer is intentionally non-differentiable: every primitive is a
//! hard threshold test per pixel and discrete style groups are read by argmax.

use crate::ckpt::crc32;
use crate::imgio::{self, Image, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_CONTINUOUS: usize = 24;
pub const CONTINUOUS_NAMES: [&str; NUM_CONTINUOUS] = [
    "face_width",
    "face_height",
    "jaw_width",
    "chin_length",
    "eye_y",
    "eye_spacing",
    "eye_width",
    "eye_height",
    "eye_tilt",
    "brow_y",
    "brow_length",
    "brow_thickness",
    "brow_tilt",
    "nose_y",
    "nose_length",
    "nose_width",
    "mouth_y",
    "mouth_width",
    "lip_thickness",
    "mouth_curve",
    "hair_length",
    "hair_volume",
    "face_roundness",
    "skin_tone",
];

pub const DISCRETE_GROUPS: [(&str, usize); 3] =
    [("hair_style", 4), ("brow_style", 3), ("mouth_style", 3)];

/// Flattened parameter dimension: 24 continuous + 4 + 3 + 3 one-hot slots.
pub const TOTAL_DIM: usize = 34;

/// Image side length for everything in the pipeline.
pub const IMG_SIDE: usize = 64;

/// Continuous coordinate indices, for readable geometry code.
pub mod cix {
    pub const FACE_WIDTH: usize = 0;
    pub const FACE_HEIGHT: usize = 1;
    pub const JAW_WIDTH: usize = 2;
    pub const CHIN_LENGTH: usize = 3;
    pub const EYE_Y: usize = 4;
    pub const EYE_SPACING: usize = 5;
    pub const EYE_WIDTH: usize = 6;
    pub const EYE_HEIGHT: usize = 7;
    pub const EYE_TILT: usize = 8;
    pub const BROW_Y: usize = 9;
    pub const BROW_LENGTH: usize = 10;
    pub const BROW_THICKNESS: usize = 11;
    pub const BROW_TILT: usize = 12;
    pub const NOSE_Y: usize = 13;
    pub const NOSE_LENGTH: usize = 14;
    pub const NOSE_WIDTH: usize = 15;
    pub const MOUTH_Y: usize = 16;
    pub const MOUTH_WIDTH: usize = 17;
    pub const LIP_THICKNESS: usize = 18;
    pub const MOUTH_CURVE: usize = 19;
    pub const HAIR_LENGTH: usize = 20;
    pub const HAIR_VOLUME: usize = 21;
    pub const FACE_ROUNDNESS: usize = 22;
    pub const SKIN_TONE: usize = 23;
}

/// Hash of the parameter schema, embedded in manifests and parameter files so
/// mismatched artifacts are rejected early.
pub fn schema_hash() -> u32 {
    let mut desc = String::new();
    for n in CONTINUOUS_NAMES {
        desc.push_str(n);
        desc.push(';');
    }
    for (n, c) in DISCRETE_GROUPS {
        desc.push_str(&format!("{n}:{c};"));
    }
    crc32(desc.as_bytes())
}

/// A full parameter vector: continuous sliders in [0,1] plus per-group
/// discrete blocks (one-hot when sampled, free logits during search).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub continuous: Vec<f32>,
    pub discrete: Vec<Vec<f32>>,
}

impl ParamVector {
    /// The initialization point: continuous 0.5, discrete logits 0.
    pub fn average() -> ParamVector {
        ParamVector {
            continuous: vec![0.5; NUM_CONTINUOUS],
            discrete: DISCRETE_GROUPS.iter().map(|&(_, c)| vec![0.0; c]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = self.continuous.clone();
        for g in &self.discrete {
            out.extend_from_slice(g);
        }
        out
    }

    pub fn from_flat(flat: &[f32]) -> Option<ParamVector> {
        if flat.len() != TOTAL_DIM {
            return None;
        }
        let continuous = flat[..NUM_CONTINUOUS].to_vec();
        let mut discrete = Vec::new();
        let mut off = NUM_CONTINUOUS;
        for &(_, c) in &DISCRETE_GROUPS {
            discrete.push(flat[off..off + c].to_vec());
            off += c;
        }
        Some(ParamVector { continuous, discrete })
    }

    pub fn in_range(&self) -> bool {
        self.flatten().iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Argmax of a discrete group; ties break to the lowest index.
    pub fn group_argmax(&self, group: usize) -> usize {
        let block = &self.discrete[group];
        let mut best = 0;
        for (i, &v) in block.iter().enumerate() {
            if v > block[best] {
                best = i;
            }
        }
        best
    }

    /// Replaces every discrete block with the exact one-hot of its argmax.
    pub fn finalized(&self) -> ParamVector {
        let mut out = self.clone();
        for (g, block) in out.discrete.iter_mut().enumerate() {
            let a = self.group_argmax(g);
            for (i, v) in block.iter_mut().enumerate() {
                *v = if i == a { 1.0 } else { 0.0 };
            }
        }
        out
    }

    /// Continuous i.i.d. uniform on [0,1]; each discrete group a uniformly
    /// chosen one-hot.
    pub fn sample(rng: &mut impl Rng) -> ParamVector {
        let continuous = (0..NUM_CONTINUOUS).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let discrete = DISCRETE_GROUPS
            .iter()
            .map(|&(_, c)| {
                let hot = rng.gen_range(0..c);
                (0..c).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        ParamVector { continuous, discrete }
    }

    fn c(&self, i: usize) -> f32 {
        self.continuous[i]
    }
}

struct FaceGeom {
    cx: f32,
    cy: f32,
    a: f32,
    b_up: f32,
    b_low: f32,
    jaw: f32,
    exponent: f32,
}

impl FaceGeom {
    fn new(p: &ParamVector) -> FaceGeom {
        let a = 12.0 + 10.0 * p.c(cix::FACE_WIDTH);
        let b = 14.0 + 9.0 * p.c(cix::FACE_HEIGHT);
        FaceGeom {
            cx: 32.0,
            cy: 33.0,
            a,
            b_up: b,
            b_low: b * (0.9 + 0.3 * p.c(cix::CHIN_LENGTH)),
            jaw: 0.6 + 0.4 * p.c(cix::JAW_WIDTH),
            exponent: 1.7 + 1.0 * p.c(cix::FACE_ROUNDNESS),
        }
    }

    fn inside(&self, px: f32, py: f32) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (a_eff, b_eff) = if dy <= 0.0 {
            (self.a, self.b_up)
        } else {
            // Lower half narrows linearly toward the chin by the jaw factor.
            let t = (dy / self.b_low).min(1.0);
            (self.a * (1.0 - (1.0 - self.jaw) * t), self.b_low)
        };
        let n = self.exponent;
        (dx.abs() / a_eff).powf(n) + (dy.abs() / b_eff).powf(n) <= 1.0
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders a parameter vector to an image and label map. Deterministic, pure,
/// non-differentiable (hard edges, argmax styles).
pub fn render(p: &ParamVector) -> (Image, LabelMap) {
    debug_assert!(p.in_range(), "parameters out of range");
    let side = IMG_SIDE;
    let mut img = Image::new(side, side);
    let mut map = LabelMap::new(side, side);

    let face = FaceGeom::new(p);
    let skin = lerp3([0.96, 0.84, 0.70], [0.55, 0.38, 0.26], p.c(cix::SKIN_TONE));
    let background = [0.07, 0.09, 0.13];
    let hair_color = [0.25, 0.18, 0.12];
    let eye_color = [0.12, 0.10, 0.10];
    let brow_color = [0.15, 0.10, 0.08];
    let nose_color = [skin[0] * 0.85, skin[1] * 0.8, skin[2] * 0.8];
    let mouth_color = [0.72, 0.27, 0.30];

    let hair_style = p.group_argmax(0);
    let brow_style = p.group_argmax(1);
    let mouth_style = p.group_argmax(2);

    // Hair silhouette.
    let vol = p.c(cix::HAIR_VOLUME);
    let hair_len = p.c(cix::HAIR_LENGTH);
    let a_h = face.a + 2.0 + 4.0 * vol;
    let b_h = face.b_up + 2.0 + 4.0 * vol;
    let cap_y = face.cy - face.b_up * (0.35 - 0.3 * hair_len);
    let bun_cy = face.cy - b_h - 2.0;
    let bun_r = 3.0 + 3.0 * vol;
    let hair_inside = |px: f32, py: f32| -> bool {
        let dx = px - face.cx;
        let dy = py - face.cy;
        let in_dome = (dx / a_h).powi(2) + (dy / b_h).powi(2) <= 1.0;
        match hair_style {
            0 => in_dome && py <= cap_y,
            1 => {
                let side_hair = in_dome
                    && dx.abs() >= face.a * 0.55
                    && py <= face.cy + face.b_low * (0.2 + 0.8 * hair_len);
                (in_dome && py <= cap_y) || side_hair
            }
            2 => {
                let in_bun = (px - face.cx).powi(2) + (py - bun_cy).powi(2) <= bun_r * bun_r;
                (in_dome && py <= cap_y) || in_bun
            }
            _ => false, // bald
        }
    };

    // Eyes.
    let ey = 24.0 + 10.0 * p.c(cix::EYE_Y);
    let edx = 5.0 + 6.0 * p.c(cix::EYE_SPACING);
    let ew = 2.0 + 2.5 * p.c(cix::EYE_WIDTH);
    let eh = 1.0 + 1.8 * p.c(cix::EYE_HEIGHT);
    let etilt = (p.c(cix::EYE_TILT) - 0.5) * 0.5;
    let eye_inside = |px: f32, py: f32| -> bool {
        for s in [-1.0f32, 1.0] {
            let ex = face.cx + s * edx;
            let (dx, dy) = (px - ex, py - ey);
            let (cos, sin) = ((etilt * s).cos(), (etilt * s).sin());
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if (u / ew).powi(2) + (v / eh).powi(2) <= 1.0 {
                return true;
            }
        }
        false
    };

    // Brows.
    let by = ey - 3.5 - 3.5 * p.c(cix::BROW_Y);
    let bl = 2.5 + 2.5 * p.c(cix::BROW_LENGTH);
    let bt = 0.8 + 1.2 * p.c(cix::BROW_THICKNESS);
    let btilt = (p.c(cix::BROW_TILT) - 0.5) * 0.7;
    let brow_inside = |px: f32, py: f32| -> bool {
        for s in [-1.0f32, 1.0] {
            let bx = face.cx + s * edx;
            let (dx, dy) = (px - bx, py - by);
            let (cos, sin) = ((btilt * s).cos(), (btilt * s).sin());
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if u.abs() > bl {
                continue;
            }
            let shift = match brow_style {
                0 => 0.0,                                // straight
                1 => 1.5 * (u / bl).powi(2) - 0.75,      // arched: ends bend down
                _ => 1.2 * (u.abs() / bl) - 0.6,         // angled: kink at center
            };
            if (v + shift).abs() <= bt {
                return true;
            }
        }
        false
    };

    // Nose wedge.
    let n_cy = 30.0 + 8.0 * p.c(cix::NOSE_Y);
    let n_hl = 2.0 + 2.5 * p.c(cix::NOSE_LENGTH);
    let n_w = 1.0 + 2.5 * p.c(cix::NOSE_WIDTH);
    let nose_inside = |px: f32, py: f32| -> bool {
        let (top, bot) = (n_cy - n_hl, n_cy + n_hl);
        if py < top || py > bot {
            return false;
        }
        let halfw = 0.6 + n_w * (py - top) / (bot - top);
        (px - face.cx).abs() <= halfw
    };

    // Mouth band.
    let m_cy = 42.0 + 8.0 * p.c(cix::MOUTH_Y);
    let m_w = 3.0 + 4.0 * p.c(cix::MOUTH_WIDTH);
    let m_t = 0.8 + 1.7 * p.c(cix::LIP_THICKNESS);
    let mut m_curve = (p.c(cix::MOUTH_CURVE) - 0.5) * 3.0;
    let m_teff = match mouth_style {
        0 => m_t * 0.7, // closed
        1 => {
            m_curve += 1.2; // smile
            m_t * 0.6
        }
        _ => m_t * 1.3, // full lips
    };
    let mouth_inside = |px: f32, py: f32| -> bool {
        let dx = px - face.cx;
        if dx.abs() > m_w {
            return false;
        }
        // Positive curve lifts the corners (smile), negative drops them.
        let y_c = m_cy + m_curve * ((dx / m_w).powi(2) - 0.5);
        (py - y_c).abs() <= m_teff
    };

    for y in 0..side {
        for x in 0..side {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            // Topmost primitive wins; later tests overwrite earlier ones.
            let mut color = background;
            let mut class = imgio::CLASS_BACKGROUND;
            if hair_inside(px, py) {
                color = hair_color;
                class = imgio::CLASS_HAIR;
            }
            if face.inside(px, py) {
                color = skin;
                class = imgio::CLASS_SKIN;
                if nose_inside(px, py) {
                    color = nose_color;
                    class = imgio::CLASS_NOSE;
                }
                if mouth_inside(px, py) {
                    color = mouth_color;
                    class = imgio::CLASS_MOUTH;
                }
                if eye_inside(px, py) {
                    color = eye_color;
                    class = imgio::CLASS_EYE;
                }
                if brow_inside(px, py) {
                    color = brow_color;
                    class = imgio::CLASS_BROW;
                }
            }
            img.set(x, y, color);
            map.set(x, y, class);
        }
    }
    (img, map)
}

fn gaussian_pair(rng: &mut impl Rng) -> (f32, f32) {
    // Box-Muller; u1 kept away from 0.
    let u1: f32 = rng.gen_range(1e-10f32..1.0);
    let u2: f32 = rng.gen_range(0.0f32..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f32::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

/// Deterministic photo-domain shift: Gaussian blur, additive noise,
/// brightness/contrast jitter and integer translation, all scaled by
/// `strength` in [0,1]. Strength 0 is the exact identity.
pub fn photo_shift(img: &Image, seed: u64, strength: f32) -> Image {
    assert!((0.0..=1.0).contains(&strength), "strength must be in [0,1]");
    if strength == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_blur = rng.gen_range(0.0f32..1.0) * 1.5 * strength;
    let sigma_noise = rng.gen_range(0.0f32..1.0) * 0.03 * strength;
    let brightness = 1.0 + rng.gen_range(-1.0f32..1.0) * 0.2 * strength;
    let contrast = 1.0 + rng.gen_range(-1.0f32..1.0) * 0.2 * strength;
    let t_max = (2.0 * strength).floor() as i64;
    let (tx, ty) = if t_max > 0 {
        (rng.gen_range(-t_max..=t_max), rng.gen_range(-t_max..=t_max))
    } else {
        (0, 0)
    };

    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = img.clone();

    if sigma_blur > 0.05 {
        let radius = (3.0 * sigma_blur).ceil() as i64;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i as f32).powi(2) / (2.0 * sigma_blur * sigma_blur)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        // Separable blur with clamped edges.
        let mut tmp = out.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let sx = (x + i as i64 - radius).clamp(0, w - 1);
                        acc += k * out.get(sx as usize, y as usize, c);
                    }
                    let plane = (w * h) as usize;
                    tmp.data[c * plane + (y * w + x) as usize] = acc;
                }
            }
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let sy = (y + i as i64 - radius).clamp(0, h - 1);
                        acc += k * tmp.get(x as usize, sy as usize, c);
                    }
                    let plane = (w * h) as usize;
                    out.data[c * plane + (y * w + x) as usize] = acc;
                }
            }
        }
    }

    for v in &mut out.data {
        *v = ((*v - 0.5) * contrast + 0.5) * brightness;
    }

    if sigma_noise > 0.0 {
        let mut i = 0;
        while i < out.data.len() {
            let (g1, g2) = gaussian_pair(&mut rng);
            out.data[i] += g1 * sigma_noise;
            if i + 1 < out.data.len() {
                out.data[i + 1] += g2 * sigma_noise;
            }
            i += 2;
        }
    }

    if tx != 0 || ty != 0 {
        let src = out.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x - tx).clamp(0, w - 1) as usize;
                    let sy = (y - ty).clamp(0, h - 1) as usize;
                    let plane = (w * h) as usize;
                    out.data[c * plane + (y * w + x) as usize] = src.get(sx, sy, c);
                }
            }
        }
    }

    out.clamp01();
    out
}

/// One sampled training record.
pub struct Sample {
    pub params: ParamVector,
    pub image: Image,
    pub labels: LabelMap,
}

/// Train/validation index split (80/20 by position).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn make_split(n: usize) -> Split {
    let cut = n * 4 / 5;
    Split { train: (0..cut).collect(), val: (cut..n).collect() }
}

/// Samples `n` (params, image, labels) triples, deterministic per seed.
pub fn sample_dataset(n: usize, seed: u64) -> (Vec<Sample>, Split) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let params = ParamVector::sample(&mut rng);
            let (image, labels) = render(&params);
            Sample { params, image, labels }
        })
        .collect();
    (samples, make_split(n))
}

/// An identity-labeled image for recognizer training.
pub struct IdentityView {
    pub image: Image,
    pub identity: usize,
}

/// Samples `k` prototype identities with `views` jittered, domain-shifted
/// renders each. Views are grouped by identity in output order.
pub fn sample_identities(k: usize, views: usize, seed: u64) -> Vec<IdentityView> {
    assert!(k >= 2, "need at least two identities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<ParamVector> = (0..k).map(|_| ParamVector::sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(k * views);
    for (id, proto) in prototypes.iter().enumerate() {
        for _ in 0..views {
            let mut p = proto.clone();
            for v in &mut p.continuous {
                *v = (*v + rng.gen_range(-0.03f32..0.03)).clamp(0.0, 1.0);
            }
            let (img, _) = render(&p);
            let strength = rng.gen_range(0.0f32..0.7);
            let shift_seed = rng.gen::<u64>();
            out.push(IdentityView { image: photo_shift(&img, shift_seed, strength), identity: id });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::{CLASS_EYE, CLASS_HAIR, CLASS_MOUTH, CLASS_NOSE, NUM_CLASSES};
    use proptest::prelude::*;

    fn avg_with(idx: usize, v: f32) -> ParamVector {
        let mut p = ParamVector::average();
        p.continuous[idx] = v;
        p
    }

    #[test]
    fn average_face_covers_all_classes() {
        let (_, map) = render(&ParamVector::average());
        for class in 0..NUM_CLASSES as u8 {
            assert!(
                map.data.iter().any(|&c| c == class),
                "class {class} missing from average face"
            );
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let p = ParamVector::sample(&mut rng);
            let (i1, m1) = render(&p);
            let (i2, m2) = render(&p);
            assert_eq!(i1.data, i2.data);
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn eye_spacing_increases_centroid_distance() {
        let dist = |v: f32| {
            let (_, map) = render(&avg_with(cix::EYE_SPACING, v));
            // Split the eye class at the face midline to get two centroids.
            let (mut lx, mut ln, mut rx, mut rn) = (0.0, 0usize, 0.0, 0usize);
            for y in 0..map.height {
                for x in 0..map.width {
                    if map.get(x, y) == CLASS_EYE {
                        if (x as f32) < 32.0 {
                            lx += x as f32;
                            ln += 1;
                        } else {
                            rx += x as f32;
                            rn += 1;
                        }
                    }
                }
            }
            assert!(ln > 0 && rn > 0);
            rx / rn as f32 - lx / ln as f32
        };
        assert!(dist(1.0) > dist(0.0), "eye spacing not monotone");
    }

    #[test]
    fn vertical_controls_are_monotone() {
        for (idx, class) in
            [(cix::EYE_Y, CLASS_EYE), (cix::MOUTH_Y, CLASS_MOUTH), (cix::NOSE_Y, CLASS_NOSE)]
        {
            let mut prev = f64::NEG_INFINITY;
            for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let (_, map) = render(&avg_with(idx, v));
                let (_, cy) = map.centroid(class).expect("class missing");
                assert!(
                    cy > prev,
                    "control {idx} not strictly monotone at {v}: {cy} vs {prev}"
                );
                prev = cy;
            }
        }
    }

    #[test]
    fn hair_styles_differ() {
        let style = |s: usize| {
            let mut p = ParamVector::average();
            p.discrete[0] = vec![0.0; 4];
            p.discrete[0][s] = 1.0;
            let (_, map) = render(&p);
            let pixels: Vec<usize> = map
                .data
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == CLASS_HAIR)
                .map(|(i, _)| i)
                .collect();
            pixels
        };
        let sets: Vec<_> = (0..4).map(style).collect();
        let mut any_diff = false;
        for i in 0..4 {
            for j in (i + 1)..4 {
                if sets[i] != sets[j] {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff);
        assert!(sets[3].is_empty(), "bald style should have no hair");
    }

    #[test]
    fn features_lie_inside_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let p = ParamVector::sample(&mut rng);
            let (_, map) = render(&p);
            let face = FaceGeom::new(&p);
            for y in 0..map.height {
                for x in 0..map.width {
                    let c = map.get(x, y);
                    if c == CLASS_EYE || c == CLASS_NOSE || c == CLASS_MOUTH {
                        assert!(
                            face.inside(x as f32 + 0.5, y as f32 + 0.5),
                            "feature pixel ({x},{y}) outside face"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sample_dataset_is_deterministic_and_split() {
        let (a, split) = sample_dataset(50, 7);
        let (b, _) = sample_dataset(50, 7);
        assert_eq!(split.train.len(), 40);
        assert_eq!(split.val.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.image.data, y.image.data);
        }
    }

    #[test]
    fn continuous_coordinates_are_uniform_in_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut sums = vec![0.0f64; NUM_CONTINUOUS];
        for _ in 0..n {
            let p = ParamVector::sample(&mut rng);
            for (s, &v) in sums.iter_mut().zip(&p.continuous) {
                *s += v as f64;
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mean = s / n as f64;
            assert!((mean - 0.5).abs() < 0.02, "coordinate {i} mean {mean}");
        }
    }

    #[test]
    fn photo_shift_identity_at_zero_strength() {
        let (img, _) = render(&ParamVector::average());
        let shifted = photo_shift(&img, 99, 0.0);
        assert_eq!(img.data, shifted.data);
    }

    #[test]
    fn photo_shift_bounded_and_deterministic() {
        let (img, _) = render(&ParamVector::average());
        for seed in [1u64, 2, 3, 4, 5] {
            let a = photo_shift(&img, seed, 1.0);
            let b = photo_shift(&img, seed, 1.0);
            assert_eq!(a.data, b.data);
            let mad = img.mean_abs_diff(&a);
            assert!(mad > 0.0 && mad <= 0.5, "seed {seed}: mean abs change {mad}");
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_corpus_shape_and_determinism() {
        let views = sample_identities(5, 4, 42);
        assert_eq!(views.len(), 20);
        assert_eq!(views.iter().filter(|v| v.identity == 2).count(), 4);
        let again = sample_identities(5, 4, 42);
        assert_eq!(views[7].image.data, again[7].image.data);
        let other = sample_identities(5, 4, 43);
        assert!(views[0].image.data != other[0].image.data);
    }

    #[test]
    fn finalize_and_argmax_tie_breaks_low() {
        let mut p = ParamVector::average();
        p.discrete[1] = vec![0.2, 0.9, 0.9];
        assert_eq!(p.group_argmax(1), 1);
        let f = p.finalized();
        assert_eq!(f.discrete[1], vec![0.0, 1.0, 0.0]);
        // Already one-hot stays put.
        assert_eq!(f.finalized().discrete[1], vec![0.0, 1.0, 0.0]);
        // Renderer reads argmax, so both render identically.
        let (a, _) = render(&p);
        let (b, _) = render(&f);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ParamVector::sample(&mut rng);
        let flat = p.flatten();
        assert_eq!(flat.len(), TOTAL_DIM);
        assert_eq!(ParamVector::from_flat(&flat).unwrap(), p);
        assert!(ParamVector::from_flat(&flat[1..]).is_none());
    }

    proptest! {
        #[test]
        fn eye_y_monotone_for_separated_pairs(lo in 0.0f32..0.8, gap in 0.2f32..0.2001) {
            let hi = (lo + gap).min(1.0);
            let (_, m1) = render(&avg_with(cix::EYE_Y, lo));
            let (_, m2) = render(&avg_with(cix::EYE_Y, hi));
            let c1 = m1.centroid(CLASS_EYE).unwrap().1;
            let c2 = m2.centroid(CLASS_EYE).unwrap().1;
            prop_assert!(c2 > c1);
        }

        #[test]
        fn sampled_params_always_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ParamVector::sample(&mut rng);
            prop_assert!(p.in_range());
            // one-hot blocks sum to 1
            for g in &p.discrete {
                prop_assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
