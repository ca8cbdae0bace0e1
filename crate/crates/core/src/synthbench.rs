//! Synthetic scenes with exact ground truth, brute-force oracles, and image
//! quality metrics.
//!
//! A scene is a sum of smooth anisotropic Gaussian blobs ("faces") over a
//! flat background, rendered analytically in both the source pose and the
//! driving pose. The driving frame is never resampled from the source, so
//! the true source-from-driving transform is exact by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{tps_fit, Affine2D, Heatmap, KeypointSet, Transform};
use crate::modconv::ExpressionFeature;
use crate::tensor::{make_grid, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const EXPRESSION_DIM: usize = 16;

/// Which kind of ground-truth motion a scene carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Affine,
    Tps,
}

/// Parameter ranges for [`render_scene`]. Each `[lo, hi]` range is sampled
/// uniformly; `lo == hi` pins the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub motion: MotionKind,
    /// Forward (source to driving) rotation in degrees.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub translation_x: [f64; 2],
    pub translation_y: [f64; 2],
    /// Extra non-rigid displacement of each driving keypoint (TPS scenes).
    pub keypoint_jitter: f64,
    /// Additional decorative blobs per face.
    pub extra_blobs: usize,
    pub blob_sigma: [f64; 2],
    /// Eye openness of the driving frame, carried by the expression code.
    pub openness: [f64; 2],
    /// Eye openness of the source frame.
    pub source_openness: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            motion: MotionKind::Affine,
            rotation_deg: [-15.0, 15.0],
            scale: [0.9, 1.1],
            translation_x: [-0.15, 0.15],
            translation_y: [-0.15, 0.15],
            keypoint_jitter: 0.03,
            extra_blobs: 2,
            blob_sigma: [0.06, 0.1],
            openness: [0.0, 1.0],
            source_openness: [1.0, 1.0],
        }
    }
}

impl SceneSpec {
    /// No motion at all; source and driving differ only by expression.
    pub fn static_pose(size: usize) -> Self {
        Self {
            size,
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            translation_x: [0.0, 0.0],
            translation_y: [0.0, 0.0],
            keypoint_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(domain(format!("scene size must be >= 2, got {}", self.size)));
        }
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("translation_x", self.translation_x),
            ("translation_y", self.translation_y),
            ("blob_sigma", self.blob_sigma),
            ("openness", self.openness),
            ("source_openness", self.source_openness),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(domain(format!("range {name} = [{lo}, {hi}] is invalid")));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(domain("scale range must be positive"));
        }
        if self.blob_sigma[0] <= 0.0 {
            return Err(domain("blob sigma range must be positive"));
        }
        if self.openness[0] < 0.0 || self.openness[1] > 1.0 || self.source_openness[0] < 0.0 || self.source_openness[1] > 1.0 {
            return Err(domain("openness ranges must lie in [0, 1]"));
        }
        if !(self.keypoint_jitter >= 0.0) {
            return Err(domain("keypoint jitter must be >= 0"));
        }
        Ok(())
    }

    fn is_static(&self) -> bool {
        self.rotation_deg == [0.0, 0.0]
            && self.scale == [1.0, 1.0]
            && self.translation_x == [0.0, 0.0]
            && self.translation_y == [0.0, 0.0]
            && self.keypoint_jitter == 0.0
    }
}

/// An anisotropic Gaussian with an RGB amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 2],
    /// Inverse covariance `[[a, b], [b, d]]` stored as `(a, b, d)`.
    pub precision: [f64; 3],
    pub color: [f64; 3],
}

impl Blob {
    fn new(center: [f64; 2], cov: [[f64; 2]; 2], color: [f64; 3]) -> Self {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        Self {
            center,
            precision: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
            color,
        }
    }

    /// Unnormalized Gaussian profile at `p`.
    #[inline]
    pub fn profile(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let [a, b, d] = self.precision;
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + d * dy * dy)).exp()
    }

    /// The same blob pushed forward through `x -> m x`.
    fn pushed(&self, m: &Affine2D) -> Blob {
        let cov = precision_to_cov(self.precision);
        let l = m.linear;
        let lc = [
            [l[0][0] * cov[0][0] + l[0][1] * cov[1][0], l[0][0] * cov[0][1] + l[0][1] * cov[1][1]],
            [l[1][0] * cov[0][0] + l[1][1] * cov[1][0], l[1][0] * cov[0][1] + l[1][1] * cov[1][1]],
        ];
        let c2 = [
            [lc[0][0] * l[0][0] + lc[0][1] * l[0][1], lc[0][0] * l[1][0] + lc[0][1] * l[1][1]],
            [lc[1][0] * l[0][0] + lc[1][1] * l[0][1], lc[1][0] * l[1][0] + lc[1][1] * l[1][1]],
        ];
        Blob::new(m.apply(self.center), c2, self.color)
    }
}

fn precision_to_cov(p: [f64; 3]) -> [[f64; 2]; 2] {
    let [a, b, d] = p;
    let det = a * d - b * b;
    [[d / det, -b / det], [-b / det, a / det]]
}

/// Analytic face: background, face oval, decorative blobs and two eyes whose
/// amplitude is scaled by the openness factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub background: [f64; 3],
    pub blobs: Vec<Blob>,
    /// Eye blobs at full openness.
    pub eyes: Vec<Blob>,
}

impl Face {
    /// Colour at `p` for the given eye openness, clamped to `[0, 1]`.
    pub fn shade(&self, p: [f64; 2], openness: f64) -> [f64; 3] {
        let mut c = self.background;
        for b in &self.blobs {
            let g = b.profile(p);
            for k in 0..3 {
                c[k] += b.color[k] * g;
            }
        }
        for e in &self.eyes {
            let g = openness * e.profile(p);
            for k in 0..3 {
                c[k] += e.color[k] * g;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Renders `[3,H,W]` by evaluating the face at `map(p)` for every
    /// lattice point `p`.
    pub fn render_mapped(&self, size: usize, openness: f64, map: impl Fn([f64; 2]) -> [f64; 2]) -> Tensor {
        let grid = make_grid(size, size).expect("size >= 1");
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        for (i, &p) in grid.coords.iter().enumerate() {
            let c = self.shade(map(p), openness);
            for k in 0..3 {
                data[k * plane + i] = c[k];
            }
        }
        Tensor::from_vec(&[3, size, size], data).expect("finite shading")
    }

    pub fn render(&self, size: usize, openness: f64) -> Tensor {
        self.render_mapped(size, openness, |p| p)
    }

    fn pushed(&self, m: &Affine2D) -> Face {
        Face {
            background: self.background,
            blobs: self.blobs.iter().map(|b| b.pushed(m)).collect(),
            eyes: self.eyes.iter().map(|b| b.pushed(m)).collect(),
        }
    }

    /// Anchor points used as TPS keypoints: blob and eye centres.
    fn keypoints(&self) -> Vec<[f64; 2]> {
        self.blobs.iter().chain(&self.eyes).map(|b| b.center).collect()
    }
}

/// A source/driving pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub source: Tensor,
    pub driving: Tensor,
    /// Backward map from driving coordinates to source coordinates.
    pub transform: Transform,
    /// Forward similarity applied to the source face.
    pub motion: Affine2D,
    pub source_face: Face,
    /// Analytic driving face (affine scenes only).
    pub driving_face: Option<Face>,
    pub source_heatmap: Heatmap,
    pub driving_heatmap: Heatmap,
    pub source_keypoints: KeypointSet,
    pub driving_keypoints: KeypointSet,
    pub source_openness: f64,
    pub driving_openness: f64,
    /// Expression code for the driving frame.
    pub expression: ExpressionFeature,
    pub seed: u64,
}

impl SyntheticScene {
    /// Renders the driving pose with a different eye openness.
    pub fn driving_with_openness(&self, openness: f64) -> Tensor {
        let size = self.driving.shape()[1];
        match &self.driving_face {
            Some(f) => f.render(size, openness),
            None => {
                let t = &self.transform;
                self.source_face.render_mapped(size, openness, |p| t.apply(p))
            }
        }
    }

    /// `[H,W]` indicator of pixels within three standard deviations of an
    /// eye in the driving frame.
    pub fn eye_region(&self) -> Tensor {
        let size = self.driving.shape()[1];
        let grid = make_grid(size, size).expect("size >= 1");
        let cut = (-4.5f64).exp();
        let data = grid
            .coords
            .iter()
            .map(|&p| {
                let q = self.transform.apply(p);
                let inside = self.source_face.eyes.iter().any(|e| e.profile(q) >= cut);
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_vec(&[size, size], data).expect("finite")
    }
}

/// Deterministic 16-d expression code for an eye-openness factor.
pub fn expression_code(openness: f64) -> ExpressionFeature {
    let v = (0..EXPRESSION_DIM)
        .map(|k| (std::f64::consts::PI * (k as f64 + 1.0) * openness / 4.0).cos())
        .collect();
    ExpressionFeature::new(v).expect("finite code")
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn random_face(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Face {
    let bg = [0.0; 3].map(|_| uniform(rng, [0.05, 0.15]));
    let center = [uniform(rng, [-0.08, 0.08]), uniform(rng, [-0.08, 0.08])];
    let sx = uniform(rng, [0.3, 0.38]);
    let sy = uniform(rng, [0.36, 0.45]);
    let face_color = [0.0; 3].map(|_| uniform(rng, [0.3, 0.5]));
    let mut blobs = vec![Blob::new(center, [[sx * sx, 0.0], [0.0, sy * sy]], face_color)];

    let mouth_c = [center[0] + uniform(rng, [-0.04, 0.04]), center[1] + uniform(rng, [0.22, 0.3])];
    let mw = uniform(rng, [0.1, 0.14]);
    let mh = uniform(rng, [0.04, 0.06]);
    let mouth_color = [uniform(rng, [0.1, 0.25]), uniform(rng, [-0.1, 0.05]), uniform(rng, [-0.1, 0.05])];
    blobs.push(Blob::new(mouth_c, [[mw * mw, 0.0], [0.0, mh * mh]], mouth_color));

    for _ in 0..spec.extra_blobs {
        let c = [
            center[0] + uniform(rng, [-0.3, 0.3]),
            center[1] + uniform(rng, [-0.45, -0.3]),
        ];
        let s = uniform(rng, spec.blob_sigma);
        let color = [0.0; 3].map(|_| uniform(rng, [-0.1, 0.1]));
        blobs.push(Blob::new(c, [[s * s, 0.0], [0.0, s * s]], color));
    }

    let eye_dx = uniform(rng, [0.16, 0.22]);
    let eye_y = center[1] - uniform(rng, [0.08, 0.14]);
    let es = uniform(rng, [0.08, 0.12]);
    let eye_color = [0.0; 3].map(|_| uniform(rng, [0.3, 0.45]));
    let eyes = [-1.0, 1.0]
        .iter()
        .map(|side| {
            Blob::new(
                [center[0] + side * eye_dx, eye_y],
                [[es * es, 0.0], [0.0, 0.7 * es * es]],
                eye_color,
            )
        })
        .collect();
    Face {
        background: bg,
        blobs,
        eyes,
    }
}

fn blob_heatmap(size: usize, blob: &Blob) -> Result<Heatmap> {
    let grid = make_grid(size, size)?;
    let w = grid.coords.iter().map(|&p| blob.profile(p)).collect();
    Heatmap::from_weights(Tensor::from_vec(&[size, size], w)?)
}

/// Renders the scene for `seed`. Identical seeds and specs give bitwise
/// identical scenes.
pub fn render_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = random_face(&mut rng, spec);
    let angle = uniform(&mut rng, spec.rotation_deg).to_radians();
    let scale = uniform(&mut rng, spec.scale);
    let tx = uniform(&mut rng, spec.translation_x);
    let ty = uniform(&mut rng, spec.translation_y);
    let motion = Affine2D::similarity(angle, scale, [tx, ty]);
    let source_openness = uniform(&mut rng, spec.source_openness);
    let driving_openness = uniform(&mut rng, spec.openness);

    let size = spec.size;
    let source = face.render(size, source_openness);
    let src_kp = face.keypoints();
    let moved = face.pushed(&motion);

    let (transform, driving_face, drv_kp) = if spec.is_static() {
        (Transform::Affine(Affine2D::IDENTITY), Some(face.clone()), src_kp.clone())
    } else {
        match spec.motion {
            MotionKind::Affine => {
                let back = motion.inverse()?;
                (Transform::Affine(back), Some(moved.clone()), moved.keypoints())
            }
            MotionKind::Tps => {
                let drv: Vec<[f64; 2]> = moved
                    .keypoints()
                    .into_iter()
                    .map(|p| {
                        let j = spec.keypoint_jitter;
                        [p[0] + uniform(&mut rng, [-j, j]), p[1] + uniform(&mut rng, [-j, j])]
                    })
                    .collect();
                // Frame corners pin the far field to the similarity motion.
                let mut d_all = drv.clone();
                let mut s_all = src_kp.clone();
                let back = motion.inverse()?;
                for c in [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]] {
                    d_all.push(c);
                    s_all.push(back.apply(c));
                }
                let t = tps_fit(&KeypointSet::new(d_all)?, &KeypointSet::new(s_all)?, 0.0)?;
                (Transform::Tps(t), None, drv)
            }
        }
    };

    let driving = match &driving_face {
        Some(f) => f.render(size, driving_openness),
        None => face.render_mapped(size, driving_openness, |p| transform.apply(p)),
    };
    let drv_face_blob = match &driving_face {
        Some(f) => f.blobs[0],
        None => moved.blobs[0],
    };

    Ok(SyntheticScene {
        source,
        driving,
        source_heatmap: blob_heatmap(size, &face.blobs[0])?,
        driving_heatmap: blob_heatmap(size, &drv_face_blob)?,
        source_keypoints: KeypointSet::new(src_kp)?,
        driving_keypoints: KeypointSet::new(drv_kp)?,
        transform,
        motion,
        source_face: face,
        driving_face,
        source_openness,
        driving_openness,
        expression: expression_code(driving_openness),
        seed,
    })
}

/// First and second moments of a heatmap by direct accumulation over pixel
/// indices; deliberately shares no code with the geometry module.
pub fn moment_oracle(h: &Heatmap) -> ([f64; 2], [[f64; 2]; 2]) {
    let v = h.values();
    let (rows, cols) = (v.shape()[0], v.shape()[1]);
    let coord = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let (mut mx, mut my) = (0.0, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            let p = v.data()[r * cols + c];
            mx += p * coord(c, cols);
            my += p * coord(r, rows);
        }
    }
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            let p = v.data()[r * cols + c];
            let dx = coord(c, cols) - mx;
            let dy = coord(r, rows) - my;
            xx += p * dx * dx;
            xy += p * dx * dy;
            yy += p * dy * dy;
        }
    }
    ([mx, my], [[xx, xy], [xy, yy]])
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(peak > 0.0) {
        return Err(domain(format!("peak must be positive, got {peak}")));
    }
    if a.is_empty() {
        return Err(domain("psnr of empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM over all fully-contained 7x7 windows of every channel, with
/// uniform weighting, population statistics and peak 1. Accepts `[H,W]` or
/// `[C,H,W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(domain(format!("ssim expects [H,W] or [C,H,W], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(domain(format!("image {h}x{w} is smaller than the SSIM window")));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let u = ad[off + y * w + x];
                        let v = bd[off + y * w + x];
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// PSNR over the central crop that drops `margin` of the extent on each side.
pub fn interior_psnr(a: &Tensor, b: &Tensor, margin: f64) -> Result<f64> {
    let ca = interior_crop(a, margin)?;
    let cb = interior_crop(b, margin)?;
    psnr(&ca, &cb, 1.0)
}

pub fn interior_crop(t: &Tensor, margin: f64) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let my = (h as f64 * margin).round() as usize;
    let mx = (w as f64 * margin).round() as usize;
    if 2 * my >= h || 2 * mx >= w {
        return Err(domain("crop margin leaves no pixels"));
    }
    let (oh, ow) = (h - 2 * my, w - 2 * mx);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in my..h - my {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&t.data()[row + mx..row + w - mx]);
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Gaussian heatmap sampled on a `size x size` lattice and normalized.
pub fn gaussian_heatmap(size: usize, mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Heatmap> {
    let blob = Blob::new(mean, cov, [0.0; 3]);
    blob_heatmap(size, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{coarse_flow, warp_features};
    use crate::geometry::heatmap_translation;

    #[test]
    fn static_spec_gives_identical_frames_up_to_expression() {
        let spec = SceneSpec {
            openness: [0.6, 0.6],
            source_openness: [0.6, 0.6],
            ..SceneSpec::static_pose(32)
        };
        let s = render_scene(7, &spec).unwrap();
        assert_eq!(s.source, s.driving);
        assert!(s.transform.is_identity());
    }

    #[test]
    fn scenes_are_reproducible() {
        for motion in [MotionKind::Affine, MotionKind::Tps] {
            let spec = SceneSpec {
                motion,
                size: 32,
                ..SceneSpec::default()
            };
            let a = render_scene(11, &spec).unwrap();
            let b = render_scene(11, &spec).unwrap();
            assert_eq!(a.source, b.source);
            assert_eq!(a.driving, b.driving);
            assert_eq!(a.transform, b.transform);
            let c = render_scene(12, &spec).unwrap();
            assert_ne!(a.source, c.source);
        }
    }

    #[test]
    fn translation_moves_blob_centers_exactly() {
        let spec = SceneSpec {
            translation_x: [0.2, 0.2],
            ..SceneSpec::static_pose(32)
        };
        let s = render_scene(3, &spec).unwrap();
        let drv = s.driving_face.as_ref().unwrap();
        for (a, b) in s.source_face.blobs.iter().chain(&s.source_face.eyes).zip(drv.blobs.iter().chain(&drv.eyes)) {
            assert_eq!(b.center, [a.center[0] + 0.2, a.center[1]]);
        }
    }

    #[test]
    fn ground_truth_warp_reproduces_driving() {
        for motion in [MotionKind::Affine, MotionKind::Tps] {
            for seed in 0..5 {
                let spec = SceneSpec {
                    motion,
                    openness: [0.5, 0.5],
                    source_openness: [0.5, 0.5],
                    ..SceneSpec::default()
                };
                let s = render_scene(seed, &spec).unwrap();
                let flow = coarse_flow(&s.transform, 64, 64).unwrap();
                let warped = warp_features(&s.source, &flow).unwrap();
                let p = interior_psnr(&warped, &s.driving, 0.1).unwrap();
                assert!(p > 30.0, "{motion:?} seed {seed}: {p}");
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SceneSpec {
            scale: [1.2, 0.8],
            ..SceneSpec::default()
        };
        assert!(render_scene(0, &bad).is_err());
        let bad = SceneSpec {
            openness: [0.0, 2.0],
            ..SceneSpec::default()
        };
        assert!(render_scene(0, &bad).is_err());
    }

    #[test]
    fn oracle_moments() {
        let mut t = Tensor::zeros(&[5, 5]);
        t.data_mut()[7] = 1.0;
        let (m, c) = moment_oracle(&Heatmap::new(t).unwrap());
        assert_eq!(m, [0.0, -0.5]);
        assert_eq!(c, [[0.0, 0.0], [0.0, 0.0]]);

        let mut t = Tensor::zeros(&[3, 5]);
        t.data_mut()[5 + 1] = 0.5;
        t.data_mut()[5 + 3] = 0.5;
        let (m, c) = moment_oracle(&Heatmap::new(t).unwrap());
        assert_eq!(m, [0.0, 0.0]);
        assert!((c[0][0] - 0.25).abs() < 1e-15);
        assert_eq!(c[1][1], 0.0);
        assert_eq!(c[0][1], 0.0);
    }

    #[test]
    fn oracle_agrees_with_geometry_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = Heatmap::from_weights(Tensor::from_fn(&[13, 17], |_| rng.gen::<f64>())).unwrap();
            let (m, _) = moment_oracle(&h);
            let t = heatmap_translation(&h);
            assert!((m[0] - t[0]).abs() < 1e-12 && (m[1] - t[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_translation_matches_mean() {
        let h = gaussian_heatmap(64, [0.25, -0.5], [[0.0225, 0.0], [0.0, 0.0225]]).unwrap();
        let t = heatmap_translation(&h);
        assert!((t[0] - 0.25).abs() < 1e-3 && (t[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let b = Tensor::full(&[3, 4, 4], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[2, 5, 5], |_| rng.gen());
        let y = Tensor::from_fn(&[2, 5, 5], |_| rng.gen());
        let mut se = 0.0;
        for i in 0..50 {
            se += (x.data()[i] - y.data()[i]).powi(2);
        }
        let want = 10.0 * (0.25 / (se / 50.0)).log10();
        assert!((psnr(&x, &y, 0.5).unwrap() - want).abs() < 1e-10);
        assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn ssim_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::from_fn(&[3, 12, 12], |_| rng.gen());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let b = Tensor::from_fn(&[3, 12, 12], |_| rng.gen());
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());

        let (u, v) = (0.3, 0.45);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * u * v + c1) / (u * u + v * v + c1);
        let got = ssim(&Tensor::full(&[9, 10], u), &Tensor::full(&[9, 10], v)).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[5, 5]), &Tensor::zeros(&[5, 5])).is_err());
    }

    #[test]
    fn expression_code_is_deterministic_and_sized() {
        assert_eq!(expression_code(0.3), expression_code(0.3));
        assert_eq!(expression_code(0.3).dim(), EXPRESSION_DIM);
        assert_ne!(expression_code(0.3), expression_code(0.7));
    }

    #[test]
    fn eye_region_covers_eyes() {
        let s = render_scene(2, &SceneSpec::default()).unwrap();
        let r = s.eye_region();
        let inside: f64 = r.data().iter().sum();
        assert!(inside > 10.0 && inside < 0.3 * 64.0 * 64.0, "{inside}");
        let open = s.driving_with_openness(1.0);
        let shut = s.driving_with_openness(0.0);
        let mut outside_change = 0.0f64;
        for ch in 0..3 {
            for i in 0..64 * 64 {
                if r.data()[i] == 0.0 {
                    outside_change = outside_change.max((open.data()[ch * 4096 + i] - shut.data()[ch * 4096 + i]).abs());
                }
            }
        }
        assert!(outside_change < 0.01, "{outside_change}");
    }
}
