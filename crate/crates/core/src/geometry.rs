//! Head-motion transforms as pure math.
//!
//! Two interchangeable bottlenecks map driving-frame coordinates onto
//! source-frame coordinates (backward warping):
//!
//! * an affine built from the first and second moments of a probability
//!   heatmap, made relative between two frames through a shared abstract
//!   reference frame;
//! * a thin-plate spline interpolating keypoint correspondences.

use std::fmt::Write as _;

use serde_json::Value;

use crate::error::{domain, Error, Result};
use crate::linalg::{apply2, inv2, mul2, sym2_eigen, Lu};
use crate::tensor::{make_grid, Grid2D, Tensor};

pub const DEFAULT_EPS_COV: f64 = 1e-6;
/// Reciprocal condition number below which a TPS system counts as singular.
pub const TPS_RCOND_MIN: f64 = 1e-12;
const COINCIDENT_TOL: f64 = 1e-9;
const HEATMAP_SUM_TOL: f64 = 1e-9;

/// A single-channel probability map over the normalized lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    grid: Grid2D,
    values: Tensor,
}

impl Heatmap {
    /// Takes a `[H,W]` tensor that must already be a probability distribution.
    pub fn new(values: Tensor) -> Result<Self> {
        let (h, w) = match values.shape() {
            [h, w] => (*h, *w),
            s => return Err(domain(format!("heatmap must be [H,W], got {s:?}"))),
        };
        if let Some(i) = values.data().iter().position(|&v| v < 0.0) {
            return Err(domain(format!("heatmap value at flat index {i} is negative")));
        }
        let sum: f64 = values.data().iter().sum();
        if (sum - 1.0).abs() > HEATMAP_SUM_TOL {
            return Err(domain(format!("heatmap sums to {sum}, expected 1")));
        }
        Ok(Self {
            grid: make_grid(h, w)?,
            values,
        })
    }

    /// Normalizes a non-negative `[H,W]` tensor to unit mass.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let sum: f64 = weights.data().iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(domain("heatmap weights must have positive finite mass"));
        }
        Self::new(weights.map(|v| v / sum))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// `[linear | translation]` acting on normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        linear: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    pub fn new(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Self {
        Self {
            linear,
            translation,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(Self::IDENTITY.linear, [tx, ty])
    }

    /// Rotation by `angle` radians with isotropic `scale`, then translation.
    pub fn similarity(angle: f64, scale: f64, translation: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new([[scale * c, -scale * s], [scale * s, scale * c]], translation)
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let l = &self.linear;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + self.translation[0],
            l[1][0] * p[0] + l[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let l = &self.linear;
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    pub fn inverse(&self) -> Result<Affine2D> {
        let inv = inv2(self.linear)
            .ok_or_else(|| Error::Numeric("affine linear part is singular".into()))?;
        let t = apply2(inv, self.translation);
        Ok(Affine2D::new(inv, [-t[0], -t[1]]))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Affine2D) -> Affine2D {
        let t = apply2(self.linear, other.translation);
        Affine2D::new(
            mul2(self.linear, other.linear),
            [t[0] + self.translation[0], t[1] + self.translation[1]],
        )
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.linear.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::Numeric("affine has non-finite entries".into()))
        }
    }
}

/// Expected pixel location under the heatmap.
pub fn heatmap_translation(h: &Heatmap) -> [f64; 2] {
    let mut t = [0.0, 0.0];
    for (z, &p) in h.grid.coords.iter().zip(h.values.data()) {
        t[0] += p * z[0];
        t[1] += p * z[1];
    }
    t
}

/// Heatmap covariance about its mean, plus `eps_cov` on the diagonal.
/// Entries are `(xx, xy, yy)`.
pub fn heatmap_covariance(h: &Heatmap, eps_cov: f64) -> (f64, f64, f64) {
    let t = heatmap_translation(h);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (z, &p) in h.grid.coords.iter().zip(h.values.data()) {
        let dx = z[0] - t[0];
        let dy = z[1] - t[1];
        sxx += p * dx * dx;
        sxy += p * dx * dy;
        syy += p * dy * dy;
    }
    (sxx + eps_cov, sxy, syy + eps_cov)
}

/// Affine from heatmap moments: translation is the mean, the linear part is
/// `U Σ^{1/2}` from the SVD of the regularized covariance. Singular values
/// are ordered descending and each column of `U` is signed so that its
/// largest-magnitude entry is positive.
pub fn heatmap_to_affine(h: &Heatmap, eps_cov: f64) -> Result<Affine2D> {
    if !(eps_cov > 0.0) {
        return Err(domain(format!("eps_cov must be positive, got {eps_cov}")));
    }
    let t = heatmap_translation(h);
    let (a, b, d) = heatmap_covariance(h, eps_cov);
    if ![a, b, d].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("heatmap covariance is not finite".into()));
    }
    // For a symmetric PSD matrix the SVD coincides with the eigendecomposition.
    let (sv, u) = sym2_eigen(a, b, d);
    let r0 = sv[0].max(0.0).sqrt();
    let r1 = sv[1].max(0.0).sqrt();
    let affine = Affine2D::new([[u[0][0] * r0, u[0][1] * r1], [u[1][0] * r0, u[1][1] * r1]], t);
    affine.check_finite()?;
    Ok(affine)
}

/// Motion from the driving frame to the source frame:
/// `A_{S<-D} = A_{S<-R} · A_{D<-R}^{-1}`.
pub fn relative_affine(src: &Affine2D, drv: &Affine2D) -> Result<Affine2D> {
    let drv_inv = drv.inverse()?;
    let out = src.compose(&drv_inv);
    out.check_finite()?;
    Ok(out)
}

/// Distinct 2-D points in normalized coordinates, at least three.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 3 {
            return Err(domain(format!(
                "keypoint set needs at least 3 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(domain(format!("keypoint {i} is not finite")));
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let d = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
                if d < COINCIDENT_TOL {
                    return Err(domain(format!(
                        "keypoints {i} and {j} coincide at ({}, {})",
                        points[i][0], points[i][1]
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Thin-plate spline mapping driving coordinates to source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TPSTransform {
    anchors: KeypointSet,
    /// Rows are output x and y: `[l_0, l_1, t]`.
    affine: [[f64; 3]; 2],
    weights: Vec<[f64; 2]>,
}

impl TPSTransform {
    /// Assembles a transform from raw coefficients. The bending weights must
    /// satisfy the side conditions to within `1e-8`.
    pub fn from_parts(
        anchors: KeypointSet,
        affine: [[f64; 3]; 2],
        weights: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if weights.len() != anchors.len() {
            return Err(domain(format!(
                "{} weights for {} anchors",
                weights.len(),
                anchors.len()
            )));
        }
        let t = Self {
            anchors,
            affine,
            weights,
        };
        let resid = t.side_condition_residual();
        if resid > 1e-8 {
            return Err(domain(format!("TPS side conditions violated by {resid:e}")));
        }
        Ok(t)
    }

    /// A TPS that is exactly the given affine map.
    pub fn from_affine(anchors: KeypointSet, a: &Affine2D) -> Self {
        let n = anchors.len();
        Self {
            anchors,
            affine: [
                [a.linear[0][0], a.linear[0][1], a.translation[0]],
                [a.linear[1][0], a.linear[1][1], a.translation[1]],
            ],
            weights: vec![[0.0; 2]; n],
        }
    }

    pub fn anchors(&self) -> &KeypointSet {
        &self.anchors
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    /// Largest absolute entry of `Σ ω_i` and `Σ ω_i P_iᵀ`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut sums = [0.0f64; 6];
        for (w, p) in self.weights.iter().zip(self.anchors.points()) {
            for d in 0..2 {
                sums[d] += w[d];
                sums[2 + 2 * d] += w[d] * p[0];
                sums[3 + 2 * d] += w[d] * p[1];
            }
        }
        sums.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_weight(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// `r² log r²`, continuous at zero.
#[inline]
pub fn tps_radial(r: f64) -> f64 {
    tps_radial_sq(r * r)
}

#[inline]
fn tps_radial_sq(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Fits the thin-plate spline with `T(driving_i) = source_i` (exactly when
/// `reg == 0`, smoothed otherwise).
pub fn tps_fit(driving: &KeypointSet, source: &KeypointSet, reg: f64) -> Result<TPSTransform> {
    let n = driving.len();
    if source.len() != n {
        return Err(domain(format!(
            "keypoint count mismatch: {} driving vs {} source",
            n,
            source.len()
        )));
    }
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(domain(format!("regularization must be >= 0, got {reg}")));
    }
    let pd = driving.points();
    let size = n + 3;
    let mut m = vec![0.0; size * size];
    for i in 0..n {
        for j in 0..n {
            m[i * size + j] = tps_radial_sq(sq_dist(pd[i], pd[j]));
        }
        m[i * size + i] += reg;
        let row = [1.0, pd[i][0], pd[i][1]];
        for (k, &v) in row.iter().enumerate() {
            m[i * size + n + k] = v;
            m[(n + k) * size + i] = v;
        }
    }
    let lu = Lu::factor(size, &m).map_err(|_| singular_tps(pd))?;
    if lu.rcond() < TPS_RCOND_MIN {
        return Err(singular_tps(pd));
    }
    let mut affine = [[0.0; 3]; 2];
    let mut weights = vec![[0.0; 2]; n];
    for d in 0..2 {
        let mut rhs = vec![0.0; size];
        for (i, p) in source.points().iter().enumerate() {
            rhs[i] = p[d];
        }
        let sol = lu.solve(&rhs);
        for i in 0..n {
            weights[i][d] = sol[i];
        }
        affine[d] = [sol[n + 1], sol[n + 2], sol[n]];
    }
    if !weights.iter().flatten().chain(affine.iter().flatten()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("TPS solve produced non-finite coefficients".into()));
    }
    Ok(TPSTransform {
        anchors: driving.clone(),
        affine,
        weights,
    })
}

fn singular_tps(pd: &[[f64; 2]]) -> Error {
    // Name the closest pair; a singular system almost always means two
    // anchors nearly coincide or all anchors are collinear.
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..pd.len() {
        for j in i + 1..pd.len() {
            let d = sq_dist(pd[i], pd[j]).sqrt();
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    domain(format!(
        "singular TPS system (closest driving keypoints {} and {} at distance {:e}; points may be collinear)",
        best.0, best.1, best.2
    ))
}

/// Evaluates `A [p; 1] + Σ ω_i φ(|P_i - p|)`.
pub fn tps_eval(t: &TPSTransform, p: [f64; 2]) -> [f64; 2] {
    let a = &t.affine;
    let mut out = [
        a[0][0] * p[0] + a[0][1] * p[1] + a[0][2],
        a[1][0] * p[0] + a[1][1] * p[1] + a[1][2],
    ];
    for (anchor, w) in t.anchors.points().iter().zip(&t.weights) {
        let phi = tps_radial_sq(sq_dist(*anchor, p));
        out[0] += w[0] * phi;
        out[1] += w[1] * phi;
    }
    out
}

/// Either head-motion bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Affine(Affine2D),
    Tps(TPSTransform),
}

impl Transform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Transform::Affine(a) => a.apply(p),
            Transform::Tps(t) => tps_eval(t, p),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Transform::Affine(a) => *a == Affine2D::IDENTITY,
            Transform::Tps(t) => {
                t.max_weight() == 0.0 && t.affine == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
            }
        }
    }

    /// JSON with fixed field order and 17 significant digits per number.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        match self {
            Transform::Affine(a) => {
                s.push_str("{\"type\":\"affine\",\"linear\":");
                write_rows(&mut s, a.linear.iter().map(|r| &r[..]));
                s.push_str(",\"translation\":");
                write_row(&mut s, &a.translation);
                s.push('}');
            }
            Transform::Tps(t) => {
                s.push_str("{\"type\":\"tps\",\"anchors\":");
                write_rows(&mut s, t.anchors.points().iter().map(|r| &r[..]));
                s.push_str(",\"affine\":");
                write_rows(&mut s, t.affine.iter().map(|r| &r[..]));
                s.push_str(",\"weights\":");
                write_rows(&mut s, t.weights.iter().map(|r| &r[..]));
                s.push('}');
            }
        }
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let kind = v
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| domain("transform JSON needs a string \"type\""))?;
        match kind {
            "affine" => {
                let linear = matrix::<2>(&v, "linear")?;
                let tr = vector(&v, "translation")?;
                if linear.len() != 2 || tr.len() != 2 {
                    return Err(domain("affine needs a 2x2 linear part and a 2-vector"));
                }
                Ok(Transform::Affine(Affine2D::new(
                    [linear[0], linear[1]],
                    [tr[0], tr[1]],
                )))
            }
            "tps" => {
                let anchors = KeypointSet::new(matrix::<2>(&v, "anchors")?)?;
                let affine = matrix::<3>(&v, "affine")?;
                if affine.len() != 2 {
                    return Err(domain("tps affine must be 2x3"));
                }
                let weights = matrix::<2>(&v, "weights")?;
                Ok(Transform::Tps(TPSTransform::from_parts(
                    anchors,
                    [affine[0], affine[1]],
                    weights,
                )?))
            }
            other => Err(domain(format!("unknown transform type {other:?}"))),
        }
    }
}

/// Formats a number with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_row(s: &mut String, row: &[f64]) {
    s.push('[');
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{}", fmt_num(*v));
    }
    s.push(']');
}

fn write_rows<'a>(s: &mut String, rows: impl Iterator<Item = &'a [f64]>) {
    s.push('[');
    for (i, r) in rows.enumerate() {
        if i > 0 {
            s.push(',');
        }
        write_row(s, r);
    }
    s.push(']');
}

fn vector(v: &Value, key: &str) -> Result<Vec<f64>> {
    let arr = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| domain(format!("missing array {key:?}")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| domain(format!("non-numeric entry in {key:?}")))
        })
        .collect()
}

fn matrix<const N: usize>(v: &Value, key: &str) -> Result<Vec<[f64; N]>> {
    let rows = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| domain(format!("missing array {key:?}")))?;
    rows.iter()
        .map(|row| {
            let r = row
                .as_array()
                .filter(|r| r.len() == N)
                .ok_or_else(|| domain(format!("rows of {key:?} must have {N} entries")))?;
            let mut out = [0.0; N];
            for (o, x) in out.iter_mut().zip(r) {
                *o = x
                    .as_f64()
                    .ok_or_else(|| domain(format!("non-numeric entry in {key:?}")))?;
            }
            Ok(out)
        })
        .collect()
}

/// Parses `[[x, y], ...]` or `{"points": [[x, y], ...]}`.
pub fn keypoints_from_json(text: &str) -> Result<KeypointSet> {
    let v: Value = serde_json::from_str(text)?;
    let pts = if v.is_array() {
        matrix::<2>(&serde_json::json!({ "points": v }), "points")?
    } else {
        matrix::<2>(&v, "points")?
    };
    KeypointSet::new(pts)
}
