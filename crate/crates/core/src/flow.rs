//! Dense backward flows: identity and transform-induced coarse flows, their
//! mask-weighted composition, feature warping and confidence gating.
//!
//! Flows hold absolute normalized sampling coordinates, not displacements, so
//! the identity flow is literally the pixel lattice.

use crate::error::{domain, parse_err, Result};
use crate::geometry::{tps_eval, Affine2D, TPSTransform, Transform};
use crate::tensor::{bilinear_sample, make_grid, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(domain(format!(
                "flow {height}x{width} needs {} coordinates, got {}",
                height * width,
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(domain(format!("flow coordinate {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    fn check_same_extent(&self, other: &FlowField) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(domain(format!(
                "flow extents differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Serializes to the `DFLW` container: magic, u32 height, u32 width, then
    /// little-endian f64 `(x, y)` pairs in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 16 * self.coords.len());
        out.extend_from_slice(b"DFLW");
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for c in &self.coords {
            out.extend_from_slice(&c[0].to_le_bytes());
            out.extend_from_slice(&c[1].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(parse_err(bytes.len(), "truncated DFLW header"));
        }
        if &bytes[..4] != b"DFLW" {
            return Err(parse_err(0, "bad magic, expected DFLW"));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + 16 * h * w;
        if bytes.len() != need {
            return Err(parse_err(
                bytes.len().min(need),
                format!("DFLW payload for {h}x{w} needs {need} bytes, got {}", bytes.len()),
            ));
        }
        let coords = bytes[12..]
            .chunks_exact(16)
            .map(|c| {
                [
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                ]
            })
            .collect();
        FlowField::new(h, w, coords).map_err(|e| parse_err(12, e.to_string()))
    }
}

/// Per-pixel weight of the coarse flow, each value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    values: Tensor,
}

impl MotionMask {
    /// Accepts `[H,W]` or `[1,H,W]`; out-of-range values are rejected, not clamped.
    pub fn new(values: Tensor) -> Result<Self> {
        let values = to_single_plane(values, "motion mask")?;
        check_unit_range(&values, "motion mask")?;
        Ok(Self { values })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Result<Self> {
        Self::new(Tensor::full(&[height, width], v))
    }

    /// Values as `[H,W]`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// Per-pixel gate applied to aligned features, each value in `[0, 1]`.
/// A single-channel map is broadcast across feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    values: Tensor,
}

impl ConfidenceMap {
    /// Accepts `[H,W]`, `[1,H,W]` or `[C,H,W]`.
    pub fn new(values: Tensor) -> Result<Self> {
        let values = match values.rank() {
            2 => {
                let (h, w) = (values.shape()[0], values.shape()[1]);
                values.reshape(&[1, h, w])?
            }
            3 => values,
            _ => {
                return Err(domain(format!(
                    "confidence map must be [H,W] or [C,H,W], got {:?}",
                    values.shape()
                )))
            }
        };
        check_unit_range(&values, "confidence map")?;
        Ok(Self { values })
    }

    /// Values as `[1,H,W]` or `[C,H,W]`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

fn to_single_plane(values: Tensor, what: &str) -> Result<Tensor> {
    match *values.shape() {
        [_, _] => Ok(values),
        [1, h, w] => values.reshape(&[h, w]),
        ref s => Err(domain(format!("{what} must be [H,W] or [1,H,W], got {s:?}"))),
    }
}

fn check_unit_range(values: &Tensor, what: &str) -> Result<()> {
    if let Some(i) = values
        .data()
        .iter()
        .position(|v| !(0.0..=1.0).contains(v))
    {
        return Err(domain(format!(
            "{what} value {} at flat index {i} is outside [0, 1]",
            values.data()[i]
        )));
    }
    Ok(())
}

/// Flow that samples every pixel from itself.
pub fn identity_flow(height: usize, width: usize) -> Result<FlowField> {
    let g = make_grid(height, width)?;
    Ok(FlowField {
        height,
        width,
        coords: g.coords,
    })
}

pub fn coarse_flow_affine(t: &Affine2D, height: usize, width: usize) -> Result<FlowField> {
    let g = make_grid(height, width)?;
    FlowField::new(height, width, g.coords.iter().map(|&p| t.apply(p)).collect())
}

pub fn coarse_flow_tps(t: &TPSTransform, height: usize, width: usize) -> Result<FlowField> {
    let g = make_grid(height, width)?;
    FlowField::new(height, width, g.coords.iter().map(|&p| tps_eval(t, p)).collect())
}

pub fn coarse_flow(t: &Transform, height: usize, width: usize) -> Result<FlowField> {
    match t {
        Transform::Affine(a) => coarse_flow_affine(a, height, width),
        Transform::Tps(t) => coarse_flow_tps(t, height, width),
    }
}

/// `(1 - M) ∘ O_I + M ∘ O_T`, per pixel and per coordinate.
pub fn compose_flow(m: &MotionMask, o_i: &FlowField, o_t: &FlowField) -> Result<FlowField> {
    o_i.check_same_extent(o_t)?;
    if m.extent() != (o_i.height, o_i.width) {
        return Err(domain(format!(
            "mask extent {:?} does not match flow {}x{}",
            m.extent(),
            o_i.height,
            o_i.width
        )));
    }
    let coords = m
        .values
        .data()
        .iter()
        .zip(o_i.coords.iter().zip(&o_t.coords))
        .map(|(&w, (a, b))| [blend(w, a[0], b[0]), blend(w, a[1], b[1])])
        .collect();
    Ok(FlowField {
        height: o_i.height,
        width: o_i.width,
        coords,
    })
}

#[inline]
fn blend(w: f64, a: f64, b: f64) -> f64 {
    // Rounding can land one ulp outside [a, b]; pin it back.
    let v = (1.0 - w) * a + w * b;
    v.clamp(a.min(b), a.max(b))
}

/// Backward-warps `[C,H,W]` features by a flow of the same spatial extent.
pub fn warp_features(f: &Tensor, o: &FlowField) -> Result<Tensor> {
    let (_, h, w) = f.dims3()?;
    if (h, w) != (o.height, o.width) {
        return Err(domain(format!(
            "feature extent {h}x{w} does not match flow {}x{}",
            o.height, o.width
        )));
    }
    bilinear_sample(f, o)
}

/// Hadamard product `C ∘ F_A`, broadcasting a single-channel map.
pub fn apply_confidence(c: &ConfidenceMap, f_a: &Tensor) -> Result<Tensor> {
    let (fc, h, w) = f_a.dims3()?;
    let (cc, ch, cw) = c.values.dims3()?;
    if (ch, cw) != (h, w) || (cc != 1 && cc != fc) {
        return Err(domain(format!(
            "confidence {:?} cannot broadcast onto features {:?}",
            c.values.shape(),
            f_a.shape()
        )));
    }
    let plane = h * w;
    let cv = c.values.data();
    let mut out = f_a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ci = if cc == 1 { i % plane } else { i };
        *v *= cv[ci];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tps_fit, KeypointSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FlowField {
        FlowField::new(
            h,
            w,
            (0..h * w)
                .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_flow_conventions() {
        assert_eq!(identity_flow(3, 3).unwrap().coords[4], [0.0, 0.0]);
        let f = identity_flow(2, 2).unwrap();
        assert_eq!(f.coords, vec![[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(&[3, 7, 9], |_| rng.gen());
        assert_eq!(warp_features(&t, &identity_flow(7, 9).unwrap()).unwrap(), t);
    }

    #[test]
    fn coarse_affine_flows() {
        for &(h, w) in &[(1, 1), (8, 8), (17, 5), (64, 64)] {
            assert_eq!(
                coarse_flow_affine(&Affine2D::IDENTITY, h, w).unwrap(),
                identity_flow(h, w).unwrap()
            );
        }
        let f = coarse_flow_affine(&Affine2D::translation(0.5, 0.0), 4, 4).unwrap();
        for (a, b) in f.coords.iter().zip(identity_flow(4, 4).unwrap().coords) {
            assert_eq!(*a, [b[0] + 0.5, b[1]]);
        }
        let rot = Affine2D::new([[0.0, -1.0], [1.0, 0.0]], [0.0, 0.0]);
        let f = coarse_flow_affine(&rot, 3, 3).unwrap();
        // pixel (row 1, col 2) sits at (1, 0)
        assert_eq!(f.coords[5], [0.0, 1.0]);
    }

    #[test]
    fn coarse_tps_flows() {
        let anchors = KeypointSet::new(vec![[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let id = TPSTransform::from_affine(anchors.clone(), &Affine2D::IDENTITY);
        assert_eq!(coarse_flow_tps(&id, 5, 5).unwrap(), identity_flow(5, 5).unwrap());

        let src = KeypointSet::new(vec![[-0.9, -1.0], [1.0, -0.8], [0.1, 0.9], [0.05, -0.1]]).unwrap();
        let t = tps_fit(&anchors, &src, 0.0).unwrap();
        let f = coarse_flow_tps(&t, 5, 5).unwrap();
        // anchors all sit on the 5x5 lattice
        for (pd, ps) in [(0usize, 0usize), (4, 1), (22, 2), (12, 3)] {
            let c = f.coords[pd];
            assert!((c[0] - src.points()[ps][0]).abs() < 1e-8);
            assert!((c[1] - src.points()[ps][1]).abs() < 1e-8);
        }
        let grid = make_grid(5, 5).unwrap();
        for (c, p) in f.coords.iter().zip(&grid.coords) {
            let e = tps_eval(&t, *p);
            assert!((c[0] - e[0]).abs() < 1e-12 && (c[1] - e[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let oi = identity_flow(6, 5).unwrap();
        let ot = random_flow(&mut rng, 6, 5);
        assert_eq!(compose_flow(&MotionMask::constant(6, 5, 0.0).unwrap(), &oi, &ot).unwrap(), oi);
        assert_eq!(compose_flow(&MotionMask::constant(6, 5, 1.0).unwrap(), &oi, &ot).unwrap(), ot);
        let mid = compose_flow(&MotionMask::constant(6, 5, 0.5).unwrap(), &oi, &ot).unwrap();
        for ((m, a), b) in mid.coords.iter().zip(&oi.coords).zip(&ot.coords) {
            for k in 0..2 {
                assert!((m[k] - 0.5 * (a[k] + b[k])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compose_rejects_mismatch() {
        let oi = identity_flow(4, 4).unwrap();
        let ot = identity_flow(4, 5).unwrap();
        assert!(compose_flow(&MotionMask::constant(4, 4, 0.5).unwrap(), &oi, &ot).is_err());
        assert!(compose_flow(&MotionMask::constant(3, 4, 0.5).unwrap(), &oi, &oi).is_err());
    }

    #[test]
    fn masks_reject_out_of_range() {
        assert!(MotionMask::constant(2, 2, 1.0 + 1e-12).is_err());
        assert!(MotionMask::constant(2, 2, -1e-12).is_err());
        assert!(ConfidenceMap::new(Tensor::full(&[1, 2, 2], 1.5)).is_err());
        assert!(ConfidenceMap::new(Tensor::full(&[2, 2], f64::NAN)).is_err());
    }

    #[test]
    fn confidence_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn(&[4, 3, 5], |_| rng.gen_range(-2.0..2.0));
        let ones = ConfidenceMap::new(Tensor::full(&[3, 5], 1.0)).unwrap();
        assert_eq!(apply_confidence(&ones, &f).unwrap(), f);
        let zeros = ConfidenceMap::new(Tensor::full(&[3, 5], 0.0)).unwrap();
        assert!(apply_confidence(&zeros, &f).unwrap().data().iter().all(|v| *v == 0.0));
        let c = ConfidenceMap::new(Tensor::from_fn(&[3, 5], |_| rng.gen())).unwrap();
        let e = apply_confidence(&c, &f).unwrap();
        for i in 0..4 {
            for y in 0..3 {
                for x in 0..5 {
                    let idx = (i * 3 + y) * 5 + x;
                    assert_eq!(e.data()[idx], c.values().data()[y * 5 + x] * f.data()[idx]);
                }
            }
        }
        let full = ConfidenceMap::new(Tensor::from_fn(&[4, 3, 5], |_| rng.gen())).unwrap();
        let e = apply_confidence(&full, &f).unwrap();
        for i in 0..f.len() {
            assert_eq!(e.data()[i], full.values().data()[i] * f.data()[i]);
        }
        let bad = ConfidenceMap::new(Tensor::full(&[2, 3, 5], 1.0)).unwrap();
        assert!(apply_confidence(&bad, &f).is_err());
    }

    #[test]
    fn warp_rejects_extent_mismatch() {
        let t = Tensor::zeros(&[2, 4, 4]);
        assert!(warp_features(&t, &identity_flow(4, 5).unwrap()).is_err());
    }

    #[test]
    fn dflw_container() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_flow(&mut rng, 3, 4);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"DFLW");
        assert_eq!(bytes.len(), 12 + 16 * 12);
        assert_eq!(bytes[4..8], 3u32.to_le_bytes());
        assert_eq!(FlowField::from_bytes(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FlowField::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));
        assert!(FlowField::from_bytes(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn composition_is_convex(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let oi = random_flow(&mut rng, 5, 6);
            let ot = random_flow(&mut rng, 5, 6);
            let m = MotionMask::new(Tensor::from_fn(&[5, 6], |_| rng.gen())).unwrap();
            let op = compose_flow(&m, &oi, &ot).unwrap();
            for ((p, a), b) in op.coords.iter().zip(&oi.coords).zip(&ot.coords) {
                for k in 0..2 {
                    prop_assert!(p[k] >= a[k].min(b[k]) && p[k] <= a[k].max(b[k]));
                }
            }
        }

        #[test]
        fn confidence_is_linear(seed in 0u64..500, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ConfidenceMap::new(Tensor::from_fn(&[3, 4], |_| rng.gen())).unwrap();
            let f = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
            let g = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
            let mut mix = f.clone();
            mix.add_scaled(a, &g).unwrap();
            let lhs = apply_confidence(&c, &mix).unwrap();
            let mut rhs = apply_confidence(&c, &f).unwrap();
            rhs.add_scaled(a, &apply_confidence(&c, &g).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
