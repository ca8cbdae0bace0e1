//! Dense row-major tensors, the normalized coordinate lattice and the
//! bilinear sampler (with its vector-Jacobian product).
//!
//! Coordinates follow the align-corners convention: pixel `0` sits at `-1`
//! and pixel `n - 1` at `+1`. Samples that fall outside `[-1, 1]` are clamped
//! to the border.

use crate::error::{domain, Result};
use crate::flow::FlowField;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Wraps `data` with the given shape. Fails if the lengths disagree or any
    /// element is non-finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(domain(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(domain(format!("non-finite element at flat index {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Returns `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(domain(format!(
                "expected a [C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(domain(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(domain(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `[start, start + count)` out of a `[C,H,W]` tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if start + count > c {
            return Err(domain(format!(
                "channel range {start}..{} exceeds {c} channels",
                start + count
            )));
        }
        let plane = h * w;
        Ok(Tensor {
            shape: vec![count, h, w],
            data: self.data[start * plane..(start + count) * plane].to_vec(),
        })
    }

    /// Stacks `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| domain("concat of zero tensors"))?;
        let (_, h, w) = first.dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(domain(format!(
                    "concat spatial mismatch: {h}x{w} vs {ph}x{pw}"
                )));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![channels, h, w],
            data,
        })
    }
}

/// Normalized coordinate of pixel index `i` along an axis of `extent` pixels.
#[inline]
pub fn pixel_to_norm(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        return 0.0;
    }
    let span = (extent - 1) as f64;
    (2.0 * i as f64 - span) / span
}

/// Lattice of normalized `(x, y)` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

impl Grid2D {
    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        self.coords[y * self.width + x]
    }
}

pub fn make_grid(height: usize, width: usize) -> Result<Grid2D> {
    if height == 0 || width == 0 {
        return Err(domain(format!("grid extent must be >= 1, got {height}x{width}")));
    }
    let mut coords = Vec::with_capacity(height * width);
    for y in 0..height {
        let ny = pixel_to_norm(y, height);
        for x in 0..width {
            coords.push([pixel_to_norm(x, width), ny]);
        }
    }
    Ok(Grid2D {
        height,
        width,
        coords,
    })
}

/// One axis of a bilinear tap: the two neighbouring indices, the fractional
/// weight of the upper one, and d(pixel)/d(normalized) (zero when clamped).
#[derive(Debug, Clone, Copy)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
    dpix: f64,
}

// Pixel positions this close to an integer are snapped onto it so that
// lattice coordinates reproduce pixel values exactly.
const SNAP: f64 = 1e-10;

fn axis_tap(coord: f64, extent: usize) -> AxisTap {
    if extent == 1 {
        return AxisTap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            dpix: 0.0,
        };
    }
    let last = (extent - 1) as f64;
    let scale = 0.5 * last;
    let mut u = (coord + 1.0) * scale;
    let mut dpix = scale;
    if u < 0.0 {
        u = 0.0;
        dpix = 0.0;
    } else if u > last {
        u = last;
        dpix = 0.0;
    }
    let r = u.round();
    if (u - r).abs() < SNAP {
        u = r;
    }
    let lo = (u.floor() as usize).min(extent - 2);
    AxisTap {
        lo,
        hi: lo + 1,
        frac: u - lo as f64,
        dpix,
    }
}

fn check_sample_input(input: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if c == 0 || h == 0 || w == 0 {
        return Err(domain(format!("cannot sample an empty tensor {:?}", input.shape())));
    }
    Ok((c, h, w))
}

/// Samples a `[C,H,W]` tensor at every coordinate of `coords`, producing
/// `[C,H',W']` where `H' x W'` is the flow's extent.
pub fn bilinear_sample(input: &Tensor, coords: &FlowField) -> Result<Tensor> {
    let (c, h, w) = check_sample_input(input)?;
    let (oh, ow) = (coords.height, coords.width);
    if coords.coords.len() != oh * ow {
        return Err(domain("flow coordinate count does not match its extent"));
    }
    let plane = h * w;
    let oplane = oh * ow;
    let src = input.data();
    let mut out = vec![0.0; c * oplane];
    for (p, &[cx, cy]) in coords.coords.iter().enumerate() {
        let tx = axis_tap(cx, w);
        let ty = axis_tap(cy, h);
        let (i00, i01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
        let (i10, i11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
        for ch in 0..c {
            let base = ch * plane;
            let row0 = (1.0 - tx.frac) * tap(src, base, i00) + tx.frac * tap(src, base, i01);
            let row1 = (1.0 - tx.frac) * tap(src, base, i10) + tx.frac * tap(src, base, i11);
            out[ch * oplane + p] = (1.0 - ty.frac) * row0 + ty.frac * row1;
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

// Degenerate axes (extent 1) report `hi == lo`; reads stay in bounds.
#[inline]
fn tap(src: &[f64], base: usize, idx: usize) -> f64 {
    src[base + idx]
}

/// Vector-Jacobian product of [`bilinear_sample`] with respect to the input
/// tensor and the sampling coordinates.
pub fn bilinear_sample_vjp(
    input: &Tensor,
    coords: &FlowField,
    upstream: &Tensor,
) -> Result<(Tensor, FlowField)> {
    let (c, h, w) = check_sample_input(input)?;
    let (oh, ow) = (coords.height, coords.width);
    if upstream.shape() != [c, oh, ow] {
        return Err(domain(format!(
            "upstream shape {:?} does not match forward output [{c}, {oh}, {ow}]",
            upstream.shape()
        )));
    }
    let plane = h * w;
    let oplane = oh * ow;
    let src = input.data();
    let up = upstream.data();
    let mut grad_in = vec![0.0; c * plane];
    let mut grad_coords = vec![[0.0; 2]; oplane];
    for (p, &[cx, cy]) in coords.coords.iter().enumerate() {
        let tx = axis_tap(cx, w);
        let ty = axis_tap(cy, h);
        let (i00, i01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
        let (i10, i11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
        let (wx0, wx1) = (1.0 - tx.frac, tx.frac);
        let (wy0, wy1) = (1.0 - ty.frac, ty.frac);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..c {
            let g = up[ch * oplane + p];
            if g == 0.0 {
                continue;
            }
            let base = ch * plane;
            grad_in[base + i00] += g * wy0 * wx0;
            grad_in[base + i01] += g * wy0 * wx1;
            grad_in[base + i10] += g * wy1 * wx0;
            grad_in[base + i11] += g * wy1 * wx1;
            let (v00, v01) = (src[base + i00], src[base + i01]);
            let (v10, v11) = (src[base + i10], src[base + i11]);
            gx += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
            gy += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
        }
        grad_coords[p] = [gx * tx.dpix, gy * ty.dpix];
    }
    Ok((
        Tensor::from_vec(&[c, h, w], grad_in)?,
        FlowField::new(oh, ow, grad_coords)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::identity_flow;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_conventions() {
        let g = make_grid(1, 1).unwrap();
        assert_eq!(g.coords, vec![[0.0, 0.0]]);
        let g = make_grid(2, 2).unwrap();
        assert_eq!(
            g.coords,
            vec![[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]
        );
        let g = make_grid(3, 3).unwrap();
        assert_eq!(g.at(1, 1), [0.0, 0.0]);
        assert!(make_grid(0, 4).is_err());
        assert!(make_grid(4, 0).is_err());
    }

    #[test]
    fn grid_is_antisymmetric() {
        for n in 1..40 {
            for i in 0..n {
                assert_eq!(pixel_to_norm(i, n), -pixel_to_norm(n - 1 - i, n));
            }
        }
    }

    #[test]
    fn identity_sampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(1, 1), (1, 5), (4, 4), (7, 3), (64, 64), (13, 29)] {
            let t = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.0..1.0));
            let out = bilinear_sample(&t, &identity_flow(h, w).unwrap()).unwrap();
            assert_eq!(out, t, "{h}x{w}");
        }
    }

    #[test]
    fn center_of_two_by_two() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let flow = FlowField::new(1, 1, vec![[0.0, 0.0]]).unwrap();
        let out = bilinear_sample(&t, &flow).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let t = Tensor::full(&[3, 5, 6], 0.37);
        let coords: Vec<[f64; 2]> = (0..20)
            .map(|i| [-1.0 + 0.1 * i as f64, 0.9 - 0.09 * i as f64])
            .collect();
        let out = bilinear_sample(&t, &FlowField::new(4, 5, coords).unwrap()).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let flow = FlowField::new(1, 2, vec![[-5.0, -5.0], [3.0, 9.0]]).unwrap();
        let out = bilinear_sample(&t, &flow).unwrap();
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let t = Tensor::zeros(&[4, 4]);
        assert!(bilinear_sample(&t, &identity_flow(4, 4).unwrap()).is_err());
        let t = Tensor::zeros(&[1, 4, 4]);
        let up = Tensor::zeros(&[1, 3, 3]);
        assert!(bilinear_sample_vjp(&t, &identity_flow(4, 4).unwrap(), &up).is_err());
    }

    #[test]
    fn vjp_identity_grid_passes_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::from_fn(&[2, 6, 5], |_| rng.gen());
        let up = Tensor::from_fn(&[2, 6, 5], |_| rng.gen_range(-1.0..1.0));
        let (gi, _) = bilinear_sample_vjp(&t, &identity_flow(6, 5).unwrap(), &up).unwrap();
        assert_eq!(gi, up);
    }

    #[test]
    fn vjp_constant_input_has_zero_coordinate_gradient() {
        let t = Tensor::full(&[2, 5, 5], 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let flow = FlowField::new(
            3,
            3,
            (0..9)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap();
        let up = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let (_, gc) = bilinear_sample_vjp(&t, &flow, &up).unwrap();
        for c in gc.coords {
            assert_eq!(c, [0.0, 0.0]);
        }
    }

    fn sampled_dot(input: &Tensor, flow: &FlowField, up: &Tensor) -> f64 {
        let out = bilinear_sample(input, flow).unwrap();
        out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn vjp_matches_central_differences() {
        let step = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let coords: Vec<[f64; 2]> = (0..9)
            .map(|_| [rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95)])
            .collect();
        let flow = FlowField::new(3, 3, coords).unwrap();
        let up = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let (gi, gc) = bilinear_sample_vjp(&input, &flow, &up).unwrap();
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += step;
            let mut minus = input.clone();
            minus.data_mut()[i] -= step;
            let fd = (sampled_dot(&plus, &flow, &up) - sampled_dot(&minus, &flow, &up))
                / (2.0 * step);
            assert!(rel_err(fd, gi.data()[i]) < 1e-5, "input {i}");
        }
        for p in 0..flow.coords.len() {
            for axis in 0..2 {
                let mut plus = flow.clone();
                plus.coords[p][axis] += step;
                let mut minus = flow.clone();
                minus.coords[p][axis] -= step;
                let fd = (sampled_dot(&input, &plus, &up) - sampled_dot(&input, &minus, &up))
                    / (2.0 * step);
                assert!(rel_err(fd, gc.coords[p][axis]) < 1e-5, "coord {p}/{axis}");
            }
        }
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_input(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f1 = Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0));
            let f2 = Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0));
            let flow = FlowField::new(3, 4, (0..12)
                .map(|_| [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)])
                .collect()).unwrap();
            let mut mix = f1.map(|v| a * v);
            mix.add_scaled(b, &f2).unwrap();
            let lhs = bilinear_sample(&mix, &flow).unwrap();
            let s1 = bilinear_sample(&f1, &flow).unwrap();
            let s2 = bilinear_sample(&f2, &flow).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * s1.data()[i] + b * s2.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12);
            }
        }
    }
}
