//! Pointwise nonlinearities and the fixed 2x bilinear upsampler.

use crate::error::Result;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of [`leaky_relu`] given its *input*.
pub fn leaky_relu_vjp(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.check_same_shape(upstream)?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v >= 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its *output*.
pub fn sigmoid_vjp(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.check_same_shape(upstream)?;
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Source taps for one output index of a half-pixel 2x upsample.
#[derive(Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn upsample_taps(n_in: usize) -> Vec<Taps> {
    (0..2 * n_in)
        .map(|o| {
            let u = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Taps {
                lo,
                hi,
                frac: u - lo as f64,
            }
        })
        .collect()
}

/// Doubles the spatial extent of `[C,H,W]` with bilinear interpolation
/// (half-pixel centers, edge-clamped).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * p[a.lo * w + b.lo] + b.frac * p[a.lo * w + b.hi];
                let bot = (1.0 - b.frac) * p[a.hi * w + b.lo] + b.frac * p[a.hi * w + b.hi];
                o[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`upsample2x`]; `upstream` is `[C,2H,2W]`.
pub fn upsample2x_vjp(upstream: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = upstream.dims3()?;
    let (h, w) = (oh / 2, ow / 2);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let up = upstream.data();
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        let u = &up[ch * oh * ow..(ch + 1) * oh * ow];
        let p = &mut g[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = u[oy * ow + ox];
                p[a.lo * w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
                p[a.lo * w + b.hi] += v * (1.0 - a.frac) * b.frac;
                p[a.hi * w + b.lo] += v * a.frac * (1.0 - b.frac);
                p[a.hi * w + b.hi] += v * a.frac * b.frac;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w) in &[(1, 1), (2, 3), (4, 4), (8, 5)] {
            let x = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.0..1.0));
            let y = Tensor::from_fn(&[2, 2 * h, 2 * w], |_| rng.gen_range(-1.0..1.0));
            let lhs = dot(&upsample2x(&x).unwrap(), &y);
            let rhs = dot(&x, &upsample2x_vjp(&y).unwrap());
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::full(&[1, 3, 4], 0.7);
        for v in upsample2x(&x).unwrap().data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn activations_and_gradients() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x).data(), &[-0.4, 0.0, 0.5, 3.0]);
        let g = leaky_relu_vjp(&x, &Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.2, 1.0, 1.0, 1.0]);
        let y = sigmoid(&x);
        assert!((y.data()[2] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
        let gs = sigmoid_vjp(&y, &Tensor::full(&[4], 1.0)).unwrap();
        let h = 1e-6;
        let fd = (sigmoid_scalar(3.0 + h) - sigmoid_scalar(3.0 - h)) / (2.0 * h);
        assert!((gs.data()[3] - fd).abs() < 1e-9);
    }
}
