//! Modulated convolution: per-input-channel scaling of the kernel followed by
//! per-output-channel demodulation,
//!
//! ```text
//! w'[j,i,k] = s_i · w[j,i,k] / sqrt( Σ_{i,k} (s_i · w[j,i,k])² + eps )
//! ```
//!
//! together with the plain convolution, nonlinearity and resampling blocks
//! the generator is built from. Every differentiable operation here ships an
//! exact vector-Jacobian product.

pub mod conv;
pub mod ops;

pub use conv::{conv2d, conv2d_vjp};
pub use ops::{leaky_relu, leaky_relu_vjp, LEAKY_SLOPE, sigmoid, sigmoid_vjp, upsample2x, upsample2x_vjp};

use crate::error::{domain, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOD_EPS: f64 = 1e-8;

/// Convolution weights `[outC, inC, kH, kW]` (odd kernel extents) and an
/// optional `[outC]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out_c, kh, kw) = match *weights.shape() {
            [o, _, kh, kw] => (o, kh, kw),
            ref s => return Err(domain(format!("kernel must be [outC,inC,kH,kW], got {s:?}"))),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(domain(format!("kernel extent {kh}x{kw} must be odd")));
        }
        if !weights.all_finite() {
            return Err(domain("kernel weights must be finite"));
        }
        if let Some(b) = &bias {
            if b.shape() != [out_c] {
                return Err(domain(format!("bias must be [{out_c}], got {:?}", b.shape())));
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn fan(&self) -> usize {
        self.weights.len() / self.out_channels().max(1)
    }
}

/// Strictly positive per-input-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    scales: Tensor,
}

impl ScaleVector {
    pub fn new(scales: Tensor) -> Result<Self> {
        if scales.rank() != 1 {
            return Err(domain(format!("scales must be 1-D, got {:?}", scales.shape())));
        }
        if let Some(i) = scales.data().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(domain(format!(
                "scale {i} = {} is not strictly positive and finite",
                scales.data()[i]
            )));
        }
        Ok(Self { scales })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            scales: Tensor::full(&[n], 1.0),
        }
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Expression code driving the modulation (audio and eye features
/// concatenated, here a plain vector).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionFeature {
    vector: Tensor,
}

impl ExpressionFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Ok(Self {
            vector: Tensor::from_vec(&[n], values)?,
        })
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn check_scales(k: &ConvKernel, s: &ScaleVector, eps: f64) -> Result<()> {
    if s.len() != k.in_channels() {
        return Err(domain(format!(
            "{} scales for a kernel with {} input channels",
            s.len(),
            k.in_channels()
        )));
    }
    if !(eps >= 0.0) {
        return Err(domain(format!("eps must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Per-output-channel norms `sqrt(Σ (s_i w)² + eps)` and the scaled weights.
fn scaled_and_norms(k: &ConvKernel, s: &ScaleVector) -> (Vec<f64>, usize) {
    let in_c = k.in_channels();
    let spatial = k.fan() / in_c.max(1);
    let sv = s.scales.data();
    let scaled = k
        .weights
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &w)| sv[(idx / spatial) % in_c] * w)
        .collect();
    (scaled, spatial)
}

/// Applies the modulation/demodulation to `k`; the bias is carried over.
pub fn modulate_weights(k: &ConvKernel, s: &ScaleVector, eps: f64) -> Result<ConvKernel> {
    check_scales(k, s, eps)?;
    let (mut scaled, _) = scaled_and_norms(k, s);
    let fan = k.fan();
    for (j, row) in scaled.chunks_exact_mut(fan).enumerate() {
        let sq: f64 = row.iter().map(|v| v * v).sum();
        let norm = (sq + eps).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "output channel {j} has zero norm; demodulation needs eps > 0"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    ConvKernel::new(Tensor::from_vec(k.weights.shape(), scaled)?, k.bias.clone())
}

/// Same-padded stride-1 convolution with modulated weights, plus bias.
pub fn modconv_forward(x: &Tensor, k: &ConvKernel, s: &ScaleVector, eps: f64) -> Result<Tensor> {
    let m = modulate_weights(k, s, eps)?;
    conv2d(x, &m.weights, m.bias.as_ref(), 1)
}

/// Gradients of [`modconv_forward`].
#[derive(Debug, Clone)]
pub struct ModConvGrads {
    pub grad_x: Tensor,
    pub grad_weights: Tensor,
    pub grad_scales: Tensor,
    pub grad_bias: Option<Tensor>,
}

/// Exact VJP through both the convolution and the (de)modulation.
pub fn modconv_vjp(
    x: &Tensor,
    k: &ConvKernel,
    s: &ScaleVector,
    eps: f64,
    upstream: &Tensor,
) -> Result<ModConvGrads> {
    let m = modulate_weights(k, s, eps)?;
    let (gx, g_mod, gb) = conv2d_vjp(x, &m.weights, 1, upstream, true)?;
    let (grad_weights, grad_scales) = demodulation_vjp(k, s, eps, &m, &g_mod)?;
    Ok(ModConvGrads {
        grad_x: gx.expect("input gradient requested"),
        grad_weights,
        grad_scales,
        grad_bias: k.bias.as_ref().map(|_| gb),
    })
}

/// Pulls a gradient on the modulated weights back to the raw weights and
/// the scales.
fn demodulation_vjp(
    k: &ConvKernel,
    s: &ScaleVector,
    eps: f64,
    modulated: &ConvKernel,
    g_mod: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let in_c = k.in_channels();
    let fan = k.fan();
    let spatial = fan / in_c.max(1);
    let (scaled, _) = scaled_and_norms(k, s);
    let sv = s.scales.data();
    let wd = k.weights.data();
    let mut grad_w = vec![0.0; wd.len()];
    let mut grad_s = vec![0.0; in_c];
    for j in 0..k.out_channels() {
        let range = j * fan..(j + 1) * fan;
        let u = &scaled[range.clone()];
        let g = &g_mod.data()[range.clone()];
        let wp = &modulated.weights.data()[range.clone()];
        let norm = (u.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        // d w'_a / d u_b = δ_ab / n - u_a u_b / n³ ; with w' = u / n this is
        // (g_b - w'_b Σ_a g_a w'_a) / n.
        let proj: f64 = g.iter().zip(wp).map(|(a, b)| a * b).sum();
        for (off, idx) in range.enumerate() {
            let gu = (g[off] - wp[off] * proj) / norm;
            let i = (off / spatial) % in_c;
            grad_w[idx] = sv[i] * gu;
            grad_s[i] += wd[idx] * gu;
        }
    }
    Ok((
        Tensor::from_vec(k.weights.shape(), grad_w)?,
        Tensor::from_vec(&[in_c], grad_s)?,
    ))
}

/// Learned map from an expression feature to one layer's scales:
/// `s = 1 + 0.5 · tanh(W f + b)`, with `W: [inC, D]` and `b: [inC]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleAffine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl StyleAffine {
    /// Zero weights and bias, so the layer starts with `s ≡ 1`.
    pub fn zeros(channels: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[channels, dim]),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, f: &ExpressionFeature) -> Result<(usize, usize)> {
        let (c, d) = match *self.weight.shape() {
            [c, d] => (c, d),
            ref sh => return Err(domain(format!("style weight must be [C,D], got {sh:?}"))),
        };
        if self.bias.shape() != [c] {
            return Err(domain("style bias length differs from its weight rows"));
        }
        if f.dim() != d {
            return Err(domain(format!(
                "expression feature has dimension {}, layer expects {d}",
                f.dim()
            )));
        }
        Ok((c, d))
    }

    fn preactivation(&self, f: &ExpressionFeature) -> Result<Vec<f64>> {
        let (c, d) = self.check(f)?;
        let fv = f.vector.data();
        let w = self.weight.data();
        Ok((0..c)
            .map(|i| {
                let row = &w[i * d..(i + 1) * d];
                self.bias.data()[i] + row.iter().zip(fv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

pub const SCALE_SWING: f64 = 0.5;

pub fn expression_scales(f: &ExpressionFeature, layer: &StyleAffine) -> Result<ScaleVector> {
    let z = layer.preactivation(f)?;
    let n = z.len();
    ScaleVector::new(Tensor::from_vec(
        &[n],
        z.into_iter().map(|v| 1.0 + SCALE_SWING * v.tanh()).collect(),
    )?)
}

/// Gradients of [`expression_scales`] for a given upstream gradient on the
/// scales: `(grad_weight, grad_bias, grad_feature)`.
pub fn expression_scales_vjp(
    f: &ExpressionFeature,
    layer: &StyleAffine,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let z = layer.preactivation(f)?;
    let (c, d) = layer.check(f)?;
    if upstream.shape() != [c] {
        return Err(domain("scale upstream length mismatch"));
    }
    let fv = f.vector.data();
    let mut gw = vec![0.0; c * d];
    let mut gf = vec![0.0; d];
    let gz: Vec<f64> = z
        .iter()
        .zip(upstream.data())
        .map(|(&zi, &g)| {
            let t = zi.tanh();
            g * SCALE_SWING * (1.0 - t * t)
        })
        .collect();
    for i in 0..c {
        for k in 0..d {
            gw[i * d + k] = gz[i] * fv[k];
            gf[k] += gz[i] * layer.weight.data()[i * d + k];
        }
    }
    Ok((
        Tensor::from_vec(&[c, d], gw)?,
        Tensor::from_vec(&[c], gz)?,
        Tensor::from_vec(&[d], gf)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> ConvKernel {
        ConvKernel::new(
            Tensor::from_fn(&[o, i, k, k], |_| rng.gen_range(-1.0..1.0)),
            Some(Tensor::from_fn(&[o], |_| rng.gen_range(-0.5..0.5))),
        )
        .unwrap()
    }

    fn random_scales(rng: &mut ChaCha8Rng, n: usize) -> ScaleVector {
        ScaleVector::new(Tensor::from_fn(&[n], |_| rng.gen_range(0.3..2.0))).unwrap()
    }

    #[test]
    fn unit_scales_normalize_each_output_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(&mut rng, 4, 3, 3);
        let m = modulate_weights(&k, &ScaleVector::ones(3), 1e-300).unwrap();
        for row in m.weights().data().chunks_exact(27) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_kernel() {
        let k = ConvKernel::new(Tensor::full(&[1, 1, 1, 1], 3.0), None).unwrap();
        let s = ScaleVector::new(Tensor::full(&[1], 2.0)).unwrap();
        let m = modulate_weights(&k, &s, 0.0).unwrap();
        assert_eq!(m.weights().data(), &[1.0]);
    }

    #[test]
    fn zero_norm_without_eps_is_numeric_error() {
        let k = ConvKernel::new(Tensor::zeros(&[1, 1, 1, 1]), None).unwrap();
        assert!(matches!(
            modulate_weights(&k, &ScaleVector::ones(1), 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(ConvKernel::new(Tensor::zeros(&[1, 1, 2, 3]), None).is_err());
        assert!(ScaleVector::new(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_kernel(&mut rng, 2, 3, 3);
        assert!(modulate_weights(&k, &ScaleVector::ones(2), 1e-8).is_err());
        assert!(modulate_weights(&k, &ScaleVector::ones(3), -1.0).is_err());
    }

    #[test]
    fn pointwise_forward_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 2, 3, 1);
        let s = random_scales(&mut rng, 3);
        let x = Tensor::from_fn(&[3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let y = modconv_forward(&x, &k, &s, 1e-8).unwrap();
        let w = k.weights().data();
        let sv = s.as_tensor().data();
        for j in 0..2 {
            let norm = ((0..3).map(|i| (sv[i] * w[j * 3 + i]).powi(2)).sum::<f64>() + 1e-8).sqrt();
            for p in 0..4 {
                let mut acc = k.bias().unwrap().data()[j];
                for i in 0..3 {
                    acc += sv[i] * w[j * 3 + i] / norm * x.data()[i * 4 + p];
                }
                assert!((y.data()[j * 4 + p] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_kernel(&mut rng, 3, 2, 3);
        let y = modconv_forward(&Tensor::zeros(&[2, 4, 5]), &k, &random_scales(&mut rng, 2), 1e-8).unwrap();
        for (j, plane) in y.data().chunks_exact(20).enumerate() {
            assert!(plane.iter().all(|&v| v == k.bias().unwrap().data()[j]));
        }
    }

    #[test]
    fn unit_scales_reduce_to_normalized_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_kernel(&mut rng, 3, 4, 3);
        let x = Tensor::from_fn(&[4, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let eps = 1e-8;
        let mut w = k.weights().clone();
        for row in w.data_mut().chunks_exact_mut(36) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let plain = conv2d(&x, &w, k.bias(), 1).unwrap();
        let modded = modconv_forward(&x, &k, &ScaleVector::ones(4), eps).unwrap();
        for (a, b) in plain.data().iter().zip(modded.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_kernel(&mut rng, 2, 3, 3);
        let s = random_scales(&mut rng, 3);
        let x = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let g = modconv_vjp(&x, &k, &s, 1e-8, &Tensor::zeros(&[2, 4, 4])).unwrap();
        for t in [&g.grad_x, &g.grad_weights, &g.grad_scales, g.grad_bias.as_ref().unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scale_gradient_is_orthogonal_to_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let k = random_kernel(&mut rng, 3, 3, 3);
            let s = random_scales(&mut rng, 3);
            let x = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let up = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let g = modconv_vjp(&x, &k, &s, 0.0, &up).unwrap();
            assert_eq!(g.grad_scales.len(), 3);
            let dot: f64 = g.grad_scales.data().iter().zip(s.as_tensor().data()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10, "{dot}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = random_kernel(&mut rng, 3, 3, 3);
        let s = random_scales(&mut rng, 3);
        let x = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let up = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let eps = 1e-8;
        let obj = |x: &Tensor, k: &ConvKernel, s: &ScaleVector| -> f64 {
            let y = modconv_forward(x, k, s, eps).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let g = modconv_vjp(&x, &k, &s, eps, &up).unwrap();
        let h = 1e-4;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in 0..k.weights().len() {
            let mut wp = k.weights().clone();
            wp.data_mut()[i] += h;
            let mut wm = k.weights().clone();
            wm.data_mut()[i] -= h;
            let kp = ConvKernel::new(wp, k.bias().cloned()).unwrap();
            let km = ConvKernel::new(wm, k.bias().cloned()).unwrap();
            let fd = (obj(&x, &kp, &s) - obj(&x, &km, &s)) / (2.0 * h);
            assert!(rel(fd, g.grad_weights.data()[i]) < 1e-5, "w{i}");
        }
        for i in 0..3 {
            let mut sp = s.as_tensor().clone();
            sp.data_mut()[i] += h;
            let mut sm = s.as_tensor().clone();
            sm.data_mut()[i] -= h;
            let fd = (obj(&x, &k, &ScaleVector::new(sp).unwrap()) - obj(&x, &k, &ScaleVector::new(sm).unwrap())) / (2.0 * h);
            assert!(rel(fd, g.grad_scales.data()[i]) < 1e-5, "s{i}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&xp, &k, &s) - obj(&xm, &k, &s)) / (2.0 * h);
            assert!(rel(fd, g.grad_x.data()[i]) < 1e-5, "x{i}");
        }
    }

    #[test]
    fn expression_scales_contract() {
        let f = ExpressionFeature::new(vec![0.0; 16]).unwrap();
        let s = expression_scales(&f, &StyleAffine::zeros(8, 16)).unwrap();
        assert!(s.as_tensor().data().iter().all(|&v| v == 1.0));
        assert!(expression_scales(&f, &StyleAffine::zeros(8, 15)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = StyleAffine {
            weight: Tensor::from_fn(&[5, 16], |_| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0)),
        };
        let f = ExpressionFeature::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = expression_scales(&f, &layer).unwrap();
        let b = expression_scales(&f, &layer).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.as_tensor().data().iter().all(|&v| v > 0.5 && v < 1.5));

        let up = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let (gw, gb, gf) = expression_scales_vjp(&f, &layer, &up).unwrap();
        let obj = |l: &StyleAffine, f: &ExpressionFeature| -> f64 {
            let s = expression_scales(f, l).unwrap();
            s.as_tensor().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..gw.len() {
            let mut p = layer.clone();
            p.weight.data_mut()[i] += h;
            let mut m = layer.clone();
            m.weight.data_mut()[i] -= h;
            assert!(((obj(&p, &f) - obj(&m, &f)) / (2.0 * h) - gw.data()[i]).abs() < 1e-8);
        }
        for i in 0..5 {
            let mut p = layer.clone();
            p.bias.data_mut()[i] += h;
            let mut m = layer.clone();
            m.bias.data_mut()[i] -= h;
            assert!(((obj(&p, &f) - obj(&m, &f)) / (2.0 * h) - gb.data()[i]).abs() < 1e-8);
        }
        for i in 0..16 {
            let mut fp = f.as_tensor().data().to_vec();
            fp[i] += h;
            let mut fm = f.as_tensor().data().to_vec();
            fm[i] -= h;
            let fd = (obj(&layer, &ExpressionFeature::new(fp).unwrap()) - obj(&layer, &ExpressionFeature::new(fm).unwrap())) / (2.0 * h);
            assert!((fd - gf.data()[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn demodulated_norm_at_most_one(seed in 0u64..300, eps in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_kernel(&mut rng, 3, 2, 3);
            let s = random_scales(&mut rng, 2);
            let m = modulate_weights(&k, &s, eps).unwrap();
            for row in m.weights().data().chunks_exact(18) {
                let n: f64 = row.iter().map(|v| v * v).sum();
                prop_assert!(n <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn forward_is_scale_invariant_without_eps(seed in 0u64..300, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_kernel(&mut rng, 3, 3, 3);
            let s = random_scales(&mut rng, 3);
            let cs = ScaleVector::new(s.as_tensor().map(|v| c * v)).unwrap();
            let x = Tensor::from_fn(&[3, 5, 4], |_| rng.gen_range(-1.0..1.0));
            let a = modconv_forward(&x, &k, &s, 0.0).unwrap();
            let b = modconv_forward(&x, &k, &cs, 0.0).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_linear_in_input(seed in 0u64..300, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = ConvKernel::new(Tensor::from_fn(&[2, 3, 3, 3], |_| rng.gen_range(-1.0..1.0)), None).unwrap();
            let s = random_scales(&mut rng, 3);
            let x1 = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let x2 = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let mut mix = x1.clone();
            mix.add_scaled(a, &x2).unwrap();
            let lhs = modconv_forward(&mix, &k, &s, 1e-8).unwrap();
            let mut rhs = modconv_forward(&x1, &k, &s, 1e-8).unwrap();
            rhs.add_scaled(a, &modconv_forward(&x2, &k, &s, 1e-8).unwrap()).unwrap();
            for (u, v) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
