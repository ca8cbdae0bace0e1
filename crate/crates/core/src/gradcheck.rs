//! Central finite-difference checks for every hand-written VJP.
//!
//! Each suite draws seeded random instances, contracts the operator output
//! with a random upstream tensor to get a scalar, and compares analytic
//! directional derivatives against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::flow::FlowField;
use crate::modconv::{
    conv2d, conv2d_vjp, expression_scales, expression_scales_vjp, modconv_forward, modconv_vjp,
    upsample2x, upsample2x_vjp, ConvKernel, ExpressionFeature, ScaleVector, StyleAffine,
};
use crate::pipeline::{loss, sample_loss_and_grad, scene_spec_for, Model, PipelineConfig, TrainingSample, Variant};
use crate::synthbench::{render_scene, MotionKind};
use crate::tensor::{bilinear_sample, bilinear_sample_vjp, pixel_to_norm, Tensor};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;
/// Tolerance of the end-to-end pipeline check.
pub const PIPELINE_THRESHOLD: f64 = 1e-4;

/// Operations that can be deliberately corrupted to exercise the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturb {
    Modconv,
    BilinearSample,
    Loss,
}

impl Perturb {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "modconv" => Some(Self::Modconv),
            "bilinear_sample" => Some(Self::BilinearSample),
            "loss" => Some(Self::Loss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Spatial extent of the operator instances.
    pub size: usize,
    pub instances: usize,
    pub step: f64,
    pub threshold: f64,
    pub include_pipeline: bool,
    pub perturb: Option<Perturb>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            size: 8,
            instances: 50,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            include_pipeline: true,
            perturb: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub worst_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let scale = fd.abs().max(an.abs());
    if scale < 1e-12 {
        (fd - an).abs()
    } else {
        (fd - an).abs() / scale
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn shifted(t: &Tensor, dir: &Tensor, h: f64) -> Tensor {
    let mut out = t.clone();
    out.add_scaled(h, dir).expect("same shape");
    out
}

/// `(f(x + h v) - f(x - h v)) / 2h`.
fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

struct Suite {
    worst: f64,
    count: usize,
}

impl Suite {
    fn new() -> Self {
        Self { worst: 0.0, count: 0 }
    }
    fn record(&mut self, fd: f64, an: f64) {
        self.worst = self.worst.max(rel_err(fd, an));
    }
    fn done(self, op: &str, threshold: f64) -> OpReport {
        OpReport {
            op: op.to_string(),
            instances: self.count,
            worst_rel_error: self.worst,
            threshold,
            passed: self.worst < threshold,
        }
    }
}

fn check_conv(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for i in 0..o.instances {
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][i % 3];
        let stride = 1 + i % 2;
        let x = randn(rng, &[ci, o.size, o.size]);
        let w = randn(rng, &[co, ci, k, k]);
        let b = randn(rng, &[co]);
        let y = conv2d(&x, &w, Some(&b), stride)?;
        let up = randn(rng, y.shape());
        let (gx, gw, gb) = conv2d_vjp(&x, &w, stride, &up, true)?;
        let gx = gx.expect("requested");
        let (dx, dw, db) = (randn(rng, x.shape()), randn(rng, w.shape()), randn(rng, b.shape()));
        let fd = central(o.step, |h| {
            Ok(dot(&up, &conv2d(&shifted(&x, &dx, h), &shifted(&w, &dw, h), Some(&shifted(&b, &db, h)), stride)?))
        })?;
        s.record(fd, dot(&gx, &dx) + dot(&gw, &dw) + dot(&gb, &db));
        s.count += 1;
    }
    Ok(s.done("conv2d", o.threshold))
}

fn check_modconv(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for i in 0..o.instances {
        let (ci, co) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let k = [1, 3][i % 2];
        let eps = [1e-8, 1e-3][i % 2];
        let x = randn(rng, &[ci, o.size, o.size]);
        let w = randn(rng, &[co, ci, k, k]);
        let b = randn(rng, &[co]);
        let sv = Tensor::from_fn(&[ci], |_| rng.gen_range(0.5..1.5));
        let kern = ConvKernel::new(w.clone(), Some(b.clone()))?;
        let sc = ScaleVector::new(sv.clone())?;
        let y = modconv_forward(&x, &kern, &sc, eps)?;
        let up = randn(rng, y.shape());
        let g = modconv_vjp(&x, &kern, &sc, eps, &up)?;
        let (dx, dw, db) = (randn(rng, x.shape()), randn(rng, w.shape()), randn(rng, b.shape()));
        let ds = Tensor::from_fn(&[ci], |_| rng.gen_range(-0.3..0.3));
        let fd = central(o.step, |h| {
            let k2 = ConvKernel::new(shifted(&w, &dw, h), Some(shifted(&b, &db, h)))?;
            let s2 = ScaleVector::new(shifted(&sv, &ds, h))?;
            Ok(dot(&up, &modconv_forward(&shifted(&x, &dx, h), &k2, &s2, eps)?))
        })?;
        let mut an = dot(&g.grad_x, &dx)
            + dot(&g.grad_weights, &dw)
            + dot(&g.grad_scales, &ds)
            + dot(g.grad_bias.as_ref().expect("bias present"), &db);
        if o.perturb == Some(Perturb::Modconv) {
            an *= 1.0 + 1e-3;
        }
        s.record(fd, an);
        s.count += 1;
    }
    Ok(s.done("modconv", o.threshold))
}

fn check_expression_scales(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for _ in 0..o.instances {
        let (c, d) = (rng.gen_range(1..6), rng.gen_range(1..8));
        let layer = StyleAffine {
            weight: randn(rng, &[c, d]),
            bias: randn(rng, &[c]),
        };
        let f = randn(rng, &[d]);
        let up = randn(rng, &[c]);
        let fe = ExpressionFeature::new(f.data().to_vec())?;
        let (gw, gb, gf) = expression_scales_vjp(&fe, &layer, &up)?;
        let (dw, db, df) = (randn(rng, &[c, d]), randn(rng, &[c]), randn(rng, &[d]));
        let fd = central(o.step, |h| {
            let l2 = StyleAffine {
                weight: shifted(&layer.weight, &dw, h),
                bias: shifted(&layer.bias, &db, h),
            };
            let f2 = ExpressionFeature::new(shifted(&f, &df, h).into_vec())?;
            Ok(dot(&up, expression_scales(&f2, &l2)?.as_tensor()))
        })?;
        s.record(fd, dot(&gw, &dw) + dot(&gb, &db) + dot(&gf, &df));
        s.count += 1;
    }
    Ok(s.done("expression_scales", o.threshold))
}

/// Sampling positions strictly inside cells so that no central difference
/// straddles a cell boundary or the clamped border.
fn interior_coords(rng: &mut ChaCha8Rng, h: usize, w: usize, oh: usize, ow: usize) -> Result<FlowField> {
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
        if n == 1 {
            return 0.0;
        }
        let cell = rng.gen_range(0..n - 1);
        let frac = rng.gen_range(0.1..0.9);
        let a = pixel_to_norm(cell, n);
        let b = pixel_to_norm(cell + 1, n);
        a + frac * (b - a)
    };
    let coords = (0..oh * ow).map(|_| [pick(rng, w), pick(rng, h)]).collect();
    FlowField::new(oh, ow, coords)
}

fn check_bilinear(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for _ in 0..o.instances {
        let c = rng.gen_range(1..4);
        let (h, w) = (o.size, o.size + 1);
        let (oh, ow) = (rng.gen_range(1..o.size + 1), rng.gen_range(1..o.size + 1));
        let x = randn(rng, &[c, h, w]);
        let coords = interior_coords(rng, h, w, oh, ow)?;
        let up = randn(rng, &[c, oh, ow]);
        let (gx, gc) = bilinear_sample_vjp(&x, &coords, &up)?;
        let dx = randn(rng, x.shape());
        // Small coordinate direction keeps every probe inside its cell.
        let dc: Vec<[f64; 2]> = (0..oh * ow)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
            .collect();
        let fd = central(o.step, |t| {
            let moved = coords
                .coords
                .iter()
                .zip(&dc)
                .map(|(p, d)| [p[0] + t * d[0], p[1] + t * d[1]])
                .collect();
            Ok(dot(&up, &bilinear_sample(&shifted(&x, &dx, t), &FlowField::new(oh, ow, moved)?)?))
        })?;
        let mut an = dot(&gx, &dx)
            + gc.coords.iter().zip(&dc).map(|(g, d)| g[0] * d[0] + g[1] * d[1]).sum::<f64>();
        if o.perturb == Some(Perturb::BilinearSample) {
            an *= 1.0 + 1e-3;
        }
        s.record(fd, an);
        s.count += 1;
    }
    Ok(s.done("bilinear_sample", o.threshold))
}

fn check_upsample(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for _ in 0..o.instances {
        let c = rng.gen_range(1..4);
        let x = randn(rng, &[c, o.size, o.size]);
        let up = randn(rng, &[x.shape()[0], 2 * o.size, 2 * o.size]);
        let g = upsample2x_vjp(&up)?;
        let dx = randn(rng, x.shape());
        let fd = central(o.step, |h| Ok(dot(&up, &upsample2x(&shifted(&x, &dx, h))?)))?;
        s.record(fd, dot(&g, &dx));
        s.count += 1;
    }
    Ok(s.done("upsample2x", o.threshold))
}

fn check_loss(o: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut s = Suite::new();
    for _ in 0..o.instances {
        let shape = [3, o.size, o.size];
        let t = Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0));
        // Keep every residual well away from the kink at zero.
        let p = t.map(|v| v + if v < 0.5 { 0.25 } else { -0.25 });
        let (_, mut g) = loss(&p, &t, 0.0, None)?;
        if o.perturb == Some(Perturb::Loss) {
            g = g.map(|v| v * (1.0 + 1e-3));
        }
        let dp = randn(rng, &shape);
        let fd = central(o.step, |h| Ok(loss(&shifted(&p, &dp, h), &t, 0.0, None)?.0))?;
        s.record(fd, dot(&g, &dp));
        s.count += 1;
    }
    Ok(s.done("loss", o.threshold))
}

/// Loss gradient of a tiny 32x32 pipeline against finite differences on 16
/// random parameters. Each parameter is probed at two step sizes and the
/// better agreement is kept, since any step can straddle a kink of the L1 or
/// leaky ReLU.
pub fn pipeline_gradient_check(seed: u64, variant: Variant, transform: MotionKind) -> Result<f64> {
    let cfg = PipelineConfig {
        variant,
        transform,
        image_size: 32,
        encoder_widths: [4, 6, 8],
        projection_layers: 1,
        feature_channels: 5,
        residual_blocks: 2,
        decoder_widths: [6, 4, 3],
        output_kernel: 5,
        seed,
        ..PipelineConfig::default()
    };
    let m = Model::new(cfg)?;
    let mut p = m.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    // Non-zero style layers and biases so every path carries gradient.
    for (i, n) in p.names().to_vec().iter().enumerate() {
        if n.contains("style") || n.ends_with("bias") {
            for v in p.tensors_mut()[i].data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let scene = render_scene(seed, &scene_spec_for(m.config()))?;
    let x = TrainingSample::from_scene(&m, &scene)?;
    let (_, g) = sample_loss_and_grad(&m, &p, &x, None)?;
    let total = p.numel();
    let mut worst: f64 = 0.0;
    for _ in 0..16 {
        let k = rng.gen_range(0..total);
        let orig = p.flat_get(k).ok_or_else(|| domain("index out of range"))?;
        let an = g.flat_get(k).ok_or_else(|| domain("index out of range"))?;
        let mut best = f64::INFINITY;
        for h in [1e-5, 1e-6] {
            p.flat_set(k, orig + h);
            let lp = sample_loss_and_grad(&m, &p, &x, None)?.0;
            p.flat_set(k, orig - h);
            let lm = sample_loss_and_grad(&m, &p, &x, None)?.0;
            p.flat_set(k, orig);
            best = best.min(rel_err((lp - lm) / (2.0 * h), an));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Runs every suite with a shared seeded stream.
pub fn run_grad_check(o: &GradCheckOptions) -> Result<GradCheckReport> {
    if o.size < 2 {
        return Err(domain(format!("grad-check size must be >= 2, got {}", o.size)));
    }
    if o.instances == 0 {
        return Err(domain("grad-check needs at least one instance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut ops = vec![
        check_conv(o, &mut rng)?,
        check_modconv(o, &mut rng)?,
        check_expression_scales(o, &mut rng)?,
        check_bilinear(o, &mut rng)?,
        check_upsample(o, &mut rng)?,
        check_loss(o, &mut rng)?,
    ];
    if o.include_pipeline {
        let mut worst: f64 = 0.0;
        for (variant, transform) in [
            (Variant::DenseMotion, MotionKind::Affine),
            (Variant::NeuralMix, MotionKind::Tps),
        ] {
            worst = worst.max(pipeline_gradient_check(o.seed, variant, transform)?);
        }
        ops.push(OpReport {
            op: "pipeline".into(),
            instances: 2,
            worst_rel_error: worst,
            threshold: PIPELINE_THRESHOLD,
            passed: worst < PIPELINE_THRESHOLD,
        });
    }
    Ok(GradCheckReport { seed: o.seed, ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckOptions {
        GradCheckOptions {
            instances: 10,
            include_pipeline: false,
            ..GradCheckOptions::default()
        }
    }

    #[test]
    fn all_suites_pass() {
        let r = run_grad_check(&quick()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r, run_grad_check(&quick()).unwrap());
    }

    #[test]
    fn perturbed_vjp_is_caught() {
        for (p, name) in [
            (Perturb::Modconv, "modconv"),
            (Perturb::BilinearSample, "bilinear_sample"),
            (Perturb::Loss, "loss"),
        ] {
            let r = run_grad_check(&GradCheckOptions {
                perturb: Some(p),
                ..quick()
            })
            .unwrap();
            assert_eq!(r.failing(), vec![name]);
        }
    }
}
