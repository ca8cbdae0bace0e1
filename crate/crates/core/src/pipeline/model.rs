use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{PipelineConfig, Variant};
use crate::error::{domain, Error, Result};
use crate::flow::{
    apply_confidence, coarse_flow, compose_flow, identity_flow, warp_features, ConfidenceMap,
    FlowField, MotionMask,
};
use crate::geometry::Transform;
use crate::modconv::{
    conv2d, conv2d_vjp, expression_scales, expression_scales_vjp, leaky_relu, leaky_relu_vjp,
    modconv_forward, modconv_vjp, sigmoid, sigmoid_vjp, upsample2x, upsample2x_vjp, ConvKernel,
    ExpressionFeature, ScaleVector, StyleAffine, LEAKY_SLOPE,
};
use crate::tensor::{bilinear_sample_vjp, Tensor};

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (n, t) in entries {
            if names.contains(&n) {
                return Err(domain(format!("duplicate parameter name {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) -> Result<()> {
        if self.names != other.names {
            return Err(domain("parameter sets differ in layout"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }

    /// Reads the scalar at flat position `index` of the concatenated tensors.
    pub fn flat_get(&self, index: usize) -> Option<f64> {
        let (t, i) = self.locate(index)?;
        Some(self.tensors[t].data()[i])
    }

    pub fn flat_set(&mut self, index: usize, v: f64) -> Option<()> {
        let (t, i) = self.locate(index)?;
        self.tensors[t].data_mut()[i] = v;
        Some(())
    }

    /// Tensor name owning flat position `index`.
    pub fn flat_name(&self, index: usize) -> Option<&str> {
        self.locate(index).map(|(t, _)| self.names[t].as_str())
    }

    fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (t, x) in self.tensors.iter().enumerate() {
            if index < x.len() {
                return Some((t, index));
            }
            index -= x.len();
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResIdx {
    w: usize,
    b: usize,
    sw: usize,
    sb: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He-normal for convolutions followed by a leaky ReLU.
    Leaky,
    /// Variance-preserving normal for linear outputs.
    Linear,
    Zero,
}

#[derive(Debug, Clone)]
struct Layout {
    down: Vec<ConvIdx>,
    proj: Vec<ConvIdx>,
    head: ConvIdx,
    res: Vec<ResIdx>,
    up: Vec<ConvIdx>,
    out: ConvIdx,
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, init: Init) -> ConvIdx {
        ConvIdx {
            w: self.add(format!("{name}.weight"), vec![out_c, in_c, k, k], init),
            b: self.add(format!("{name}.bias"), vec![out_c], Init::Zero),
        }
    }

    fn build(cfg: &PipelineConfig) -> Self {
        let mut l = Layout {
            down: vec![],
            proj: vec![],
            head: ConvIdx { w: 0, b: 0 },
            res: vec![],
            up: vec![],
            out: ConvIdx { w: 0, b: 0 },
            specs: vec![],
        };
        let mut c_in = 6;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            let idx = l.conv(&format!("enc.down{}", i + 1), w, c_in, 3, Init::Leaky);
            l.down.push(idx);
            c_in = w;
        }
        for i in 0..cfg.projection_layers {
            let w = cfg.encoder_widths[2];
            let idx = l.conv(&format!("enc.proj{}", i + 1), w, c_in, 1, Init::Leaky);
            l.proj.push(idx);
            c_in = w;
        }
        let heads = cfg.feature_channels + 1 + usize::from(cfg.variant == Variant::DenseMotion);
        l.head = l.conv("enc.head", heads, c_in, 1, Init::Linear);
        let c = cfg.feature_channels;
        for i in 0..cfg.residual_blocks {
            let name = format!("dec.res{}", i + 1);
            let conv = l.conv(&name, c, c, 3, Init::Leaky);
            let sw = l.add(format!("{name}.style_weight"), vec![c, cfg.expression_dim], Init::Zero);
            let sb = l.add(format!("{name}.style_bias"), vec![c], Init::Zero);
            l.res.push(ResIdx {
                w: conv.w,
                b: conv.b,
                sw,
                sb,
            });
        }
        let mut c_in = c;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            let idx = l.conv(&format!("dec.up{}", i + 1), w, c_in, 3, Init::Leaky);
            l.up.push(idx);
            c_in = w;
        }
        l.out = l.conv("dec.out", 3, c_in, cfg.output_kernel, Init::Linear);
        l
    }
}

/// Output of the motion-aware encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub feature: Tensor,
    pub confidence: ConfidenceMap,
    /// Present only for the dense-motion variant.
    pub mask: Option<MotionMask>,
}

/// One training or inference example with its geometric inputs resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: Tensor,
    /// Source warped into the driving pose by the coarse transform.
    pub transformed: Tensor,
    /// Coarse flow at the encoder feature extent.
    pub feature_flow: FlowField,
    pub expression: ExpressionFeature,
}

/// The encoder/decoder generator for one configuration.
#[derive(Debug, Clone)]
pub struct Model {
    config: PipelineConfig,
    layout: Layout,
}

struct ConvAct {
    input: Tensor,
    pre: Tensor,
}

struct EncCache {
    input: Tensor,
    body: Vec<ConvAct>,
    head_in: Tensor,
    out: EncoderOutput,
}

struct AlignCache {
    /// `(O_P, O_T, O_I)` for the dense-motion variant.
    flows: Option<(FlowField, FlowField, FlowField)>,
    aligned: Tensor,
}

struct ResAct {
    input: Tensor,
    pre: Tensor,
    scales: ScaleVector,
}

struct DecCache {
    res: Vec<ResAct>,
    up: Vec<ConvAct>,
    out_in: Tensor,
    out: Tensor,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    enc: EncCache,
    align: AlignCache,
    dec: DecCache,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.dec.out
    }

    /// Name of the first non-finite activation, in forward order.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut named: Vec<(String, &Tensor)> = vec![("input".into(), &self.enc.input)];
        for (i, a) in self.enc.body.iter().enumerate() {
            named.push((format!("encoder.layer{}", i + 1), &a.pre));
        }
        named.push(("encoder.feature".into(), &self.enc.out.feature));
        named.push(("encoder.confidence".into(), self.enc.out.confidence.values()));
        named.push(("aligned".into(), &self.align.aligned));
        for (i, a) in self.dec.res.iter().enumerate() {
            named.push((format!("decoder.res{}", i + 1), &a.pre));
        }
        for (i, a) in self.dec.up.iter().enumerate() {
            named.push((format!("decoder.up{}", i + 1), &a.pre));
        }
        named.push(("output".into(), &self.dec.out));
        named.into_iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }
}

fn conv_lrelu(x: &Tensor, p: &Params, idx: ConvIdx, stride: usize) -> Result<ConvAct> {
    let pre = conv2d(x, &p.tensors[idx.w], Some(&p.tensors[idx.b]), stride)?;
    Ok(ConvAct { input: x.clone(), pre })
}

fn style(p: &Params, r: ResIdx) -> StyleAffine {
    StyleAffine {
        weight: p.tensors[r.sw].clone(),
        bias: p.tensors[r.sb].clone(),
    }
}

fn kernel(p: &Params, r: ResIdx) -> Result<ConvKernel> {
    ConvKernel::new(p.tensors[r.w].clone(), Some(p.tensors[r.b].clone()))
}

/// Sum over channels of `a * b`, producing `[1,H,W]`.
fn channel_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, w) = a.dims3()?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        let (ra, rb) = (&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane]);
        for i in 0..plane {
            out[i] += ra[i] * rb[i];
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

impl Model {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout.specs.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect()
    }

    /// Seeded initialization: He-normal convolution weights, zero biases,
    /// zero style layers (all scales start at one).
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .layout
            .specs
            .iter()
            .map(|(name, shape, init)| {
                let fan_in: usize = shape[1..].iter().product();
                let std = match init {
                    Init::Leaky => (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt(),
                    Init::Linear => (1.0 / fan_in as f64).sqrt(),
                    Init::Zero => 0.0,
                };
                let t = if std == 0.0 {
                    Tensor::zeros(shape)
                } else {
                    let d = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| d.sample(&mut rng))
                };
                (name.clone(), t)
            })
            .collect();
        Params::new(entries).expect("unique names")
    }

    /// Checks that `p` has exactly this model's names and shapes.
    pub fn check_params(&self, p: &Params) -> Result<()> {
        if p.len() != self.layout.specs.len() {
            return Err(domain(format!(
                "expected {} parameter tensors, got {}",
                self.layout.specs.len(),
                p.len()
            )));
        }
        for ((name, shape, _), (n, t)) in self.layout.specs.iter().zip(p.iter()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(domain(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Resolves the coarse geometry for one example.
    pub fn prepare(&self, source: &Tensor, transform: &Transform, expression: &ExpressionFeature) -> Result<Prepared> {
        let n = self.config.image_size;
        if source.shape() != [3, n, n] {
            return Err(domain(format!(
                "source must be [3, {n}, {n}], got {:?}",
                source.shape()
            )));
        }
        if expression.dim() != self.config.expression_dim {
            return Err(domain(format!(
                "expression feature has dimension {}, model expects {}",
                expression.dim(),
                self.config.expression_dim
            )));
        }
        let transformed = warp_features(source, &coarse_flow(transform, n, n)?)?;
        let h = self.config.feature_extent();
        Ok(Prepared {
            source: source.clone(),
            transformed,
            feature_flow: coarse_flow(transform, h, h)?,
            expression: expression.clone(),
        })
    }

    fn encode_cached(&self, p: &Params, source: &Tensor, transformed: &Tensor) -> Result<EncCache> {
        if source.shape() != transformed.shape() {
            return Err(domain(format!(
                "source {:?} and transformed source {:?} differ in extent",
                source.shape(),
                transformed.shape()
            )));
        }
        let (c, h, w) = source.dims3()?;
        if c != 3 || h != w || h != self.config.image_size {
            return Err(domain(format!(
                "encoder expects [3, {n}, {n}] frames, got {:?}",
                source.shape(),
                n = self.config.image_size
            )));
        }
        let input = Tensor::concat_channels(&[source, transformed])?;
        let mut body = Vec::with_capacity(self.layout.down.len() + self.layout.proj.len());
        let mut x = input.clone();
        for &idx in &self.layout.down {
            let a = conv_lrelu(&x, p, idx, 2)?;
            x = leaky_relu(&a.pre);
            body.push(a);
        }
        for &idx in &self.layout.proj {
            let a = conv_lrelu(&x, p, idx, 1)?;
            x = leaky_relu(&a.pre);
            body.push(a);
        }
        let heads = conv2d(&x, &p.tensors[self.layout.head.w], Some(&p.tensors[self.layout.head.b]), 1)?;
        let fc = self.config.feature_channels;
        let feature = heads.channel_slice(0, fc)?;
        let confidence = ConfidenceMap::new(sigmoid(&heads.channel_slice(fc, 1)?))?;
        let mask = match self.config.variant {
            Variant::DenseMotion => Some(MotionMask::new(sigmoid(&heads.channel_slice(fc + 1, 1)?))?),
            Variant::NeuralMix => None,
        };
        Ok(EncCache {
            input,
            body,
            head_in: x,
            out: EncoderOutput {
                feature,
                confidence,
                mask,
            },
        })
    }

    /// Motion-aware encoder: features, confidence and (dense-motion) mask at
    /// one eighth of the input extent.
    pub fn encode(&self, p: &Params, source: &Tensor, transformed: &Tensor) -> Result<EncoderOutput> {
        Ok(self.encode_cached(p, source, transformed)?.out)
    }

    fn align_cached(&self, enc: &EncoderOutput, o_t: &FlowField) -> Result<AlignCache> {
        match (self.config.variant, &enc.mask) {
            (Variant::NeuralMix, None) => Ok(AlignCache {
                flows: None,
                aligned: enc.feature.clone(),
            }),
            (Variant::DenseMotion, Some(m)) => {
                let (h, w) = m.extent();
                let o_i = identity_flow(h, w)?;
                let o_p = compose_flow(m, &o_i, o_t)?;
                let aligned = warp_features(&enc.feature, &o_p)?;
                Ok(AlignCache {
                    flows: Some((o_p, o_t.clone(), o_i)),
                    aligned,
                })
            }
            (v, _) => Err(domain(format!(
                "encoder output mask presence does not match variant {}",
                v.as_str()
            ))),
        }
    }

    /// Brings encoder features into the driving pose.
    pub fn align(&self, enc: &EncoderOutput, transform: &Transform) -> Result<Tensor> {
        let (_, h, w) = enc.feature.dims3()?;
        let o_t = coarse_flow(transform, h, w)?;
        Ok(self.align_cached(enc, &o_t)?.aligned)
    }

    fn decode_cached(&self, p: &Params, e: &Tensor, f: &ExpressionFeature) -> Result<DecCache> {
        let (c, h, w) = e.dims3()?;
        let fh = self.config.feature_extent();
        if c != self.config.feature_channels || h != fh || w != fh {
            return Err(domain(format!(
                "decoder expects [{}, {fh}, {fh}], got {:?}",
                self.config.feature_channels,
                e.shape()
            )));
        }
        let eps = self.config.mod_eps;
        let mut res = Vec::with_capacity(self.layout.res.len());
        let mut z = e.clone();
        for &r in &self.layout.res {
            let scales = expression_scales(f, &style(p, r))?;
            let pre = modconv_forward(&z, &kernel(p, r)?, &scales, eps)?;
            let mut next = leaky_relu(&pre);
            next.add_scaled(1.0, &z)?;
            res.push(ResAct {
                input: std::mem::replace(&mut z, next),
                pre,
                scales,
            });
        }
        let mut up = Vec::with_capacity(self.layout.up.len());
        for &idx in &self.layout.up {
            let a = conv_lrelu(&upsample2x(&z)?, p, idx, 1)?;
            z = leaky_relu(&a.pre);
            up.push(a);
        }
        let logits = conv2d(&z, &p.tensors[self.layout.out.w], Some(&p.tensors[self.layout.out.b]), 1)?;
        Ok(DecCache {
            res,
            up,
            out_in: z,
            out: sigmoid(&logits),
        })
    }

    /// Expression-controlled decoder: modulated residual blocks, upsampling
    /// blocks and a sigmoid RGB output at eight times the feature extent.
    pub fn decode(&self, p: &Params, e: &Tensor, f: &ExpressionFeature) -> Result<Tensor> {
        Ok(self.decode_cached(p, e, f)?.out)
    }

    /// Full forward pass keeping activations for [`Model::backward`].
    pub fn forward(&self, p: &Params, x: &Prepared) -> Result<ForwardCache> {
        let enc = self.encode_cached(p, &x.source, &x.transformed)?;
        let align = self.align_cached(&enc.out, &x.feature_flow)?;
        let e = apply_confidence(&enc.out.confidence, &align.aligned)?;
        let dec = self.decode_cached(p, &e, &x.expression)?;
        Ok(ForwardCache { enc, align, dec })
    }

    /// Warps, encodes, aligns, gates by confidence and decodes.
    pub fn generate(
        &self,
        p: &Params,
        source: &Tensor,
        transform: &Transform,
        f: &ExpressionFeature,
    ) -> Result<Tensor> {
        let x = self.prepare(source, transform, f)?;
        Ok(self.forward(p, &x)?.dec.out)
    }

    /// Parameter gradients for an upstream gradient on the output image.
    pub fn backward(&self, p: &Params, x: &Prepared, cache: &ForwardCache, grad_out: &Tensor) -> Result<Params> {
        let mut g_p = p.zeros_like();
        let eps = self.config.mod_eps;
        let dec = &cache.dec;

        // Output conv and upsampling blocks.
        let g = sigmoid_vjp(&dec.out, grad_out)?;
        let mut g = conv_back(p, &mut g_p, self.layout.out, &dec.out_in, 1, &g)?;
        for (a, &idx) in dec.up.iter().zip(&self.layout.up).rev() {
            let gp = leaky_relu_vjp(&a.pre, &g)?;
            let gi = conv_back(p, &mut g_p, idx, &a.input, 1, &gp)?;
            g = upsample2x_vjp(&gi)?;
        }

        // Modulated residual blocks.
        for (a, &r) in dec.res.iter().zip(&self.layout.res).rev() {
            let gp = leaky_relu_vjp(&a.pre, &g)?;
            let mg = modconv_vjp(&a.input, &kernel(p, r)?, &a.scales, eps, &gp)?;
            g.add_scaled(1.0, &mg.grad_x)?;
            g_p.tensors[r.w].add_scaled(1.0, &mg.grad_weights)?;
            if let Some(gb) = &mg.grad_bias {
                g_p.tensors[r.b].add_scaled(1.0, gb)?;
            }
            let (gw, gb, _) = expression_scales_vjp(&x.expression, &style(p, r), &mg.grad_scales)?;
            g_p.tensors[r.sw].add_scaled(1.0, &gw)?;
            g_p.tensors[r.sb].add_scaled(1.0, &gb)?;
        }

        // Confidence gate E = C ∘ F_A.
        let enc = &cache.enc.out;
        let conf = enc.confidence.values();
        let g_conf = channel_dot(&g, &cache.align.aligned)?;
        let mut g_aligned = g;
        {
            let (c, h, w) = g_aligned.dims3()?;
            let plane = h * w;
            let cv = conf.data();
            let d = g_aligned.data_mut();
            for ch in 0..c {
                for i in 0..plane {
                    d[ch * plane + i] *= cv[i];
                }
            }
        }
        let g_conf_logit = sigmoid_vjp(conf, &g_conf)?;

        // Alignment.
        let (g_feature, g_mask_logit) = match (&cache.align.flows, &enc.mask) {
            (Some((o_p, o_t, o_i)), Some(m)) => {
                let (g_f, g_flow) = bilinear_sample_vjp(&enc.feature, o_p, &g_aligned)?;
                let (h, w) = m.extent();
                let gm: Vec<f64> = (0..h * w)
                    .map(|i| {
                        let d = g_flow.coords[i];
                        d[0] * (o_t.coords[i][0] - o_i.coords[i][0]) + d[1] * (o_t.coords[i][1] - o_i.coords[i][1])
                    })
                    .collect();
                let mv = m.values().clone().reshape(&[1, h, w])?;
                let gm = Tensor::from_vec(&[1, h, w], gm)?;
                (g_f, Some(sigmoid_vjp(&mv, &gm)?))
            }
            (None, None) => (g_aligned, None),
            _ => return Err(Error::Domain("cache does not match variant".into())),
        };

        // Heads and encoder body.
        let mut parts = vec![&g_feature, &g_conf_logit];
        if let Some(gm) = &g_mask_logit {
            parts.push(gm);
        }
        let g_heads = Tensor::concat_channels(&parts)?;
        let mut g = conv_back(p, &mut g_p, self.layout.head, &cache.enc.head_in, 1, &g_heads)?;
        let body_idx: Vec<(ConvIdx, usize)> = self
            .layout
            .down
            .iter()
            .map(|&i| (i, 2))
            .chain(self.layout.proj.iter().map(|&i| (i, 1)))
            .collect();
        for (k, (a, &(idx, stride))) in cache.enc.body.iter().zip(&body_idx).enumerate().rev() {
            let gp = leaky_relu_vjp(&a.pre, &g)?;
            if k == 0 {
                let (_, gw, gb) = conv2d_vjp(&a.input, &p.tensors[idx.w], stride, &gp, false)?;
                g_p.tensors[idx.w].add_scaled(1.0, &gw)?;
                g_p.tensors[idx.b].add_scaled(1.0, &gb)?;
            } else {
                g = conv_back(p, &mut g_p, idx, &a.input, stride, &gp)?;
            }
        }
        Ok(g_p)
    }
}

/// Accumulates weight/bias gradients of one conv and returns the input gradient.
fn conv_back(p: &Params, g_p: &mut Params, idx: ConvIdx, input: &Tensor, stride: usize, g: &Tensor) -> Result<Tensor> {
    let (gx, gw, gb) = conv2d_vjp(input, &p.tensors[idx.w], stride, g, true)?;
    g_p.tensors[idx.w].add_scaled(1.0, &gw)?;
    g_p.tensors[idx.b].add_scaled(1.0, &gb)?;
    Ok(gx.expect("input gradient requested"))
}
