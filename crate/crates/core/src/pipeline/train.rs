use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::PipelineConfig;
use super::model::{Model, Params, Prepared};
use crate::error::{domain, parse_err, Error, Result};
use crate::geometry::Transform;
use crate::modconv::ExpressionFeature;
use crate::synthbench::{psnr, render_scene, SceneSpec, SyntheticScene};
use crate::tensor::Tensor;

/// A pluggable perceptual distance. Returns the loss and its gradient with
/// respect to `predicted`.
pub trait PerceptualBackend: Sync {
    fn evaluate(&self, predicted: &Tensor, target: &Tensor) -> Result<(f64, Tensor)>;
}

/// `mean |p - t| + lambda * perceptual(p, t)` and its gradient in `p`.
/// The L1 subgradient is zero where `p == t`.
pub fn loss(
    predicted: &Tensor,
    target: &Tensor,
    lambda: f64,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<(f64, Tensor)> {
    predicted.check_same_shape(target)?;
    if !(lambda >= 0.0) {
        return Err(domain(format!("lambda must be >= 0, got {lambda}")));
    }
    if predicted.is_empty() {
        return Err(domain("loss of empty tensors"));
    }
    let n = predicted.len() as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let mut grad = Tensor::from_vec(predicted.shape(), grad)?;
    let mut value = total / n;
    if lambda > 0.0 {
        let b = backend.ok_or_else(|| {
            Error::Config(format!("lambda = {lambda} but no perceptual backend is registered"))
        })?;
        let (pv, pg) = b.evaluate(predicted, target)?;
        value += lambda * pv;
        grad.add_scaled(lambda, &pg)?;
    }
    Ok((value, grad))
}

/// A prepared example with its target frame.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: Prepared,
    pub target: Tensor,
}

impl TrainingSample {
    pub fn new(
        model: &Model,
        source: &Tensor,
        transform: &Transform,
        expression: &ExpressionFeature,
        target: &Tensor,
    ) -> Result<Self> {
        let input = model.prepare(source, transform, expression)?;
        input.source.check_same_shape(target)?;
        Ok(Self {
            input,
            target: target.clone(),
        })
    }

    pub fn from_scene(model: &Model, s: &SyntheticScene) -> Result<Self> {
        Self::new(model, &s.source, &s.transform, &s.expression, &s.driving)
    }
}

/// Scene spec matching the model's image size and motion type.
pub fn scene_spec_for(cfg: &PipelineConfig) -> SceneSpec {
    SceneSpec {
        size: cfg.image_size,
        motion: cfg.transform,
        ..SceneSpec::default()
    }
}

/// Seeds of the training and held-out scenes for a config.
pub fn scene_seeds(cfg: &PipelineConfig) -> (Vec<u64>, Vec<u64>) {
    let base = cfg.seed.wrapping_mul(1_000_003);
    let train = (0..cfg.dataset_size as u64).map(|i| base.wrapping_add(i)).collect();
    let held = (0..cfg.heldout_size as u64)
        .map(|i| base.wrapping_add(500_000 + i))
        .collect();
    (train, held)
}

/// Renders and prepares the training and held-out sets for a config.
pub fn build_datasets(model: &Model) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    let cfg = model.config();
    let spec = scene_spec_for(cfg);
    let (train, held) = scene_seeds(cfg);
    let make = |seeds: Vec<u64>| -> Result<Vec<TrainingSample>> {
        seeds
            .into_iter()
            .map(|s| TrainingSample::from_scene(model, &render_scene(s, &spec)?))
            .collect()
    };
    Ok((make(train)?, make(held)?))
}

/// Parameters, Adam moments, step counter and per-step loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub first_moment: Params,
    pub second_moment: Params,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: Params) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// One Adam update with bias correction.
    pub fn adam_update(&mut self, grads: &Params, cfg: &PipelineConfig) -> Result<()> {
        if grads.names() != self.params.names() {
            return Err(domain("gradient layout differs from parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for i in 0..self.params.len() {
            let g = grads.tensors()[i].data();
            let m = self.first_moment.tensors_mut()[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
            }
            let v = self.second_moment.tensors_mut()[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            }
            let m = self.first_moment.tensors()[i].data().to_vec();
            let v = self.second_moment.tensors()[i].data().to_vec();
            let p = self.params.tensors_mut()[i].data_mut();
            for ((pj, mj), vj) in p.iter_mut().zip(&m).zip(&v) {
                *pj -= cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }

    /// Loss history as `step,loss` CSV (steps start at 1).
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, crate::geometry::fmt_num(*l)));
        }
        s
    }
}

/// Loss and parameter gradient for one example.
pub fn sample_loss_and_grad(
    model: &Model,
    params: &Params,
    sample: &TrainingSample,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<(f64, Params)> {
    if let Some(n) = params.first_non_finite() {
        return Err(Error::Numeric(format!("first non-finite tensor: parameter {n}")));
    }
    let cache = model.forward(params, &sample.input)?;
    let (value, g_out) = loss(cache.output(), &sample.target, model.config().lambda, backend)?;
    if !value.is_finite() {
        let what = params
            .first_non_finite()
            .map(|n| format!("parameter {n}"))
            .or_else(|| cache.first_non_finite().map(|n| format!("activation {n}")))
            .unwrap_or_else(|| "loss".into());
        return Err(Error::Numeric(format!("non-finite loss; first non-finite tensor: {what}")));
    }
    let grads = model.backward(params, &sample.input, &cache, &g_out)?;
    Ok((value, grads))
}

/// Mean loss and gradient over a batch. Per-example work may run in
/// parallel; the reduction is always in batch order.
pub fn batch_loss_and_grad(
    model: &Model,
    params: &Params,
    batch: &[&TrainingSample],
    backend: Option<&dyn PerceptualBackend>,
) -> Result<(f64, Params)> {
    let results: Vec<Result<(f64, Params)>> = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(model, params, s, backend))
        .collect();
    let mut total = 0.0;
    let mut acc = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for r in results {
        let (l, g) = r?;
        total += l;
        acc.add_scaled(scale, &g)?;
    }
    Ok((total * scale, acc))
}

/// Batch indices for `step` (0-based): a fresh seeded permutation per
/// epoch, consumed in order.
pub fn batch_indices(seed: u64, dataset_len: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cursor = step as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch_size {
        let epoch = cursor / dataset_len;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000 ^ epoch as u64);
            let mut perm: Vec<usize> = (0..dataset_len).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[cursor % dataset_len]);
        cursor += 1;
    }
    out
}

/// Runs `steps` Adam steps on `state`, calling `on_step(step, loss)` after each.
pub fn train_steps(
    model: &Model,
    state: &mut TrainState,
    dataset: &[TrainingSample],
    steps: usize,
    backend: Option<&dyn PerceptualBackend>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    let cfg = model.config();
    model.check_params(&state.params)?;
    if dataset.is_empty() {
        return Err(domain("training dataset is empty"));
    }
    if cfg.lambda > 0.0 && backend.is_none() {
        return Err(Error::Config(format!(
            "lambda = {} but no perceptual backend is registered",
            cfg.lambda
        )));
    }
    let bs = cfg.batch_size.min(dataset.len());
    for _ in 0..steps {
        let idx = batch_indices(cfg.seed, dataset.len(), bs, state.step);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &dataset[i]).collect();
        let (l, g) = batch_loss_and_grad(model, &state.params, &batch, backend)?;
        if let Some(n) = g.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}; first non-finite tensor: gradient of {n}",
                state.step + 1
            )));
        }
        state.adam_update(&g, cfg)?;
        state.loss_history.push(l);
        on_step(state.step, l);
    }
    Ok(())
}

/// Initializes from the config seed and trains for `config.steps` steps.
pub fn train(model: &Model, dataset: &[TrainingSample], backend: Option<&dyn PerceptualBackend>) -> Result<TrainState> {
    let mut state = TrainState::new(model.init_params(model.config().seed));
    train_steps(model, &mut state, dataset, model.config().steps, backend, |_, _| {})?;
    Ok(state)
}

/// Mean reconstruction PSNR and mean L1 over `samples`.
pub fn evaluate(model: &Model, params: &Params, samples: &[TrainingSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(domain("evaluation set is empty"));
    }
    let scores: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(params, &s.input)?;
            let p = psnr(out.output(), &s.target, 1.0)?;
            let (l1, _) = loss(out.output(), &s.target, 0.0, None)?;
            Ok((p, l1))
        })
        .collect();
    let (mut ps, mut ls) = (0.0, 0.0);
    for r in scores {
        let (p, l) = r?;
        ps += p;
        ls += l;
    }
    let n = samples.len() as f64;
    Ok((ps / n, ls / n))
}

const DCHK_MAGIC: &[u8; 4] = b"DCHK";

/// Serializes named tensors: magic, u32 count, then per tensor a u8 name
/// length, name bytes, u32 rank, u32 extents and little-endian f64 data.
pub fn encode_checkpoint(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = DCHK_MAGIC.to_vec();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        if nb.is_empty() || nb.len() > 255 {
            return Err(domain(format!("tensor name {name:?} must be 1..=255 bytes")));
        }
        out.push(nb.len() as u8);
        out.extend_from_slice(nb);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    struct Cur<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl Cur<'_> {
        fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
            if self.b.len() - self.pos < n {
                return Err(parse_err(self.pos, format!("truncated checkpoint while reading {what}")));
            }
            let s = &self.b[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self, what: &str) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
        }
    }
    let mut c = Cur { b: bytes, pos: 0 };
    if c.take(4, "magic").ok() != Some(DCHK_MAGIC.as_slice()) {
        return Err(parse_err(0, "bad magic, expected DCHK"));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = c.pos;
        let len = c.take(1, "name length")?[0] as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| parse_err(at + 1, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("extent")?);
        }
        let n: usize = shape.iter().product();
        let data_at = c.pos;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| parse_err(data_at, "tensor too large"))?, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| parse_err(data_at, e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(parse_err(c.pos, "trailing bytes after checkpoint"));
    }
    Ok(out)
}

/// Checkpoint of the parameters only.
pub fn params_to_checkpoint(p: &Params) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = p.iter().collect();
    encode_checkpoint(&entries)
}

pub fn params_from_checkpoint(model: &Model, bytes: &[u8]) -> Result<Params> {
    let p = Params::new(decode_checkpoint(bytes)?)?;
    model.check_params(&p)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let a = Tensor::full(&[3, 2, 2], 0.4);
        let (l, g) = loss(&a, &a, 0.0, None).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let b = a.map(|v| v + 0.25);
        let (l, _) = loss(&a, &b, 0.0, None).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!(matches!(loss(&a, &b, 0.5, None), Err(Error::Config(_))));
    }

    struct HalfL2;
    impl PerceptualBackend for HalfL2 {
        fn evaluate(&self, p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
            let d: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
            let v = d.iter().map(|x| 0.5 * x * x).sum();
            Ok((v, Tensor::from_vec(p.shape(), d)?))
        }
    }

    #[test]
    fn loss_gradient_matches_fd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Tensor::from_fn(&[2, 3, 3], |_| rng.gen());
        let t = Tensor::from_fn(&[2, 3, 3], |_| rng.gen());
        let (_, g) = loss(&p, &t, 0.3, Some(&HalfL2)).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.data_mut()[i] += h;
            let mut b = p.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&a, &t, 0.3, Some(&HalfL2)).unwrap().0 - loss(&b, &t, 0.3, Some(&HalfL2)).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let b = Tensor::from_vec(&[1], vec![-2.5]).unwrap();
        let bytes = encode_checkpoint(&[("a", &a), ("bee", &b)]).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("bee".to_string(), b)]);
        assert!(matches!(decode_checkpoint(b"XCHK\0\0\0\0"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen = [0; 10];
        for step in 0..5 {
            for i in batch_indices(3, 10, 2, step) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(3, 10, 4, 7), batch_indices(3, 10, 4, 7));
    }
}
