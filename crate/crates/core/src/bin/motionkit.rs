use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use motionkit::acceptance::{run_acceptance, AcceptanceOptions, Suite};
use motionkit::flow::{coarse_flow, compose_flow, identity_flow, warp_features, FlowField, MotionMask};
use motionkit::geometry::{
    fmt_num, heatmap_to_affine, keypoints_from_json, relative_affine, tps_eval, tps_fit, Heatmap, Transform,
};
use motionkit::gradcheck::{run_grad_check, GradCheckOptions, Perturb};
use motionkit::modconv::ExpressionFeature;
use motionkit::pipeline::{
    build_datasets, evaluate, params_from_checkpoint, params_to_checkpoint, train_steps, Model, PipelineConfig,
    TrainState,
};
use motionkit::pnm::{read_pnm, write_pnm};
use motionkit::synthbench::{expression_code, interior_psnr, render_scene, ssim, SceneSpec};
use motionkit::tensor::Tensor;

#[derive(Parser)]
#[command(name = "motionkit", version, about = "Motion transfer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a thin-plate spline mapping --src keypoints onto --dst keypoints.
    FitTps {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        reg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Affine from a heatmap PGM, or the driving-to-source affine when --driving is given.
    ExtractAffine {
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        driving: Option<PathBuf>,
        #[arg(long, default_value_t = motionkit::geometry::DEFAULT_EPS_COV)]
        eps_cov: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Backward-warp an image by a transform, optionally blended with identity by a mask.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Blend a base flow (identity by default) with a transform's coarse flow.
    Compose {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained generator on one source image.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        /// Eye openness encoded into the expression code.
        #[arg(long, default_value_t = 1.0)]
        openness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the synthetic dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Finite-difference checks of every backward pass.
    GradCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Skip the end-to-end pipeline check.
        #[arg(long)]
        ops_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        perturb_vjp: Option<String>,
    },
    /// Render synthetic scenes and score the ground-truth warp.
    Bench {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Directory receiving source/driving PPMs and transform JSON per scene.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Accept {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Lib(#[from] motionkit::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            _ => 2,
        }
    }
}

type Res<T> = std::result::Result<T, CliError>;

fn read_text(p: &Path) -> Res<String> {
    fs::read_to_string(p).map_err(|source| CliError::Io { path: p.into(), source })
}

fn write_bytes(p: &Path, b: impl AsRef<[u8]>) -> Res<()> {
    fs::write(p, b).map_err(|source| CliError::Io { path: p.into(), source })
}

fn with_path<T>(p: &Path, r: motionkit::Result<T>) -> Res<T> {
    r.map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
}

fn read_image(p: &Path) -> Res<Tensor> {
    with_path(p, read_pnm(p))
}

fn read_plane(p: &Path) -> Res<Tensor> {
    let t = read_image(p)?;
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return Err(CliError::Invalid(format!("{}: expected a single-channel PGM", p.display())));
    }
    Ok(t.reshape(&[h, w])?)
}

fn read_transform(p: &Path) -> Res<Transform> {
    with_path(p, Transform::from_json(&read_text(p)?))
}

fn read_config(p: Option<&Path>) -> Res<PipelineConfig> {
    match p {
        Some(p) => with_path(p, PipelineConfig::from_json(&read_text(p)?)),
        None => Ok(PipelineConfig::default()),
    }
}

fn fit_tps(src: &Path, dst: &Path, reg: f64, out: &Path) -> Res<()> {
    let a = with_path(src, keypoints_from_json(&read_text(src)?))?;
    let b = with_path(dst, keypoints_from_json(&read_text(dst)?))?;
    let t = tps_fit(&a, &b, reg)?;
    let resid = a
        .points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| {
            let r = tps_eval(&t, *p);
            (r[0] - q[0]).abs().max((r[1] - q[1]).abs())
        })
        .fold(0.0, f64::max);
    let side = t.side_condition_residual();
    let max_w = t.max_weight();
    write_bytes(out, Transform::Tps(t).to_json())?;
    println!("RESULT keypoints={}", a.len());
    println!("RESULT max_residual={}", fmt_num(resid));
    println!("RESULT side_condition={}", fmt_num(side));
    println!("RESULT max_weight={}", fmt_num(max_w));
    Ok(())
}

fn extract_affine(heatmap: &Path, driving: Option<&Path>, eps_cov: f64, out: &Path) -> Res<()> {
    let affine_of = |p: &Path| -> Res<_> {
        let h = with_path(p, Heatmap::from_weights(read_plane(p)?))?;
        Ok(heatmap_to_affine(&h, eps_cov)?)
    };
    let src = affine_of(heatmap)?;
    let a = match driving {
        Some(d) => relative_affine(&src, &affine_of(d)?)?,
        None => src,
    };
    println!("RESULT linear={},{},{},{}", fmt_num(a.linear[0][0]), fmt_num(a.linear[0][1]), fmt_num(a.linear[1][0]), fmt_num(a.linear[1][1]));
    println!("RESULT translation={},{}", fmt_num(a.translation[0]), fmt_num(a.translation[1]));
    write_bytes(out, Transform::Affine(a).to_json())
}

fn flow_for(transform: &Path, mask: Option<&Path>, base: Option<&Path>, h: usize, w: usize) -> Res<FlowField> {
    let t = read_transform(transform)?;
    let o_t = coarse_flow(&t, h, w)?;
    let Some(mask) = mask else { return Ok(o_t) };
    let m = with_path(mask, MotionMask::new(read_plane(mask)?))?;
    let o_i = match base {
        Some(b) => with_path(b, FlowField::from_bytes(&fs::read(b).map_err(|source| CliError::Io { path: b.into(), source })?))?,
        None => identity_flow(h, w)?,
    };
    Ok(compose_flow(&m, &o_i, &o_t)?)
}

fn warp(image: &Path, transform: &Path, out: &Path, mask: Option<&Path>) -> Res<()> {
    let img = read_image(image)?;
    let (c, h, w) = img.dims3()?;
    let flow = flow_for(transform, mask, None, h, w)?;
    let warped = warp_features(&img, &flow)?;
    write_pnm(out, &warped)?;
    println!("RESULT warped={}x{}x{}", c, h, w);
    Ok(())
}

fn compose(mask: &Path, transform: &Path, base: Option<&Path>, out: &Path) -> Res<()> {
    let m = read_plane(mask)?;
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let flow = flow_for(transform, Some(mask), base, h, w)?;
    write_bytes(out, flow.to_bytes())?;
    println!("RESULT flow={}x{}", h, w);
    Ok(())
}

fn generate(config: Option<&Path>, ck: &Path, image: &Path, transform: &Path, openness: f64, out: &Path) -> Res<()> {
    let model = Model::new(read_config(config)?)?;
    let bytes = fs::read(ck).map_err(|source| CliError::Io { path: ck.into(), source })?;
    let params = with_path(ck, params_from_checkpoint(&model, &bytes))?;
    let src = read_image(image)?;
    let t = read_transform(transform)?;
    if !(0.0..=1.0).contains(&openness) {
        return Err(CliError::Invalid(format!("--openness must lie in [0, 1], got {openness}")));
    }
    let code: ExpressionFeature = expression_code(openness);
    let img = model.generate(&params, &src, &t, &code)?;
    write_pnm(out, &img)?;
    println!("RESULT generated={}x{}", img.shape()[1], img.shape()[2]);
    Ok(())
}

fn train(config: Option<&Path>, steps: Option<usize>, seed: Option<u64>, out: &Path, csv: Option<&Path>) -> Res<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = Model::new(cfg)?;
    let cfg = model.config().clone();
    let (train_set, held) = build_datasets(&model)?;
    let mut state = TrainState::new(model.init_params(cfg.seed));
    let start = Instant::now();
    let every = (cfg.steps / 20).max(1) as u64;
    train_steps(&model, &mut state, &train_set, cfg.steps, None, |k, l| {
        if k % every == 0 {
            eprintln!("step {k} loss {l:.5} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    })?;
    write_bytes(out, params_to_checkpoint(&state.params)?)?;
    if let Some(p) = csv {
        write_bytes(p, state.loss_csv())?;
    }
    let last = state.loss_history.last().copied().unwrap_or(f64::NAN);
    println!("RESULT steps={}", cfg.steps);
    println!("RESULT final_loss={}", fmt_num(last));
    if !held.is_empty() {
        let (psnr, l1) = evaluate(&model, &state.params, &held)?;
        println!("RESULT heldout_psnr={}", fmt_num(psnr));
        println!("RESULT heldout_l1={}", fmt_num(l1));
    }
    Ok(())
}

fn grad_check(o: GradCheckOptions, out: Option<&Path>) -> Res<()> {
    let report = run_grad_check(&o)?;
    for op in &report.ops {
        println!(
            "RESULT op={} worst_rel_error={} threshold={} passed={}",
            op.op,
            fmt_num(op.worst_rel_error),
            fmt_num(op.threshold),
            op.passed
        );
    }
    if let Some(p) = out {
        let mut s = serde_json::to_string_pretty(&report).map_err(motionkit::Error::from)?;
        s.push('\n');
        write_bytes(p, s)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {}", report.failing().join(", "))))
    }
}

fn bench(seed: u64, spec: Option<&Path>, scenes: usize, dump: Option<&Path>) -> Res<()> {
    let spec = match spec {
        Some(p) => {
            let s: SceneSpec = serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
            s
        }
        None => SceneSpec::default(),
    };
    if let Some(d) = dump {
        fs::create_dir_all(d).map_err(|source| CliError::Io { path: d.into(), source })?;
    }
    let start = Instant::now();
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    for i in 0..scenes {
        let s = render_scene(seed.wrapping_add(i as u64), &spec)?;
        let flow = coarse_flow(&s.transform, spec.size, spec.size)?;
        let warped = warp_features(&s.source, &flow)?;
        // Score pose only; the driving frame may also differ in eye openness.
        let target = s.driving_with_openness(s.source_openness);
        let p = interior_psnr(&warped, &target, 0.1)?;
        let q = ssim(&warped, &target)?;
        sum_psnr += p;
        sum_ssim += q;
        println!("RESULT scene={i} gt_warp_psnr={} gt_warp_ssim={}", fmt_num(p), fmt_num(q));
        if let Some(d) = dump {
            write_pnm(&d.join(format!("scene{i}_source.ppm")), &s.source)?;
            write_pnm(&d.join(format!("scene{i}_driving.ppm")), &s.driving)?;
            write_bytes(&d.join(format!("scene{i}_transform.json")), s.transform.to_json())?;
        }
    }
    if scenes > 0 {
        println!("RESULT mean_psnr={}", fmt_num(sum_psnr / scenes as f64));
        println!("RESULT mean_ssim={}", fmt_num(sum_ssim / scenes as f64));
    }
    eprintln!("rendered and scored {scenes} scenes in {:.3}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn accept(suite: &str, seed: u64, out: Option<&Path>) -> Res<()> {
    let suite = Suite::parse(suite).ok_or_else(|| {
        CliError::Invalid(format!("unknown suite {suite:?}; expected all, geometry, flow, modconv or pipeline"))
    })?;
    let opts = AcceptanceOptions {
        seed,
        ..AcceptanceOptions::default()
    };
    let report = run_acceptance(suite, &opts, &mut |id, msg| eprintln!("[{id}] {msg}"))?;
    for c in &report.criteria {
        println!("RESULT criterion={} name={} passed={}", c.id, c.name, c.passed);
    }
    if let Some(p) = out {
        let mut s = report.to_json();
        s.push('\n');
        write_bytes(p, s)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<String> = report.criteria.iter().filter(|c| !c.passed).map(|c| c.id.to_string()).collect();
        Err(CliError::Failed(format!("acceptance failed: criteria {}", failed.join(", "))))
    }
}

fn configure_threads() -> Res<()> {
    let Ok(v) = std::env::var("DISCO_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("DISCO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Res<()> {
    configure_threads()?;
    match cli.command {
        Command::FitTps { src, dst, reg, out } => fit_tps(&src, &dst, reg, &out),
        Command::ExtractAffine { heatmap, driving, eps_cov, out } => extract_affine(&heatmap, driving.as_deref(), eps_cov, &out),
        Command::Warp { image, transform, out, mask } => warp(&image, &transform, &out, mask.as_deref()),
        Command::Compose { mask, transform, base, out } => compose(&mask, &transform, base.as_deref(), &out),
        Command::Generate { config, checkpoint, image, transform, openness, out } => {
            generate(config.as_deref(), &checkpoint, &image, &transform, openness, &out)
        }
        Command::Train { config, steps, seed, out, loss_csv } => train(config.as_deref(), steps, seed, &out, loss_csv.as_deref()),
        Command::GradCheck { seed, size, instances, ops_only, out, perturb_vjp } => {
            let perturb = match perturb_vjp.as_deref() {
                None => None,
                Some(s) => Some(Perturb::parse(s).ok_or_else(|| CliError::Invalid(format!("unknown VJP {s:?}")))?),
            };
            let o = GradCheckOptions {
                seed,
                size,
                instances,
                include_pipeline: !ops_only,
                perturb,
                ..GradCheckOptions::default()
            };
            grad_check(o, out.as_deref())
        }
        Command::Bench { seed, spec, scenes, dump } => bench(seed, spec.as_deref(), scenes, dump.as_deref()),
        Command::Accept { suite, seed, out } => accept(&suite, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
