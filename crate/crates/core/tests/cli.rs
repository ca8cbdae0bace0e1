use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motionkit::flow::{identity_flow, FlowField};
use motionkit::geometry::Transform;
use motionkit::pnm::{decode_pnm, encode_pnm, read_pnm};
use motionkit::synthbench::{gaussian_heatmap, interior_psnr};
use motionkit::tensor::Tensor;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motionkit"));
    c.env_remove("DISCO_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn result_value(o: &Output, key: &str) -> f64 {
    let prefix = format!("RESULT {key}=");
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} in {}", stdout(o)))
        .parse()
        .unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = p(dir, name);
    fs::write(&path, text).unwrap();
    path
}

const TINY_CONFIG: &str = r#"{"image_size":16,"encoder_widths":[4,4,4],"projection_layers":1,
"feature_channels":4,"residual_blocks":1,"decoder_widths":[4,4,3],"output_kernel":3,
"batch_size":2,"steps":3,"dataset_size":4,"heldout_size":2}"#;

#[test]
fn fit_tps_identity_has_zero_residual_and_weights() {
    let d = TempDir::new().unwrap();
    let pts = write(&d, "p.json", "[[-0.5,-0.5],[0.5,-0.5],[0.5,0.5],[-0.5,0.5],[0.1,0.2]]");
    let out = p(&d, "tps.json");
    let o = run(&["fit-tps", "--src", &pts, "--dst", &pts, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(result_value(&o, "max_residual") < 1e-12);
    assert!(result_value(&o, "max_weight") < 1e-12);
    assert!(matches!(Transform::from_json(&fs::read_to_string(&out).unwrap()).unwrap(), Transform::Tps(_)));
}

#[test]
fn fit_tps_random_pairs_interpolate() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "s.json", r#"{"points":[[-0.7,-0.2],[0.3,-0.8],[0.6,0.4],[-0.1,0.7],[0.05,0.0]]}"#);
    let dst = write(&d, "t.json", "[[-0.6,-0.25],[0.35,-0.7],[0.5,0.45],[-0.2,0.6],[0.1,0.05]]");
    let o = run(&["fit-tps", "--src", &src, "--dst", &dst, "--out", &p(&d, "o.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(result_value(&o, "max_residual") < 1e-8);
    assert!(result_value(&o, "side_condition") < 1e-8);
}

#[test]
fn fit_tps_rejects_mismatch_and_coincident_points() {
    let d = TempDir::new().unwrap();
    let a = write(&d, "a.json", "[[0,0],[1,0],[0,1]]");
    let b = write(&d, "b.json", "[[0,0],[1,0],[0,1],[1,1]]");
    let o = run(&["fit-tps", "--src", &a, "--dst", &b, "--out", &p(&d, "o.json")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("count"), "{}", stderr(&o));
    assert!(!d.path().join("o.json").exists());

    let c = write(&d, "c.json", "[[0,0],[0,0],[1,0],[0,1]]");
    let o = run(&["fit-tps", "--src", &c, "--dst", &c, "--out", &p(&d, "o.json")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("keypoints 0 and 1"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_suites_exit_2() {
    assert_eq!(run(&["warp", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let o = run(&["accept", "--suite", "everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown suite"));
    let o = bin().env("DISCO_THREADS", "zero").args(["grad-check", "--ops-only"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identity_warp_is_bit_exact() {
    let d = TempDir::new().unwrap();
    let img = Tensor::from_fn(&[3, 9, 7], |i| ((i * 37) % 256) as f64 / 255.0);
    let input = p(&d, "in.ppm");
    fs::write(&input, encode_pnm(&img).unwrap()).unwrap();
    let t = write(&d, "t.json", r#"{"type":"affine","linear":[[1,0],[0,1]],"translation":[0,0]}"#);
    let out = p(&d, "out.ppm");
    let o = run(&["warp", "--image", &input, "--transform", &t, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&out).unwrap());

    // A zero mask keeps the identity flow whatever the transform.
    let shift = write(&d, "s.json", r#"{"type":"affine","linear":[[1,0],[0,1]],"translation":[0.3,-0.1]}"#);
    let mask = p(&d, "m.pgm");
    fs::write(&mask, encode_pnm(&Tensor::zeros(&[1, 9, 7])).unwrap()).unwrap();
    let masked = p(&d, "masked.ppm");
    let o = run(&["warp", "--image", &input, "--transform", &shift, "--mask", &mask, "--out", &masked]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&masked).unwrap());
}

#[test]
fn corrupt_image_reports_bad_magic() {
    let d = TempDir::new().unwrap();
    let bad = write(&d, "bad.ppm", "Q6\n2 2\n255\n0000");
    let t = write(&d, "t.json", r#"{"type":"affine","linear":[[1,0],[0,1]],"translation":[0,0]}"#);
    let o = run(&["warp", "--image", &bad, "--transform", &t, "--out", &p(&d, "o.ppm")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
    assert!(stderr(&o).contains("byte 0"), "{}", stderr(&o));
}

#[test]
fn warping_a_dumped_scene_matches_its_driving_frame() {
    let d = TempDir::new().unwrap();
    let dir = p(&d, "scenes");
    let spec = write(
        &d,
        "spec.json",
        r#"{"rotation_deg":[0,0],"scale":[1,1],"translation_x":[0.2,0.2],"translation_y":[0,0],"openness":[1,1]}"#,
    );
    let o = run(&["bench", "--spec", &spec, "--scenes", "2", "--dump", &dir]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(result_value(&o, "mean_psnr") > 30.0);
    for i in 0..2 {
        let src = format!("{dir}/scene{i}_source.ppm");
        let t = format!("{dir}/scene{i}_transform.json");
        let out = p(&d, &format!("w{i}.ppm"));
        let o = run(&["warp", "--image", &src, "--transform", &t, "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        let warped = read_pnm(Path::new(&out)).unwrap();
        let driving = read_pnm(Path::new(&format!("{dir}/scene{i}_driving.ppm"))).unwrap();
        assert!(interior_psnr(&warped, &driving, 0.1).unwrap() > 30.0);
    }
}

#[test]
fn extract_affine_recovers_heatmap_mean() {
    let d = TempDir::new().unwrap();
    let h = gaussian_heatmap(33, [0.25, -0.125], [[0.02, 0.0], [0.0, 0.02]]).unwrap();
    let v = h.values();
    let max = v.data().iter().cloned().fold(0.0, f64::max);
    let img = Tensor::from_vec(&[1, 33, 33], v.data().iter().map(|x| x / max).collect()).unwrap();
    let path = p(&d, "h.pgm");
    fs::write(&path, encode_pnm(&img).unwrap()).unwrap();
    let out = p(&d, "a.json");
    let o = run(&["extract-affine", "--heatmap", &path, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let Transform::Affine(a) = Transform::from_json(&fs::read_to_string(&out).unwrap()).unwrap() else {
        panic!("expected affine");
    };
    assert!((a.translation[0] - 0.25).abs() < 1e-2 && (a.translation[1] + 0.125).abs() < 1e-2);

    // Relative affine of a heatmap against itself is the identity.
    let o = run(&["extract-affine", "--heatmap", &path, "--driving", &path, "--out", &out]);
    assert!(o.status.success());
    let Transform::Affine(r) = Transform::from_json(&fs::read_to_string(&out).unwrap()).unwrap() else {
        panic!("expected affine");
    };
    assert!((r.linear[0][0] - 1.0).abs() < 1e-12 && r.translation[0].abs() < 1e-12);
}

#[test]
fn compose_with_zero_mask_gives_identity_flow() {
    let d = TempDir::new().unwrap();
    let mask = p(&d, "m.pgm");
    fs::write(&mask, encode_pnm(&Tensor::zeros(&[1, 4, 5])).unwrap()).unwrap();
    let t = write(&d, "t.json", r#"{"type":"affine","linear":[[0,-1],[1,0]],"translation":[0.1,0]}"#);
    let out = p(&d, "f.dflw");
    let o = run(&["compose", "--mask", &mask, "--transform", &t, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"DFLW");
    assert_eq!(FlowField::from_bytes(&bytes).unwrap(), identity_flow(4, 5).unwrap());

    // Full mask reproduces the transform's own flow; base flows are accepted.
    fs::write(&mask, encode_pnm(&Tensor::full(&[1, 4, 5], 1.0)).unwrap()).unwrap();
    let base = p(&d, "base.dflw");
    fs::write(&base, identity_flow(4, 5).unwrap().to_bytes()).unwrap();
    let o = run(&["compose", "--mask", &mask, "--transform", &t, "--base", &base, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = FlowField::from_bytes(&fs::read(&out).unwrap()).unwrap();
    let tr = Transform::from_json(&fs::read_to_string(&t).unwrap()).unwrap();
    let want = motionkit::flow::coarse_flow(&tr, 4, 5).unwrap();
    assert_eq!(f, want);
}

#[test]
fn grad_check_passes_is_deterministic_and_catches_perturbation() {
    let d = TempDir::new().unwrap();
    let (a, b) = (p(&d, "a.json"), p(&d, "b.json"));
    let o1 = run(&["grad-check", "--seed", "42", "--out", &a]);
    assert!(o1.status.success(), "{}{}", stdout(&o1), stderr(&o1));
    for line in stdout(&o1).lines().filter(|l| l.starts_with("RESULT op=") && !l.contains("pipeline")) {
        let err: f64 = line.split("worst_rel_error=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!(err < 1e-5, "{line}");
    }
    let o2 = run(&["grad-check", "--seed", "42", "--out", &b]);
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let o = run(&["grad-check", "--ops-only", "--perturb-vjp", "modconv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("modconv"), "{}", stderr(&o));
}

#[test]
fn train_and_generate_are_deterministic() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "cfg.json", TINY_CONFIG);
    let mut outputs = vec![];
    for k in 0..2 {
        let ck = p(&d, &format!("ck{k}.bin"));
        let csv = p(&d, &format!("loss{k}.csv"));
        let o = bin()
            .env("DISCO_THREADS", "2")
            .args(["train", "--config", &cfg, "--seed", "5", "--out", &ck, "--loss-csv", &csv])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(result_value(&o, "heldout_psnr") > 0.0);
        let lines: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
        assert_eq!(lines[0], "step,loss");
        assert_eq!(lines.len(), 4);
        outputs.push((fs::read(&ck).unwrap(), lines, stdout(&o)));
    }
    assert_eq!(outputs[0], outputs[1]);

    let src = p(&d, "src.ppm");
    fs::write(&src, encode_pnm(&Tensor::full(&[3, 16, 16], 0.4)).unwrap()).unwrap();
    let t = write(&d, "t.json", r#"{"type":"affine","linear":[[1,0],[0,1]],"translation":[0.1,0]}"#);
    let mut gens = vec![];
    for k in 0..2 {
        let out = p(&d, &format!("g{k}.ppm"));
        let o = run(&[
            "generate", "--config", &cfg, "--checkpoint", &p(&d, "ck0.bin"), "--image", &src, "--transform", &t,
            "--openness", "0.5", "--out", &out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        gens.push(fs::read(&out).unwrap());
    }
    assert_eq!(gens[0], gens[1]);
    assert_eq!(decode_pnm(&gens[0]).unwrap().shape(), &[3, 16, 16]);

    // A checkpoint from a different architecture is rejected.
    let other = write(&d, "other.json", &TINY_CONFIG.replace("\"feature_channels\":4", "\"feature_channels\":5"));
    let o = run(&[
        "generate", "--config", &other, "--checkpoint", &p(&d, "ck0.bin"), "--image", &src, "--transform", &t,
        "--out", &p(&d, "x.ppm"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn accept_geometry_suite_writes_report() {
    let d = TempDir::new().unwrap();
    let (a, b) = (p(&d, "r1.json"), p(&d, "r2.json"));
    let o = run(&["accept", "--suite", "geometry", "--out", &a]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let ids: Vec<u64> = v["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 2]);
    assert!(run(&["accept", "--suite", "geometry", "--out", &b]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
