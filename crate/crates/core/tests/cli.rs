//! End-to-end runs of the `laffnet` subcommands through `cli::run`.

use std::path::Path;

use laffnet::cli::{self, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use laffnet::metrics::MetricsReport;
use laffnet::synth::{read_manifest, CLEAN_DIR, DEGRADED_DIR};
use laffnet::trainer::read_log;
use laffnet::Image;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn laff(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let full: Vec<&str> = std::iter::once("laffnet").chain(args.iter().copied()).collect();
    let code = cli::run(full, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn analyze_prints_the_ledger() {
    let r = laff(&["analyze", "--width", "16", "--resolution", "256x256"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("19456"));
    assert!(r.stdout.contains("9.771"));

    let small = laff(&["analyze", "--width", "4"]);
    assert_eq!(small.code, EXIT_OK);
    assert!(small.stdout.contains("1216"));

    let j = laff(&["analyze", "--json"]);
    assert_eq!(j.code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&j.stdout).unwrap();
    assert_eq!(v["params_no_bias"], 199_520);
    let items: u64 = v["items"].as_array().unwrap().iter().map(|i| i["params_no_bias"].as_u64().unwrap()).sum();
    assert_eq!(items, 199_520);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(laff(&["analyze", "--resolution", "256by256"]).code, EXIT_USAGE);
    assert_eq!(laff(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(laff(&[]).code, EXIT_USAGE);
    assert_eq!(laff(&["gradcheck", "--module", "everything"]).code, EXIT_USAGE);
    assert_eq!(laff(&["--help"]).code, EXIT_OK);
}

#[test]
fn synth_is_deterministic_and_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let r = laff(&["synth", "--n", "4", "--size", "64x64", "--seed", "3", "--out", s(d)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(read_manifest(&a).unwrap().len(), 4);
    assert_eq!(std::fs::read_dir(a.join(DEGRADED_DIR)).unwrap().count(), 4);

    let flat = tmp.path().join("flat");
    let r = laff(&["synth", "--n", "2", "--size", "16", "--out", s(&flat), "--set", "ranges.z=[0.0,0.0]"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    for rec in read_manifest(&flat).unwrap() {
        let d = Image::load(&flat.join(DEGRADED_DIR).join(&rec.filename)).unwrap();
        let c = Image::load(&flat.join(CLEAN_DIR).join(&rec.filename)).unwrap();
        assert_eq!(d, c);
    }
}

#[test]
fn synth_into_unwritable_location_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let r = laff(&["synth", "--n", "1", "--size", "8", "--out", s(&file.join("sub"))]);
    assert_eq!(r.code, EXIT_RUNTIME);
}

#[test]
fn eval_modes_and_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(laff(&["synth", "--n", "3", "--size", "24", "--out", s(&data)]).code, EXIT_OK);

    let report = tmp.path().join("pairs.json");
    let r = laff(&["eval", "--pairs", s(&data), "--report", s(&report)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["schema"], 1);
    assert!(report.with_extension("txt").exists());

    let same = tmp.path().join("same.json");
    let clean = data.join(CLEAN_DIR);
    let r = laff(&["eval", "--enhanced", s(&clean), "--reference", s(&clean), "--report", s(&same)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rep: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&same).unwrap()).unwrap();
    for img in &rep.images {
        assert_eq!(img.psnr, Some(99.0));
        assert!((img.ssim.unwrap() - 1.0).abs() < 1e-12);
    }

    let nr = tmp.path().join("nr.json");
    let r = laff(&["eval", "--enhanced", s(&clean), "--no-reference", "--report", s(&nr)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rep: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&nr).unwrap()).unwrap();
    assert!(rep.images.iter().all(|i| i.psnr.is_none() && i.ssim.is_none()));
    assert!(!rep.summary.contains_key("psnr"));
    assert!(rep.summary.contains_key("uiqm"));

    // one reference removed: pair counts differ
    let partial = tmp.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&clean).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for p in &names[1..] {
        std::fs::copy(p, partial.join(p.file_name().unwrap())).unwrap();
    }
    let r = laff(&["eval", "--enhanced", s(&clean), "--reference", s(&partial), "--report", s(&tmp.path().join("bad.json"))]);
    assert_eq!(r.code, EXIT_RUNTIME);
    assert!(r.stderr.contains(names[0].file_name().unwrap().to_str().unwrap()), "{}", r.stderr);

    assert_eq!(laff(&["eval", "--enhanced", s(&clean), "--report", s(&nr)]).code, EXIT_USAGE);
}

#[test]
fn train_resume_and_enhance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(laff(&["synth", "--n", "2", "--size", "12", "--seed", "1", "--out", s(&data)]).code, EXIT_OK);

    let common = ["--width", "2", "--batch-size", "2", "--set", "val_every=0"];
    let full = tmp.path().join("full");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&full), "--max-steps", "4"];
    args.extend(common);
    let r = laff(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("val psnr"));

    let part = tmp.path().join("part");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&part), "--max-steps", "2"];
    args.extend(common);
    assert_eq!(laff(&args).code, EXIT_OK);
    let ck = part.join(cli::MODEL_FILE);
    let r = laff(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&ck), "--max-steps", "4"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);

    let a = std::fs::read(full.join(cli::MODEL_FILE)).unwrap();
    let b = std::fs::read(&ck).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from the uninterrupted one");

    let log = std::fs::read_to_string(part.join(cli::LOG_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["model"]["width"], 2);
    let (steps, _) = read_log(&part.join(cli::LOG_FILE)).unwrap();
    assert_eq!(steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);

    // config file beats defaults, flags beat the file
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "batch_size = 1\nmax_steps = 1\nval_every = 0\n[loss.weights]\nssim = 0.0\n[model]\nwidth = 3\n").unwrap();
    let over = tmp.path().join("over");
    let r = laff(&["train", "--data", s(&data), "--out", s(&over), "--config", s(&cfg), "--width", "2"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let log = std::fs::read_to_string(over.join(cli::LOG_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["model"]["width"], 2);
    assert_eq!(first["config"]["batch_size"], 1);
    assert_eq!(first["config"]["loss"]["weights"]["ssim"], 0.0);

    // enhance a folder twice: one output per decodable input, byte-identical
    let inputs = data.join(DEGRADED_DIR);
    std::fs::write(inputs.join("broken.png"), b"not a png").unwrap();
    let before = dir_bytes(&inputs);
    let (o1, o2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for o in [&o1, &o2] {
        let r = laff(&["enhance", "--model", s(&ck), "--in", s(&inputs), "--out", s(o)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    }
    assert_eq!(dir_bytes(&inputs), before, "enhance modified its inputs");
    let outs = dir_bytes(&o1);
    assert_eq!(outs.len(), 2);
    assert_eq!(outs, dir_bytes(&o2));

    // single file in, single file out
    let single = tmp.path().join("one.ppm");
    let first_input = &before.iter().find(|(n, _)| n != "broken.png").unwrap().0;
    let r = laff(&["enhance", "--model", s(&ck), "--in", s(&inputs.join(first_input)), "--out", s(&single)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(Image::load(&single).unwrap().width, 12);
}

#[test]
fn train_failures_are_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(empty.join(DEGRADED_DIR)).unwrap();
    std::fs::create_dir_all(empty.join(CLEAN_DIR)).unwrap();
    let r = laff(&["train", "--data", s(&empty), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.code, EXIT_RUNTIME);

    let data = tmp.path().join("data");
    assert_eq!(laff(&["synth", "--n", "1", "--size", "12", "--out", s(&data)]).code, EXIT_OK);
    let m = tmp.path().join("m");
    let r = laff(&["train", "--data", s(&data), "--out", s(&m), "--width", "2", "--batch-size", "1", "--max-steps", "1", "--set", "val_every=0"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    // truncated checkpoint: enhance reports it and writes nothing
    let ck = m.join(cli::MODEL_FILE);
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let out = tmp.path().join("never");
    let r = laff(&["enhance", "--model", s(&ck), "--in", s(&data.join(DEGRADED_DIR)), "--out", s(&out)]);
    assert_eq!(r.code, EXIT_RUNTIME);
    assert!(r.stderr.contains("truncated"), "{}", r.stderr);
    assert!(!out.exists());
}

#[test]
fn gradcheck_aff_and_losses_pass() {
    for module in ["aff", "losses"] {
        let a = laff(&["gradcheck", "--module", module, "--seed", "7"]);
        assert_eq!(a.code, EXIT_OK, "{}{}", a.stdout, a.stderr);
        let b = laff(&["gradcheck", "--module", module, "--seed", "7"]);
        assert_eq!(a.stdout, b.stdout);
    }
}
