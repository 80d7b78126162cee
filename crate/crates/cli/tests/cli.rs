use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bws_core::dataio::pgm::{read_f64_raw, read_labels};
use bws_core::dataio::layout::read_images;
use bws_core::networks::SegParams;
use bws_core::params::ParamStore;
use bws_core::pipeline::single_pass_infer;

fn bws(args: &[&str]) -> Output {
    bws_env(args, &[])
}

fn bws_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bws"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn bws")
}

fn ok(args: &[&str]) -> Output {
    let out = bws(args);
    assert!(out.status.success(), "bws {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dataset(root: &Path) {
    ok(&["simulate", "--out-dir", p(root), "--train", "4", "--val", "1", "--test", "2", "--seed", "3"]);
}

#[test]
fn gradcheck_passes_for_seed_7() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seed", "7", "--out-dir", p(dir.path())]);
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let err: f64 = cols[1].parse().unwrap();
        assert!(err < 1e-5, "{row}");
        assert_eq!(cols[3], "pass");
    }
    assert!(dir.path().join("manifest.txt").exists());
}

#[test]
fn single_deterministic_pass_matches_library_forward() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let seg = dir.path().join("seg");
    ok(&["train-seg", "--data", p(&data), "--supervision", "dense", "--epochs", "1", "--batch", "2", "--out-dir", p(&seg)]);
    let ckpt = seg.join("segmenter.ckpt");
    for t in ["1", "4"] {
        let inf = dir.path().join(format!("inf{t}"));
        ok(&["infer", "--data", p(&data), "--model", p(&ckpt), "--t", t, "--dropout", "0", "--out-dir", p(&inf)]);
        let store = ParamStore::<f64>::from_checkpoint_bytes(&fs::read(&ckpt).unwrap(), &ckpt).unwrap();
        let net = SegParams::from_store(store, 0.0).unwrap();
        for (id, image) in read_images(&data, "test").unwrap() {
            let (probs, unc) = single_pass_infer(&net, &image).unwrap();
            assert_eq!(read_labels(&inf.join("pred").join(format!("{id}.pgm"))).unwrap(), probs.argmax());
            assert_eq!(read_f64_raw(&inf.join("uncertainty").join(format!("{id}.f64"))).unwrap(), unc.data);
        }
    }
}

fn stage1_artifacts(dir: &Path, data: &Path, threads: &str) -> (Vec<u8>, Vec<u8>, Vec<Vec<u8>>) {
    let env = [("BWS_THREADS", threads)];
    let gen = dir.join("gen");
    let args = ["train-gen", "--data", p(data), "--epochs", "2", "--batch", "2", "--crf-crop", "8", "--out-dir", p(&gen)];
    assert!(bws_env(&args, &env).status.success());
    let pl = dir.join("pl");
    let ckpt = gen.join("generator.ckpt");
    assert!(bws_env(&["pseudo-label", "--data", p(data), "--model", p(&ckpt), "--out-dir", p(&pl)], &env).status.success());
    let mut labels: Vec<_> = fs::read_dir(pl.join("pseudo")).unwrap().map(|e| e.unwrap().path()).collect();
    labels.sort();
    (fs::read(gen.join("stage1_log.csv")).unwrap(), fs::read(ckpt).unwrap(), labels.iter().map(|l| fs::read(l).unwrap()).collect())
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let a = stage1_artifacts(&dir.path().join("a"), &data, "1");
    let b = stage1_artifacts(&dir.path().join("b"), &data, "3");
    assert_eq!(a, b);
    assert_eq!(a.2.len(), 4);
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# stage 1\nepochs=3\nlr=0.002\nbatch=4\n").unwrap();
    let out = dir.path().join("gen");
    ok(&["train-gen", "--config", p(&cfg), "--data", p(&data), "--epochs", "1", "--crf-crop", "8", "--out-dir", p(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for line in ["config.epochs=1", "config.lr=0.002", "config.batch=4", "config.alpha=0.001", "command=train-gen"] {
        assert!(manifest.lines().any(|l| l == line), "missing {line} in\n{manifest}");
    }
    assert!(manifest.contains("artifact.") && manifest.contains("generator.ckpt=sha256:"));
    // One epoch of four images at batch 4: a single logged step.
    assert_eq!(fs::read_to_string(out.join("stage1_log.csv")).unwrap().lines().count(), 2);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(bws(&["eval", "--data", p(&missing), "--pred", p(&missing), "--out-dir", p(dir.path())]).status.code(), Some(3));
    assert_eq!(bws(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bws(&["train-gen", "--data", p(&missing), "--lr", "-1", "--out-dir", p(dir.path())]).status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs=2\nwarmup=5\n").unwrap();
    let out = bws(&["train-gen", "--config", p(&cfg), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("bad.cfg:2") && err.contains("warmup"), "{err}");

    let data = dir.path().join("data");
    tiny_dataset(&data);
    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"BWSCKPT\0garbage").unwrap();
    let out = bws(&["infer", "--data", p(&data), "--model", p(&ckpt), "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}
