use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geosurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosurf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

/// Writes a dataset and a short-run config; returns the config path.
fn setup(root: &Path, steps: u64) -> std::path::PathBuf {
    let data = root.join("data");
    assert!(geosurf(&[
        "synth",
        "--n",
        "10",
        "--size",
        "16",
        "--seed",
        "4",
        "--out",
        p(&data)
    ])
    .status
    .success());
    let cfg = root.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "dataset=data\nout_dir={}\nsteps={steps}\neval_samples=4\neval_paths=2\neval_k=4\n",
            p(&root.join("out"))
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(geosurf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        geosurf(&["gradcheck", "--target", "nope"]).status.code(),
        Some(2)
    );
    assert_eq!(geosurf(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = geosurf(&["train", "--config", p(&dir.path().join("missing.cfg"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(
        &cfg,
        format!(
            "dataset={}\nout_dir={}\n",
            p(&empty),
            p(&dir.path().join("o"))
        ),
    )
    .unwrap();
    let out = geosurf(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no images found"));
}

#[test]
fn gradcheck_all_passes() {
    let out = geosurf(&["gradcheck", "--target", "all"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(stdout.matches("PASS").count(), 10, "{stdout}");
}

#[test]
fn zero_step_training_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 0);
    let out = geosurf(&["train", "--config", p(&cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir
        .path()
        .join("out/checkpoints/step_000000/manifest.txt")
        .exists());
}

#[test]
fn train_interpolate_metrics_are_deterministic_and_leave_data_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 3);
    let before = listing(&dir.path().join("data"));
    let out = geosurf(&["train", "--config", p(&cfg), "--override", "seed=5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(listing(&dir.path().join("data")), before);
    let ckpt = dir.path().join("out/checkpoints/step_000003");
    assert!(ckpt.exists());

    let a = dir.path().join("interp_a");
    let b = dir.path().join("interp_b");
    for d in [&a, &b] {
        let out = geosurf(&[
            "interpolate",
            "--checkpoint",
            p(&ckpt),
            "--k",
            "5",
            "--seed",
            "9",
            "--out",
            p(d),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let la = listing(&a);
    assert_eq!(la.len(), 6);
    assert_eq!(la, listing(&b));

    let csv = dir.path().join("m.csv");
    let out = geosurf(&[
        "metrics",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&dir.path().join("data")),
        "--samples",
        "4",
        "--out",
        p(&csv),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert!(
        text.starts_with("step,diversity,ffd,smoothness\n3,"),
        "{text}"
    );
}

#[test]
fn resume_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    assert!(geosurf(&["train", "--config", p(&cfg)]).status.success());
    let ckpt = dir.path().join("out/checkpoints/step_000002");
    let out = geosurf(&[
        "train",
        "--config",
        p(&cfg),
        "--override",
        "steps=3",
        "--resume",
        p(&ckpt),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let losses = fs::read_to_string(dir.path().join("out/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);
}

#[test]
fn augment_emits_deterministic_pseudo_sources() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("feats");
    fs::create_dir(&feats).unwrap();
    for i in 0..3u8 {
        let mut bytes = b"GSL1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for e in [2u64, 2, 2] {
            bytes.extend_from_slice(&e.to_le_bytes());
        }
        for j in 0..8u8 {
            let v = ((i * 8 + j) as f64 * 0.7).sin();
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(feats.join(format!("f{i}.gsl1")), bytes).unwrap();
    }
    let run = |out: &Path| {
        let o = geosurf(&[
            "augment",
            "--features",
            p(&feats),
            "--n",
            "4",
            "--alpha",
            "1",
            "--seed",
            "3",
            "--out",
            p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        listing(out)
    };
    let a = run(&dir.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, run(&dir.path().join("b")));
}
