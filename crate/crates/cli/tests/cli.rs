use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "steps = 30
ae_hidden = 8
decoder_layers = 2
denoiser_hidden = 8
denoiser_layers = 2
ae_iterations = 20
ldm_iterations = 20
es_warmup = 10
synthetic_count = 24
batch_size = 8
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geolatent"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Temp dir holding the tiny config, a synthetic dataset and both checkpoints.
fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let p = dir.path();
    for args in [
        &[
            "--config",
            "run.toml",
            "--seed",
            "7",
            "gen-synthetic",
            "--out",
            "data.xyz",
        ][..],
        &[
            "--config", "run.toml", "--seed", "7", "train-ae", "--data", "data.xyz", "--out",
            "ae.ckpt",
        ],
        &[
            "--config",
            "run.toml",
            "--seed",
            "7",
            "train-ldm",
            "--data",
            "data.xyz",
            "--ae",
            "ae.ckpt",
            "--out",
            "ldm.ckpt",
        ],
    ] {
        let o = run(p, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    dir
}

#[test]
fn check_passes_and_prints_summary() {
    let o = run(Path::new("."), &["check", "--quick"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out
        .lines()
        .any(|l| l.starts_with("PASS equivariance.encoder")));
    let summary = out
        .lines()
        .find_map(|l| l.strip_prefix("summary "))
        .expect("summary line");
    let v: serde_json::Value = serde_json::from_str(summary).unwrap();
    assert_eq!(v["failed"], 0);
}

#[test]
fn check_fails_under_fault_injection() {
    let o = run(
        Path::new("."),
        &["check", "--quick", "--inject-fault", "cog"],
    );
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("equivariance.encoder"),
        "{}",
        stderr(&o)
    );
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL")));
}

#[test]
fn gen_synthetic_is_seeded_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for name in ["a.xyz", "b.xyz"] {
        assert_eq!(
            code(&run(
                p,
                &[
                    "--seed",
                    "3",
                    "gen-synthetic",
                    "--count",
                    "15",
                    "--out",
                    name
                ]
            )),
            0
        );
    }
    assert_eq!(
        code(&run(
            p,
            &[
                "--seed",
                "4",
                "gen-synthetic",
                "--count",
                "15",
                "--out",
                "c.xyz"
            ]
        )),
        0
    );
    let a = std::fs::read_to_string(p.join("a.xyz")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("b.xyz")).unwrap());
    assert_ne!(a, std::fs::read_to_string(p.join("c.xyz")).unwrap());
    let records = geolatent::data::parse_xyz(&a, &Default::default()).unwrap();
    assert_eq!(records.len(), 15);
    assert!(records.iter().all(|m| m.label.is_some()));

    assert_eq!(
        code(&run(
            p,
            &[
                "--seed",
                "3",
                "gen-synthetic",
                "--count",
                "15",
                "--out",
                "m.txt"
            ]
        )),
        0
    );
    let m = geolatent::data::read_dataset(&p.join("m.txt"), &Default::default()).unwrap();
    assert_eq!(m.len(), 15);
}

#[test]
fn gen_synthetic_accepts_template_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "gen-synthetic",
            "--templates",
            fixture("stable.xyz").to_str().unwrap(),
            "--count",
            "30",
            "--out",
            "d.xyz",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ms = geolatent::data::read_xyz(&dir.path().join("d.xyz"), &Default::default()).unwrap();
    let labels: std::collections::BTreeSet<_> = ms.iter().filter_map(|m| m.label.clone()).collect();
    assert!(
        labels.len() > 1
            && labels.iter().all(
                |l| ["hf", "water", "methane", "ammonia", "formaldehyde"].contains(&l.as_str())
            )
    );
}

#[test]
fn training_is_reproducible_and_logged() {
    let dir = trained();
    let p = dir.path();
    let o = run(
        p,
        &[
            "--config", "run.toml", "--seed", "7", "train-ae", "--data", "data.xyz", "--out",
            "ae2.ckpt",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(p.join("ae.ckpt")).unwrap(),
        std::fs::read(p.join("ae2.ckpt")).unwrap()
    );
    let log = std::fs::read_to_string(p.join("ae.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    assert!(p.join("ldm.log.tsv").exists());
    assert_eq!(
        &std::fs::read(p.join("ldm.ckpt")).unwrap()[..8],
        b"GLDMCKPT"
    );
}

#[test]
fn train_ldm_refuses_mismatched_k() {
    let dir = trained();
    let p = dir.path();
    std::fs::write(p.join("k2.toml"), format!("{TINY}k = 2\n")).unwrap();
    let o = run(
        p,
        &[
            "--config",
            "k2.toml",
            "train-ldm",
            "--data",
            "data.xyz",
            "--ae",
            "ae.ckpt",
            "--out",
            "x.ckpt",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("k = 2"), "{}", stderr(&o));
    assert!(!p.join("x.ckpt").exists());
}

#[test]
fn sample_contract() {
    let dir = trained();
    let p = dir.path();
    let base = ["sample", "--ae", "ae.ckpt", "--ldm", "ldm.ckpt"];
    let with = |extra: &[&str]| -> Output { run(p, &[&base[..], extra].concat()) };

    let o = with(&["--n", "0", "--out", "empty.xyz"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read(p.join("empty.xyz")).unwrap().is_empty());

    assert_eq!(
        code(&with(&["--n", "6", "--seed", "11", "--out", "a.xyz"])),
        0
    );
    assert_eq!(
        code(&with(&["--n", "6", "--seed", "11", "--out", "b.xyz"])),
        0
    );
    let a = std::fs::read_to_string(p.join("a.xyz")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p.join("b.xyz")).unwrap());
    let ms = geolatent::data::parse_xyz(&a, &Default::default()).unwrap();
    assert_eq!(ms.len(), 6);
    assert!(a.lines().nth(1).unwrap().contains("seed=11"));

    let o = with(&["--n", "2", "--condition", "0.9", "--out", "c.xyz"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unconditional"));
}

#[test]
fn sample_refuses_incompatible_checkpoints() {
    let dir = trained();
    let p = dir.path();
    let o = run(
        p,
        &[
            "--config",
            "run.toml",
            "--seed",
            "8",
            "train-ae",
            "--data",
            "data.xyz",
            "--out",
            "other.ckpt",
        ],
    );
    assert_eq!(code(&o), 0);
    let o = run(
        p,
        &[
            "sample",
            "--ae",
            "other.ckpt",
            "--ldm",
            "ldm.ckpt",
            "--n",
            "1",
            "--out",
            "s.xyz",
        ],
    );
    assert_eq!(code(&o), 1);
    // a denoiser checkpoint in the autoencoder slot
    let o = run(
        p,
        &[
            "sample", "--ae", "ldm.ckpt", "--ldm", "ldm.ckpt", "--n", "1", "--out", "s.xyz",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ldm.ckpt"));
}

#[test]
fn missing_and_corrupt_inputs() {
    let dir = trained();
    let p = dir.path();
    let o = run(p, &["train-ae", "--data", "absent.xyz", "--out", "x.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.xyz"));

    let mut bytes = std::fs::read(p.join("ae.ckpt")).unwrap();
    bytes[8] = 2;
    std::fs::write(p.join("v2.ckpt"), &bytes).unwrap();
    let o = run(
        p,
        &[
            "sample", "--ae", "v2.ckpt", "--ldm", "ldm.ckpt", "--n", "1", "--out", "s.xyz",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("v2.ckpt") && stderr(&o).contains("version"),
        "{}",
        stderr(&o)
    );

    let len = std::fs::read(p.join("ldm.ckpt")).unwrap().len();
    std::fs::write(
        p.join("cut.ckpt"),
        &std::fs::read(p.join("ldm.ckpt")).unwrap()[..len / 2],
    )
    .unwrap();
    let o = run(
        p,
        &[
            "sample", "--ae", "ae.ckpt", "--ldm", "cut.ckpt", "--n", "1", "--out", "s.xyz",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cut.ckpt"));

    std::fs::write(p.join("bad.toml"), "stepz = 4\n").unwrap();
    let o = run(
        p,
        &["--config", "bad.toml", "gen-synthetic", "--out", "d.xyz"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml"));

    let o = run(p, &["gen-synthetic", "--out", "no/such/dir/d.xyz"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let stable = fixture("stable.xyz");
    let o = run(
        p,
        &[
            "eval",
            "--samples",
            stable.to_str().unwrap(),
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    for key in [
        "atom_stability",
        "molecule_stability",
        "validity",
        "uniqueness",
        "validity_x_uniqueness",
    ] {
        assert_eq!(r[key], 1.0, "{key}: {r}");
    }

    let text = std::fs::read_to_string(&stable).unwrap();
    std::fs::write(p.join("twice.xyz"), format!("{text}{text}")).unwrap();
    assert_eq!(
        code(&run(
            p,
            &["eval", "--samples", "twice.xyz", "--out", "r2.json"]
        )),
        0
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("r2.json")).unwrap()).unwrap();
    assert_eq!(r["uniqueness"], 0.5);

    let o = run(
        p,
        &[
            "eval",
            "--samples",
            fixture("malformed.xyz").to_str().unwrap(),
            "--out",
            "r3.json",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("malformed.xyz"));
}

#[test]
fn usage_errors_are_validation_failures() {
    assert_eq!(code(&run(Path::new("."), &["sample", "--n", "x"])), 1);
    assert_eq!(code(&run(Path::new("."), &["frobnicate"])), 1);
    assert_eq!(code(&run(Path::new("."), &["--help"])), 0);
}
