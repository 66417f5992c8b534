use std::path::Path;
use std::process::{Command, Output};

const SIDE: usize = 6;

/// Four classes, each lighting its own quadrant of a 6x6 image plus a
/// little per-image texture.
fn write_idx(dir: &Path, prefix: &str, per_class: usize) {
    let n = 4 * per_class;
    let mut images = Vec::new();
    images.extend_from_slice(&0x803u32.to_be_bytes());
    for v in [n, SIDE, SIDE] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&0x801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 4;
        labels.push(class as u8);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let quadrant = (r / 3) * 2 + c / 3;
                let base = if quadrant == class { 200 } else { 10 };
                images.push((base + (i * 7 + r * 5 + c * 3) % 40) as u8);
            }
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 30);
    write_idx(dir.path(), "t10k", 10);
    dir
}

fn dynmat(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynmat"))
        .args(args)
        .env("DYNMAT_DATA_DIR", data)
        .env_remove("DYNMAT_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_outputs() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("run");
    let o = dynmat(
        data.path(),
        &[
            "run",
            "--dataset",
            "idx",
            "--theta",
            "0.99",
            "--no-ltlm",
            "--audit",
            "--out",
            dir.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert!(csv.starts_with("new_class,stored_new,err_old,err_new,total_ml_size\n"));
    assert!(csv.lines().count() > 1);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["class_order"], serde_json::json!([0, 1, 2]));
    assert!(report["audits"][0]["passed"].as_bool().unwrap());
    assert!(dir.join("memory.dynm").is_file());
    assert!(stdout(&o).contains("STLM"));

    let again = dynmat(
        data.path(),
        &["run", "--dataset", "idx", "--no-ltlm", "--out", dir.to_str().unwrap()],
    );
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn repeated_runs_are_identical() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for k in ["a", "b"] {
        let dir = out.path().join(k);
        let o = dynmat(
            data.path(),
            &[
                "run",
                "--dataset",
                "idx",
                "--classes",
                "3,1,0,2",
                "--theta",
                "0.995",
                "--seed",
                "5",
                "--shuffle-within",
                "--no-ltlm",
                "--out",
                dir.to_str().unwrap(),
            ],
        );
        assert!(o.status.success());
        files.push((
            std::fs::read(dir.join("curves.csv")).unwrap(),
            std::fs::read(dir.join("memory.dynm")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn ltlm_weights_are_saved() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("r");
    let o = dynmat(
        data.path(),
        &[
            "run",
            "--dataset",
            "idx",
            "--theta",
            "0.99",
            "--hidden",
            "6",
            "--phase1-epochs",
            "3",
            "--phase2-epochs",
            "1",
            "--self-contained",
            "--out",
            dir.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("ltlm.dynw").is_file());
    assert!(dir.join("ltlm-self.dynw").is_file());
    assert!(stdout(&o).contains("LTLM(stored)"));
}

#[test]
fn divergence_exits_with_three() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let o = dynmat(
        data.path(),
        &[
            "run",
            "--dataset",
            "idx",
            "--theta",
            "0.9",
            "--hidden",
            "4",
            "--phase1-epochs",
            "200",
            "--phase1-lr",
            "1e12",
            "--phase2-lr",
            "1",
            "--out",
            out.path().join("d").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes_for_bad_input() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("x");
    let d = dir.to_str().unwrap();
    assert_eq!(
        dynmat(data.path(), &["run", "--dataset", "idx", "--theta", "1.5", "--out", d])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        dynmat(
            data.path(),
            &["run", "--classes", "0,1", "--dataset", "idx", "--out", d]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(dynmat(data.path(), &["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(dynmat(data.path(), &["--help"]).status.code(), Some(0));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(
        dynmat(
            empty.path(),
            &["run", "--dataset", "idx", "--no-ltlm", "--out", d, "--force"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        dynmat(
            data.path(),
            &[
                "run",
                "--dataset",
                "idx",
                "--classes",
                "0,1,7",
                "--no-ltlm",
                "--out",
                d,
                "--force"
            ]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn eval_continues_a_saved_layer() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("r");
    assert!(dynmat(
        data.path(),
        &[
            "run",
            "--dataset",
            "idx",
            "--theta",
            "0.99",
            "--no-ltlm",
            "--out",
            dir.to_str().unwrap()
        ]
    )
    .status
    .success());
    let memory = dir.join("memory.dynm");
    let saved = out.path().join("more.dynm");
    let curve = out.path().join("c3.csv");
    let o = dynmat(
        data.path(),
        &[
            "eval",
            "--dataset",
            "idx",
            "--memory",
            memory.to_str().unwrap(),
            "--continue-class",
            "3",
            "--save",
            saved.to_str().unwrap(),
            "--curve",
            curve.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("class 3:"));
    assert!(text.contains("all:"));
    assert!(std::fs::metadata(&saved).unwrap().len() > std::fs::metadata(&memory).unwrap().len());
    assert!(std::fs::read_to_string(curve)
        .unwrap()
        .lines()
        .skip(1)
        .all(|l| l.starts_with("3,")));

    let o = dynmat(
        data.path(),
        &[
            "eval",
            "--dataset",
            "idx",
            "--memory",
            saved.to_str().unwrap(),
            "--classes",
            "0,3",
        ],
    );
    assert!(o.status.success());
    assert!(!stdout(&o).contains("class 1:"));
}

#[test]
fn sweep_writes_summary() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("s");
    let o = dynmat(
        data.path(),
        &[
            "sweep",
            "--dataset",
            "idx",
            "--thetas",
            "0.9,0.99,0.999",
            "--jobs",
            "2",
            "--no-ltlm",
            "--out",
            dir.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "theta,ml_size,stlm_err_old,stlm_err_new,ltlm_err_old,ltlm_err_new"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0.9,") && lines[3].starts_with("0.999,"));
    let size = |l: &str| l.split(',').nth(1).unwrap().parse::<usize>().unwrap();
    assert!(size(lines[1]) <= size(lines[3]));
    assert!(dir.join("theta-0.99/memory.dynm").is_file());
}
