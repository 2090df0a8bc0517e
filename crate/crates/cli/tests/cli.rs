use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn smd(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smd"));
    cmd.args(args).env_remove("SMD_SEED");
    if let Some(s) = seed_env {
        cmd.env("SMD_SEED", s);
    }
    cmd.output().unwrap()
}

const SMALL: &[&str] = &[
    "--width",
    "320",
    "--height",
    "180",
    "--focal",
    "320",
    "--grid-size",
    "20",
    "--n-planes",
    "16",
    "--sweep-downscale",
    "2",
];

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn synth_succeeds_and_writes_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let r = smd(&[&["synth", "--output-dir", o], SMALL].concat(), None);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    for f in ["depth.pfm", "depth_preview.png", "report.json"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn input_errors_exit_with_2() {
    let frames = tempfile::tempdir().unwrap();
    fs::write(frames.path().join("a.pgm"), b"P5\n2 2\n255\n\0\0\0\0").unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = smd(
        &[
            "run",
            "--input",
            frames.path().to_str().unwrap(),
            "--output-dir",
            out.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(report(out.path())["error"]["stage"], "read");
    assert_eq!(
        smd(&["run", "--output-dir", out.path().to_str().unwrap()], None)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        smd(&["synth", "--init-mode", "iba"], None).status.code(),
        Some(2)
    );
}

#[test]
fn static_frames_exit_with_3() {
    let frames = tempfile::tempdir().unwrap();
    let img = smd::synth::texture(160, 120, 6.0, 4);
    for i in 0..3 {
        smd::io::save_gray(&img, &frames.path().join(format!("f{i}.pgm"))).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let r = smd(
        &[
            "run",
            "--input",
            frames.path().to_str().unwrap(),
            "--output-dir",
            out.path().to_str().unwrap(),
            "--grid-size",
            "16",
        ],
        None,
    );
    assert_eq!(
        r.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
}

#[test]
fn flags_beat_env_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("smd.conf");
    fs::write(&conf, "n-planes = 12\nseed = 5\ninit-mode = flat\n").unwrap();
    let out = dir.path().join("out");
    let base = [
        "synth",
        "--config",
        conf.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ];
    let small = [
        "--width",
        "320",
        "--height",
        "180",
        "--focal",
        "320",
        "--grid-size",
        "20",
    ];

    assert_eq!(
        smd(&[&base[..], &small].concat(), None).status.code(),
        Some(0)
    );
    let r = report(&out);
    assert_eq!(
        (
            r["n_planes"].as_u64(),
            r["seed"].as_u64(),
            r["init_mode"].as_str()
        ),
        (Some(12), Some(5), Some("flat"))
    );

    assert_eq!(
        smd(&[&base[..], &small].concat(), Some("7")).status.code(),
        Some(0)
    );
    assert_eq!(report(&out)["seed"], 7);

    let flags = ["--seed", "9", "--n-planes", "10", "--init-mode", "rank1"];
    assert_eq!(
        smd(&[&base[..], &small, &flags].concat(), Some("7"))
            .status
            .code(),
        Some(0)
    );
    let r = report(&out);
    assert_eq!(
        (
            r["n_planes"].as_u64(),
            r["seed"].as_u64(),
            r["init_mode"].as_str()
        ),
        (Some(10), Some(9), Some("rank1"))
    );
}

#[test]
fn bench_writes_one_record_per_trial_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.jsonl");
    let r = smd(
        &[
            "bench",
            "--trials",
            "2",
            "--m-points",
            "60",
            "--max-iter",
            "20",
            "--output",
            path.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(r.status.code(), Some(0));
    let text = fs::read_to_string(&path).unwrap();
    let modes: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["init_mode"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(modes, ["rank1", "flat", "rank1", "flat"]);
}

#[test]
fn calib_eval_reports_grid_error() {
    let args = [
        "calib-eval",
        "--true-focal",
        "1360",
        "--true-k1=-0.12",
        "--true-k2",
        "0.03",
        "--width",
        "1280",
        "--height",
        "720",
    ];
    let r = smd(&[&args[..], &["--est-focal", "1360"]].concat(), None);
    assert_eq!(r.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    let g = v["grid_error_px"].as_f64().unwrap();
    assert!((4.0..=6.0).contains(&g), "{g}");

    let same = [
        &args[..],
        &["--est-focal", "1360", "--est-k1=-0.12", "--est-k2", "0.03"],
    ]
    .concat();
    let v: serde_json::Value = serde_json::from_slice(&smd(&same, None).stdout).unwrap();
    assert!(v["grid_error_px"].as_f64().unwrap() < 1e-6);
    assert_eq!(v["focal_error_pct"], 0.0);
}
