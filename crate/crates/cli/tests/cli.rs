use std::path::Path;
use std::process::{Command, Output};

fn in2n(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_in2n"))
        .args(args)
        .env_remove("IN2N_REMOTE_URL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = in2n(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--batch",
    "32",
    "--samples",
    "8",
    "--field-width",
    "16",
    "--field-layers",
    "1",
    "--pos-freqs",
    "3",
    "--dir-freqs",
    "1",
];

fn train(scene: &Path, ckpt: &Path) -> String {
    let mut args = vec![
        "train",
        "--scene",
        s(scene),
        "--out",
        s(ckpt),
        "--iters",
        "20",
        "--seed",
        "7",
        "--log-every",
        "10",
    ];
    args.extend_from_slice(SMALL);
    ok(&args)
}

fn setup(dir: &Path) {
    ok(&[
        "fixture",
        "--out",
        s(&dir.join("scene")),
        "--views",
        "4",
        "--size",
        "12",
        "--path-frames",
        "3",
    ]);
    let out = train(&dir.join("scene"), &dir.join("base.ckpt"));
    assert!(out.contains("iter=10 loss="), "{out}");
    assert!(out.contains("iter=20 loss="), "{out}");
}

#[test]
fn train_is_deterministic_and_edit_produces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    train(&d.join("scene"), &d.join("again.ckpt"));
    assert_eq!(
        std::fs::read(d.join("base.ckpt")).unwrap(),
        std::fs::read(d.join("again.ckpt")).unwrap()
    );

    let run = d.join("run");
    let out = ok(&[
        "edit",
        "--ckpt",
        s(&d.join("base.ckpt")),
        "--instruction",
        "turn it red",
        "--editor",
        "hue:120:0.1:0.05",
        "--s-image",
        "1.5",
        "--s-text",
        "7.5",
        "--d",
        "1",
        "--n",
        "10",
        "--max-iters",
        "30",
        "--batch",
        "32",
        "--samples",
        "8",
        "--embedder",
        "mock",
    ]
    .into_iter()
    .chain(["--out", s(&run)])
    .collect::<Vec<_>>());
    assert!(
        out.contains("termination=MaxIters rounds=3 steps=30 edits=3"),
        "{out}"
    );
    for f in [
        "report.jsonl",
        "run.json",
        "final.ckpt",
        "final.ckpt.meta.json",
        "dataset/transforms.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("snapshots/round_3/render.png").exists());
    let report = std::fs::read_to_string(run.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);

    // Rendering the edited checkpoint finds its scene through the sidecar.
    ok(&[
        "render",
        "--ckpt",
        s(&run.join("final.ckpt")),
        "--path",
        s(&d.join("scene/path.json")),
        "--out",
        s(&d.join("frames")),
        "--samples",
        "8",
    ]);
    assert!(d.join("frames/frame_0002.png").exists());
}

#[test]
fn baseline_eval_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let base = s(&d.join("base.ckpt")).to_string();
    let bl = d.join("per_frame");
    ok(&[
        "baseline",
        "--kind",
        "per-frame",
        "--path",
        s(&d.join("scene/path.json")),
        "--ckpt",
        &base,
        "--instruction",
        "x",
        "--editor",
        "hue:120:0.2:0.1",
        "--samples",
        "8",
        "--out",
        s(&bl),
    ]);
    assert!(bl.join("frames/edited/frame_0002.png").exists());

    let metrics = d.join("metrics");
    let out = ok(&[
        "eval",
        "--originals",
        s(&bl.join("frames/original")),
        "--edited",
        s(&bl.join("frames/edited")),
        "--out",
        s(&metrics),
        "--source-caption",
        "spheres",
        "--target-caption",
        "green spheres",
    ]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["frame_count"], 3);
    assert!(report["directional_similarity"].is_number());
    let csv = std::fs::read_to_string(metrics.join("pairs.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("pair,raw_dot,cosine"));
    assert_eq!(csv.lines().count(), 3);

    let sds = d.join("sds");
    let out = ok(&[
        "baseline",
        "--kind",
        "sds",
        "--ckpt",
        &base,
        "--instruction",
        "x",
        "--editor",
        "hue:120:0:0",
        "--max-iters",
        "4",
        "--n",
        "2",
        "--batch",
        "32",
        "--samples",
        "8",
        "--out",
        s(&sds),
    ]);
    assert!(out.contains("steps=4"), "{out}");

    let grid = d.join("grid.png");
    ok(&[
        "preview",
        "--ckpt",
        &base,
        "--view",
        "0",
        "--instruction",
        "x",
        "--editor",
        "hue:120:0:0",
        "--s-image",
        "1.3,1.5,1.75",
        "--s-text",
        "6.5,7.5,8.5",
        "--samples",
        "8",
        "--out",
        s(&grid),
    ]);
    let img = in2n_png_dims(&grid);
    assert_eq!(img, (36, 36));
}

fn in2n_png_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn usage_and_domain_errors_have_distinct_exit_codes() {
    let out = in2n(&["train", "--scene", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = in2n(&["train", "--scene", "x", "--out", "y", "--lr", "-1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = in2n(&[
        "baseline",
        "--kind",
        "dreamfusion",
        "--ckpt",
        "c",
        "--instruction",
        "x",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--kind"));

    // No --editor and no remote URL in the environment.
    let out = in2n(&["edit", "--ckpt", "c", "--instruction", "x", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("IN2N_REMOTE_URL"));

    let dir = tempfile::tempdir().unwrap();
    let out = in2n(&[
        "train",
        "--scene",
        s(&dir.path().join("missing")),
        "--out",
        "y",
        "--iters",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = in2n(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "train", "edit", "baseline", "render", "eval", "preview", "serve", "fixture",
    ] {
        assert!(help.contains(cmd), "{cmd}");
    }
}

#[test]
fn serve_runs_to_completion_with_the_control_api() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = ok(&[
        "serve",
        "--port",
        "0",
        "--ckpt",
        s(&d.join("base.ckpt")),
        "--instruction",
        "x",
        "--editor",
        "identity",
        "--max-iters",
        "10",
        "--n",
        "5",
        "--batch",
        "32",
        "--samples",
        "8",
        "--out",
        s(&d.join("served")),
    ]);
    assert!(
        out.contains("control api listening on http://127.0.0.1:"),
        "{out}"
    );
    assert!(out.contains("steps=10"), "{out}");
}
