use std::path::Path;
use std::process::{Command, Output};

fn otf_sfm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_otf-sfm")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_replay_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    // A short arc: 24 frames 3 degrees apart.
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[scene]\nseed = 4\n\n[[scene.agents]]\nagent_id = 0\nframes = 24\nradius = 50.0\nstart_angle_deg = 0.0\n\
         end_angle_deg = 69.0\nheight_min = 8.0\nheight_max = 12.0\ntime_offset = 0.0\n",
    )
    .unwrap();
    otf_sfm(&["--config", path(&cfg), "gen", "--out", path(&data)]);
    for f in ["manifest.json", "stream.ofsm", "groundtruth.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    let replay = otf_sfm(&["--seed", "4", "replay", "--dataset", path(&data), "--out", path(&out)]);
    let stdout = String::from_utf8_lossy(&replay.stdout);
    assert!(stdout.starts_with("seed 4"), "{stdout}");
    assert!(stdout.contains("mrd"), "{stdout}");

    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["summary"]["frames"], 24);

    let eval = otf_sfm(&[
        "eval",
        "--export",
        path(&out.join("export.txt")),
        "--ground-truth",
        path(&data.join("groundtruth.json")),
    ]);
    let text = String::from_utf8_lossy(&eval.stdout);
    let json: serde_json::Value = serde_json::from_str(text.split_once('\n').unwrap().1).unwrap();
    assert!(json["mrd_deg"].as_f64().unwrap() < 1.0, "{json}");
}

#[test]
fn bench_retrieval_prints_csv() {
    let out = otf_sfm(&["bench-retrieval", "--sizes", "50,100", "--queries", "5", "--dim", "16", "--top-n", "5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "n,recall,hnsw_query_us,exhaustive_query_us,speedup");
    assert!(lines[2].starts_with("50,") && lines[3].starts_with("100,"));
}

#[test]
fn rejects_unknown_agent_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_otf-sfm"))
        .args(["gen", "--out", path(tmp.path()), "--agents", "5"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
