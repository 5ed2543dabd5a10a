mod common;

use std::fs;

use common::{code, ok, pvp, raw_pvpc_tensors, stderr, stdout, tiny_workspace};
use serde_json::Value;

fn json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn csv_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn help_and_version_exit_zero_but_usage_errors_exit_one() {
    let dir = tiny_workspace();
    assert_eq!(code(&pvp(dir.path(), &["--help"])), 0);
    assert_eq!(code(&pvp(dir.path(), &["--version"])), 0);
    assert_eq!(code(&pvp(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&pvp(dir.path(), &["tune", "--shots", "many"])), 1);
}

#[test]
fn pretrain_writes_an_inspectable_bank_of_n_tokens() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &["pretrain", "-c", "tiny.conf", "-o", "pre", "--tokens", "6"],
    );
    let s: Value =
        serde_json::from_str(&ok(d, &["inspect", "--json", "pre/checkpoint.pvpc"])).unwrap();
    assert_eq!(s["format"], "pvpc");
    assert_eq!(s["method"], "vpt_deep");
    assert_eq!(s["module_dim"], 6);
    let prompts = s["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"] == "prompt_tokens")
        .unwrap();
    assert_eq!(prompts["shape"], serde_json::json!([2, 6, 16]));
    let human = ok(d, &["inspect", "pre/checkpoint.pvpc"]);
    assert!(
        human.contains("prompt_tokens") && human.contains("(2, 6, 16)"),
        "{human}"
    );
    for f in [
        "checkpoint.pvpc",
        "record.json",
        "losses.csv",
        "manifest.json",
    ] {
        assert!(d.join("pre").join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_method_is_a_usage_error() {
    let dir = tiny_workspace();
    let out = pvp(
        dir.path(),
        &["pretrain", "-c", "tiny.conf", "--method", "prefix"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("pet.method"), "{}", stderr(&out));
    assert!(!dir.path().join("pvp-out/checkpoint.pvpc").exists());
}

#[test]
fn config_errors_point_at_the_line() {
    let dir = tiny_workspace();
    fs::write(
        dir.path().join("bad.conf"),
        "tune.shots = 1\n\ntune.shotz = 2\n",
    )
    .unwrap();
    let out = pvp(dir.path(), &["tune", "-c", "bad.conf"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bad.conf:3"), "{}", stderr(&out));
    let out = pvp(dir.path(), &["tune", "--set", "tune.lr=-1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn rerunning_a_pretrain_manifest_gives_identical_bytes() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(d, &["pretrain", "-c", "tiny.conf", "-o", "pre"]);
    let report = ok(d, &["replay", "pre/manifest.json", "-o", "again"]);
    assert!(report.contains("all outputs identical"), "{report}");
    assert_eq!(
        fs::read(d.join("pre/checkpoint.pvpc")).unwrap(),
        fs::read(d.join("again/checkpoint.pvpc")).unwrap()
    );
}

#[test]
fn tune_from_a_bank_and_from_scratch() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(d, &["pretrain", "-c", "tiny.conf", "-o", "pre"]);
    let bank = "pre/checkpoint.pvpc";
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "pvp",
            "--checkpoint",
            bank,
            "--shots",
            "1",
            "--load",
            "sequential",
        ],
    );
    ok(
        d,
        &["tune", "-c", "tiny.conf", "-o", "scratch", "--shots", "1"],
    );
    let pvp_rows = csv_rows(&d.join("pvp/metrics.csv"));
    let scratch_rows = csv_rows(&d.join("scratch/metrics.csv"));
    let col = |rows: &[Vec<String>], name: &str| {
        let i = rows[0].iter().position(|h| h == name).unwrap();
        rows[1][i].clone()
    };
    assert_eq!(col(&pvp_rows, "init"), "pvp");
    assert_eq!(col(&pvp_rows, "load"), "sequential");
    assert_eq!(col(&scratch_rows, "init"), "scratch");
    assert_eq!(col(&pvp_rows, "backbone_unchanged"), "true");
    // average loading expands past the bank size; sequential cannot
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "avg",
            "--checkpoint",
            bank,
            "--load",
            "average",
            "--k",
            "32",
        ],
    );
    let out = pvp(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "seq",
            "--checkpoint",
            bank,
            "--load",
            "sequential",
            "--k",
            "32",
        ],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let m = json(&d.join("pvp/manifest.json"));
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn a_bank_of_the_wrong_kind_is_refused() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "pretrain",
            "-c",
            "tiny.conf",
            "-o",
            "pre",
            "--method",
            "lora",
        ],
    );
    let out = pvp(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "--checkpoint",
            "pre/checkpoint.pvpc",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--method lora"), "{}", stderr(&out));
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "t",
            "--checkpoint",
            "pre/checkpoint.pvpc",
            "--method",
            "lora",
        ],
    );
}

#[test]
fn eval_reproduces_the_tuned_accuracy() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "pretrain",
            "-c",
            "tiny.conf",
            "-o",
            "pre",
            "--method",
            "adapter",
        ],
    );
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "t",
            "--method",
            "adapter",
            "--checkpoint",
            "pre/checkpoint.pvpc",
            "--shots",
            "2",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "-c",
            "tiny.conf",
            "-o",
            "e",
            "--modules",
            "t/tuned.pvpc",
            "--shots",
            "2",
        ],
    );
    let tuned = json(&d.join("t/record.json"))["eval_accuracy"]
        .as_f64()
        .unwrap();
    let eval = json(&d.join("e/eval.json"));
    // the checkpoint stores f32, so allow a near-tie to flip
    let diff = (eval["accuracy"].as_f64().unwrap() - tuned).abs();
    assert!(
        diff <= 1.0 / eval["samples"].as_f64().unwrap() + 1e-12,
        "{diff}"
    );
    let preds = csv_rows(&d.join("e/predictions.csv"));
    let hits = preds[1..].iter().filter(|r| r[1] == r[2]).count();
    assert_eq!(
        hits as f64 / (preds.len() - 1) as f64,
        eval["accuracy"].as_f64().unwrap()
    );
    let out = pvp(
        d,
        &[
            "eval",
            "-c",
            "tiny.conf",
            "-o",
            "e2",
            "--modules",
            "missing.pvpc",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_reports_corruption_as_integrity_error() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(d, &["pretrain", "-c", "tiny.conf", "-o", "pre"]);
    let mut bytes = fs::read(d.join("pre/checkpoint.pvpc")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(d.join("bad.pvpc"), &bytes).unwrap();
    let out = pvp(d, &["inspect", "bad.pvpc"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("crc"), "{}", stderr(&out));
    fs::write(d.join("junk.bin"), b"hello").unwrap();
    assert_eq!(code(&pvp(d, &["inspect", "junk.bin"])), 2);
}

#[test]
fn inspect_stats_match_a_recount_from_raw_bytes() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "pretrain",
            "-c",
            "tiny.conf",
            "-o",
            "pre",
            "--method",
            "lora",
        ],
    );
    let bytes = fs::read(d.join("pre/checkpoint.pvpc")).unwrap();
    let s: Value =
        serde_json::from_str(&ok(d, &["inspect", "--json", "pre/checkpoint.pvpc"])).unwrap();
    let reported = s["tensors"].as_array().unwrap();
    let raw = raw_pvpc_tensors(&bytes);
    assert_eq!(reported.len(), raw.len());
    for (r, (name, shape, vals)) in reported.iter().zip(&raw) {
        assert_eq!(r["name"], name.as_str());
        assert_eq!(r["shape"], serde_json::json!(shape));
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let min = vals.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let max = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let close = |a: &Value, b: f64| (a.as_f64().unwrap() - b).abs() <= 1e-12 * b.abs().max(1.0);
        assert!(close(&r["mean"], mean), "{name} mean");
        assert!(close(&r["std"], var.sqrt()), "{name} std");
        assert!(
            close(&r["min"], min) && close(&r["max"], max),
            "{name} range"
        );
    }
}

#[test]
fn gradcheck_passes_fails_on_sign_flip_and_is_deterministic() {
    let dir = tiny_workspace();
    let d = dir.path();
    let a = ok(d, &["gradcheck", "--seed", "3", "--seeds", "2", "--json"]);
    let b = ok(d, &["gradcheck", "--seed", "3", "--seeds", "2", "--json"]);
    assert_eq!(a, b);
    let report: Value = serde_json::from_str(&a).unwrap();
    assert!(report["cases"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));
    let out = pvp(
        d,
        &["gradcheck", "--seeds", "1", "--inject-sign-flip", "softmax"],
    );
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("[FAIL] softmax"), "{}", stdout(&out));
    assert_eq!(
        code(&pvp(d, &["gradcheck", "--inject-sign-flip", "nope"])),
        1
    );
}

const SMALL_BENCH: [&str; 18] = [
    "--set",
    "bench.pretrain.steps=10",
    "--set",
    "bench.tune.steps=3",
    "--set",
    "bench.seeds=[0,1]",
    "--set",
    "bench.k_sweep=[1,2]",
    "--set",
    "bench.bank_tokens=4",
    "--set",
    "bench.prompt_tokens=4",
    "--set",
    "bench.loading_k=4",
    "--set",
    "bench.pretrain_overrides={}",
    "--set",
    "bench.include_full=true",
];

#[test]
fn bench_report_validates_and_assert_sets_the_exit_code() {
    let dir = tiny_workspace();
    let d = dir.path();
    let mut args = vec!["bench", "-c", "tiny.conf", "-o", "b"];
    args.extend(SMALL_BENCH);
    let out = pvp(d, &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&d.join("b/report.json"));
    let schema: Value = serde_json::from_str(&ok(d, &["schema", "bench-report"])).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&report)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{errors:?}");
    let manifest_schema: Value = serde_json::from_str(&ok(d, &["schema", "manifest"])).unwrap();
    assert!(jsonschema::is_valid(
        &manifest_schema,
        &json(&d.join("b/manifest.json"))
    ));

    let failed = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["passed"] == false);
    args.push("--assert");
    let out = pvp(d, &args);
    assert_eq!(code(&out), if failed { 3 } else { 0 });
    // a deliberately broken check: no run can beat scratch with zero steps
    let mut zero = args.clone();
    zero.extend(["--set", "bench.tune.steps=0"]);
    let out = pvp(d, &zero);
    assert_eq!(code(&out), 3, "{}", stdout(&out));

    let runs = csv_rows(&d.join("b/runs.csv"));
    assert_eq!(runs.len() - 1, report["runs"].as_array().unwrap().len());
    assert!(runs.iter().any(|r| r[1] == "full"));
}

#[test]
fn bench_with_missing_banks_says_how_to_make_them() {
    let dir = tiny_workspace();
    let d = dir.path();
    fs::create_dir(d.join("banks")).unwrap();
    let mut args = vec!["bench", "-c", "tiny.conf", "-o", "b", "--banks", "banks"];
    args.extend(SMALL_BENCH);
    let out = pvp(d, &args);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("pvp pretrain --method"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn bench_accepts_banks_from_pretrain() {
    let dir = tiny_workspace();
    let d = dir.path();
    fs::create_dir(d.join("banks")).unwrap();
    for m in ["vpt_deep", "adapter", "lora"] {
        let out = format!("pre-{m}");
        ok(
            d,
            &[
                "pretrain",
                "-c",
                "tiny.conf",
                "-o",
                &out,
                "--method",
                m,
                "--tokens",
                "4",
            ],
        );
        fs::copy(
            d.join(&out).join("checkpoint.pvpc"),
            d.join(format!("banks/{m}.pvpc")),
        )
        .unwrap();
    }
    let mut args = vec!["bench", "-c", "tiny.conf", "-o", "b", "--banks", "banks"];
    args.extend(SMALL_BENCH);
    ok(d, &args);
    let report = json(&d.join("b/report.json"));
    assert_eq!(report["stage_one"].as_array().unwrap().len(), 0);
    assert_eq!(
        json(&d.join("b/manifest.json"))["inputs"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
}

#[test]
fn data_generate_export_import_round_trip() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "data",
            "generate",
            "-c",
            "tiny.conf",
            "-o",
            "gen",
            "--split",
            "target",
        ],
    );
    ok(d, &["data", "export", "-o", "csv", "gen/dataset.pvpd"]);
    ok(d, &["data", "import", "-o", "imp", "csv/dataset.csv"]);
    let a: Value =
        serde_json::from_str(&ok(d, &["inspect", "--json", "gen/dataset.pvpd"])).unwrap();
    let b: Value =
        serde_json::from_str(&ok(d, &["inspect", "--json", "imp/dataset.pvpd"])).unwrap();
    assert_eq!(a["samples"], b["samples"]);
    assert_eq!(a["image_shape"], b["image_shape"]);
    assert_eq!(a["pixels"], b["pixels"]);
    assert_eq!(b["family"], "external");
    let ids = |v: &Value| -> Vec<Value> {
        v["classes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["class_id"].clone())
            .collect()
    };
    assert_eq!(ids(&a), ids(&b));
    // re-export is byte-identical, so nothing was lost
    ok(d, &["data", "export", "-o", "csv2", "imp/dataset.pvpd"]);
    assert_eq!(
        fs::read(d.join("csv/dataset.csv")).unwrap(),
        fs::read(d.join("csv2/dataset.csv")).unwrap()
    );
}

#[test]
fn imported_data_drives_tuning() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "data",
            "generate",
            "-c",
            "tiny.conf",
            "-o",
            "gen",
            "--split",
            "target",
        ],
    );
    ok(d, &["data", "export", "-o", "csv", "gen/dataset.pvpd"]);
    ok(d, &["data", "import", "-o", "imp", "csv/dataset.csv"]);
    // both sides go through f32 storage
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "a",
            "--set",
            "data.target=gen/dataset.pvpd",
        ],
    );
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "b",
            "--set",
            "data.target=imp/dataset.pvpd",
        ],
    );
    assert_eq!(
        fs::read(d.join("a/metrics.csv")).unwrap(),
        fs::read(d.join("b/metrics.csv")).unwrap()
    );
    let m = json(&d.join("b/manifest.json"));
    assert!(m["config"]["data"]["target"]
        .as_str()
        .unwrap()
        .starts_with('/'));
}

#[test]
fn malformed_csv_is_a_data_error() {
    let dir = tiny_workspace();
    let d = dir.path();
    fs::write(
        d.join("bad.csv"),
        "label,class_id,px0,px1,px2\n0,3,0.1,0.2,0.3\n",
    )
    .unwrap();
    let out = pvp(d, &["data", "import", "bad.csv"]);
    assert_eq!(code(&out), 2);
    fs::write(d.join("bad2.csv"), "label,class_id,px0\n0,3,abc\n").unwrap();
    assert_eq!(code(&pvp(d, &["data", "import", "bad2.csv"])), 2);
    fs::write(d.join("bad3.csv"), "label,class_id,px0\n0,3,1\n0,4,1\n").unwrap();
    assert_eq!(code(&pvp(d, &["data", "import", "bad3.csv"])), 2);
}

#[test]
fn replay_notices_changed_inputs_and_outputs() {
    let dir = tiny_workspace();
    let d = dir.path();
    ok(d, &["pretrain", "-c", "tiny.conf", "-o", "pre"]);
    ok(
        d,
        &[
            "tune",
            "-c",
            "tiny.conf",
            "-o",
            "t",
            "--checkpoint",
            "pre/checkpoint.pvpc",
        ],
    );
    ok(d, &["replay", "t/manifest.json"]);

    let mut m = json(&d.join("t/manifest.json"));
    m["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    fs::write(d.join("t/tampered.json"), serde_json::to_vec(&m).unwrap()).unwrap();
    let out = pvp(d, &["replay", "t/tampered.json", "-o", "r2"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("DIFFERS"), "{}", stdout(&out));

    ok(
        d,
        &[
            "pretrain",
            "-c",
            "tiny.conf",
            "-o",
            "pre",
            "--set",
            "pretrain.seed=9",
        ],
    );
    let out = pvp(d, &["replay", "t/manifest.json", "-o", "r3"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert_eq!(code(&pvp(d, &["replay", "t/manifest.json", "-o", "t"])), 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tiny_workspace();
    let d = dir.path();
    let mut args = vec!["bench", "-c", "tiny.conf", "-o", "one", "--threads", "1"];
    args.extend(SMALL_BENCH);
    ok(d, &args);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_pvp"))
        .args(["bench", "-c", "tiny.conf", "-o", "four"])
        .args(SMALL_BENCH)
        .current_dir(d)
        .env("PVP_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(d.join("one/report.json")).unwrap(),
        fs::read(d.join("four/report.json")).unwrap()
    );
    let bad = std::process::Command::new(env!("CARGO_BIN_EXE_pvp"))
        .args(["gradcheck", "--seeds", "1"])
        .env("PVP_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn bundled_example_config_resolves() {
    let dir = tiny_workspace();
    let conf = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quick.conf");
    ok(
        dir.path(),
        &[
            "data", "generate", "-c", conf, "--split", "source", "-o", "d",
        ],
    );
    let m = json(&dir.path().join("d/manifest.json"));
    assert_eq!(m["config"]["vit"]["embed_dim"], 16);
    assert_eq!(m["config"]["bench"]["vit"]["embed_dim"], 16);
    assert_eq!(m["config"]["bench"]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(m["config"]["tune"]["load"], "average");
}
