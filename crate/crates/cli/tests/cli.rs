use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
seed = 3
out_dir = "run"
workers = 1

[corpus]
dir = "corpus"
n_train_speakers = 4
n_test_speakers = 3
utts_per_speaker = 8
seed = 11

[corpus.config]
k_shot = 2

[model]
hidden_dim = 8
n_encoder_blocks = 1
n_decoder_blocks = 1
ffn_dim = 16
predictor_dim = 8
spk_emb_dim = 8

[meta]
total_meta_steps = 3
tasks_per_step = 2
k_shot = 2
inner_steps = 2

[baseline]
steps = 3
batch_size = 8

[encoder]
hidden_dim = 8
pretrain_steps = 5
pretrain_speakers = 3
pretrain_utts_per_speaker = 4
pretrain_batch = 8

[eval]
tasks_per_speaker = 2
k_shot = 2

[eval.adapt]
marks = [0, 1, 3]
"#;

fn metatts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metatts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("METATTS_WORKERS")
        .env_remove("METATTS_DETERMINISTIC")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let o = metatts(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(args: &[&str]) -> (i32, String) {
    let o = metatts(args);
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

/// Experiment directory holding `config.toml` built from `BASE` plus `extra`.
/// `extra` is appended, so it may only add tables that `BASE` lacks.
fn experiment(root: &Path, name: &str, extra: &str) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    let mut text = BASE.replace("dir = \"corpus\"", "dir = \"../corpus\"");
    text.push_str(extra);
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(root: &Path) {
    let cfg = experiment(root, "gen", "");
    run_ok(&["gen-corpus", s(&cfg)]);
}

#[test]
fn meta_pipeline_is_deterministic_and_inspectable() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let cfg = experiment(tmp.path(), name, "");
        run_ok(&["meta-train", s(&cfg)]);
        run_ok(&["adapt-eval", s(&cfg)]);
        let run = cfg.parent().unwrap().join("run");
        let ck = fs::read(run.join("meta-final.ckpt")).unwrap();
        let report = fs::read(run.join("eval/report.json")).unwrap();
        assert!(run.join("checkpoints/meta-step000003.ckpt").exists());
        assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
        assert!(!run.join(".metatts.lock").exists());
        hashes.push((ck, report, fs::read(run.join("eval/results.json")).unwrap()));
    }
    assert!(hashes[0] == hashes[1], "reruns differ");

    let run = tmp.path().join("a/run");
    let report: serde_json::Value = serde_json::from_slice(&hashes[0].1).unwrap();
    assert_eq!(report["n_tasks"], 6);
    let marks: Vec<&String> = report["marks"].as_object().unwrap().keys().collect();
    assert_eq!(marks, ["0", "1", "3"]);
    assert!(run.join("eval/curves/mark003-det.txt").exists());
    assert!(run.join("eval/embeddings/real.txt").exists());
    let run_json: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run.json")).unwrap()).unwrap();
    assert!(run_json.get("wall_seconds").is_none());

    let o = metatts(&["inspect", s(&run.join("meta-final.ckpt"))]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success() && out.contains("meta mask   emb+va+dec"), "{out}");
    let o = metatts(&["inspect", s(&run.join("eval/report.json"))]);
    assert!(o.status.success() && String::from_utf8_lossy(&o.stdout).contains("similarity"));
}

#[test]
fn mask_without_embedding_is_a_config_error_before_any_output() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "x", "\n[train]\nmask = \"va+dec\"\n");
    let (c, err) = code(&["meta-train", s(&cfg)]);
    assert_eq!(c, 2, "{err}");
    assert!(!tmp.path().join("x/run").exists());
}

#[test]
fn shared_mode_full_mask_meta_trains() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "x", "\n[train]\nmask = \"emb+va+dec\"\n");
    let text = fs::read_to_string(&cfg).unwrap().replace("spk_emb_dim = 8", "spk_emb_dim = 8\nemb_mode = \"shared\"");
    fs::write(&cfg, text).unwrap();
    run_ok(&["meta-train", s(&cfg)]);
    run_ok(&["adapt-eval", s(&cfg)]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let typo = experiment(tmp.path(), "typo", "\n[train]\napproch = \"meta\"\n");
    let (c, err) = code(&["meta-train", s(&typo)]);
    assert_eq!(c, 2);
    assert!(err.contains("approch") && err.contains("train"), "{err}");

    let budget = experiment(tmp.path(), "budget", "\n[train]\napproach = \"multitask\"\n");
    let text = fs::read_to_string(&budget).unwrap().replace("batch_size = 8", "batch_size = 6");
    fs::write(&budget, text).unwrap();
    assert_eq!(code(&["train-baseline", s(&budget)]).0, 2);

    let verb = experiment(tmp.path(), "verb", "\n[train]\napproach = \"multitask\"\n");
    assert_eq!(code(&["meta-train", s(&verb)]).0, 2);
}

#[test]
fn eval_mask_must_match_the_meta_mask() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "m", "");
    run_ok(&["meta-train", s(&cfg)]);
    let text = fs::read_to_string(&cfg).unwrap().replace("marks = [0, 1, 3]", "marks = [0, 1, 3]\nmask = \"emb\"");
    fs::write(&cfg, text).unwrap();
    let (c, err) = code(&["adapt-eval", s(&cfg)]);
    assert_eq!(c, 2);
    assert!(err.contains("differs from the meta-training mask"), "{err}");
}

#[test]
fn speaker_encoding_report_has_only_mark_zero() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "enc", "\n[train]\napproach = \"spk_enc\"\nencoder_setting = \"pretrained_joint\"\n");
    run_ok(&["train-baseline", s(&cfg)]);
    run_ok(&["adapt-eval", s(&cfg)]);
    let run = tmp.path().join("enc/run");
    assert!(run.join("spk_enc_pretrained_joint-final.ckpt").exists());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["marks"].as_object().unwrap().keys().collect::<Vec<_>>(), ["0"]);
    assert_eq!(report["approach"], "spk_enc:pretrained_joint");
}

#[test]
fn locked_directory_is_rejected() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "l", "");
    fs::create_dir_all(tmp.path().join("l/run")).unwrap();
    fs::write(tmp.path().join("l/run/.metatts.lock"), "1\n").unwrap();
    let (c, err) = code(&["meta-train", s(&cfg)]);
    assert_eq!(c, 2);
    assert!(err.contains("in use"), "{err}");
    assert!(!tmp.path().join("l/run/meta-final.ckpt").exists());
}

#[test]
fn missing_corpus_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = experiment(tmp.path(), "n", "");
    let (c, err) = code(&["meta-train", s(&cfg)]);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn diverging_inner_loop_is_a_numeric_failure() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = experiment(tmp.path(), "d", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("inner_steps = 2", "inner_steps = 2\nalpha = 1e300");
    fs::write(&cfg, text).unwrap();
    let (c, err) = code(&["meta-train", s(&cfg)]);
    assert_eq!(c, 4, "{err}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let full = experiment(tmp.path(), "full", "");
    run_ok(&["meta-train", s(&full)]);
    let part = experiment(tmp.path(), "part", "");
    let text = fs::read_to_string(&part).unwrap().replace("total_meta_steps = 3", "total_meta_steps = 2");
    fs::write(&part, text).unwrap();
    run_ok(&["meta-train", s(&part)]);
    let resume = experiment(tmp.path(), "resume", "\n[train]\nresume = \"../part/run/meta-final.ckpt\"\n");
    run_ok(&["meta-train", s(&resume)]);
    assert_eq!(
        fs::read(tmp.path().join("full/run/meta-final.ckpt")).unwrap(),
        fs::read(tmp.path().join("resume/run/meta-final.ckpt")).unwrap()
    );
}

#[test]
fn plot_exports_curves_and_checks_manifests() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let meta = experiment(tmp.path(), "meta", "");
    let mt = experiment(tmp.path(), "mt", "\n[train]\napproach = \"multitask\"\n");
    run_ok(&["meta-train", s(&meta)]);
    run_ok(&["adapt-eval", s(&meta)]);
    run_ok(&["train-baseline", s(&mt)]);
    run_ok(&["adapt-eval", s(&mt)]);
    let ra = tmp.path().join("meta/run/eval/report.json");
    let rb = tmp.path().join("mt/run/eval/report.json");
    let out = tmp.path().join("plots");
    run_ok(&["plot", "--images", "--out", s(&out), s(&ra), s(&rb)]);
    let trend = fs::read_to_string(out.join("trend.tsv")).unwrap();
    assert_eq!(trend.lines().count(), 1 + 3 + 3);
    let det = fs::read_to_string(out.join("meta_emb-va-dec/mark003-det.txt")).unwrap();
    let curve = metatts::metrics::parse_curve_text(&det).unwrap();
    assert_eq!(metatts::metrics::curve_text(&curve), det);
    assert!(out.join("multitask_emb-va-dec/mark000-matrix.pgm").exists());

    // a report produced on a different manifest cannot join the comparison
    let other = experiment(tmp.path(), "other", "");
    let text = fs::read_to_string(&other).unwrap().replace("k_shot = 2\n\n[eval.adapt]", "k_shot = 2\ntask_seed = 9\n\n[eval.adapt]");
    fs::write(&other, text).unwrap();
    fs::create_dir_all(tmp.path().join("other/run")).unwrap();
    fs::copy(tmp.path().join("meta/run/meta-final.ckpt"), tmp.path().join("other/run/meta-final.ckpt")).unwrap();
    run_ok(&["adapt-eval", s(&other)]);
    let rc = tmp.path().join("other/run/eval/report.json");
    let (c, err) = code(&["plot", "--out", s(&tmp.path().join("p2")), s(&ra), s(&rc)]);
    assert_eq!(c, 3);
    assert!(err.contains("manifest"), "{err}");
}
