use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use agiqa_cli::{run, CHECKPOINT_FILE, LOG_FILE};
use agiqa_core::checkpoint::Checkpoint;
use agiqa_core::dataset::load_manifest;
use agiqa_core::embed::fixture_description;
use agiqa_core::optim::LrSchedule;
use agiqa_core::pipeline::EpochLog;
use agiqa_core::raster::{decode_image, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("agiqa").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok_json(args: &[&str]) -> Value {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "{args:?}: {err}");
    serde_json::from_str(out.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn synth_is_byte_deterministic_and_spans_the_score_range() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = ok_json(&["synth", "--out", s(&a), "--n", "512", "--seed", "3"]);
    ok_json(&["synth", "--out", s(&b), "--n", "512", "--seed", "3"]);
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), tb.len());
    assert!(ta == tb, "re-running synth changed some bytes");
    let span = ra["mos_max"].as_f64().unwrap() - ra["mos_min"].as_f64().unwrap();
    assert!(span >= 0.8, "score span {span}");
    assert_eq!(load_manifest(a.join("manifest.jsonl")).unwrap().len(), 512);
}

#[test]
fn synth_rejects_tiny_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&["synth", "--out", s(tmp.path()), "--n", "5"]);
    assert_ne!(code, 0, "{err}");
}

// gen-desc ---------------------------------------------------------------

/// Answers every POST with the same description and counts requests.
fn describe_server(description: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/describe", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut reader = BufReader::new(stream.unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let reply = serde_json::json!({ "description": description }).to_string();
            let _ = write!(
                reader.into_inner(),
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (url, hits)
}

/// A small synthetic set whose manifest has had every `p_d` removed.
fn manifest_without_pd(dir: &Path) -> PathBuf {
    ok_json(&["synth", "--out", s(dir), "--n", "12", "--seed", "1"]);
    let text = std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("p_d");
            format!("{v}\n")
        })
        .collect();
    let path = dir.join("bare.jsonl");
    std::fs::write(&path, stripped).unwrap();
    path
}

#[test]
fn gen_desc_leaves_complete_manifests_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    ok_json(&["synth", "--out", s(tmp.path()), "--n", "12"]);
    let input = tmp.path().join("manifest.jsonl");
    let output = tmp.path().join("out.jsonl");
    let r = ok_json(&["gen-desc", "--manifest", s(&input), "--out", s(&output)]);
    assert_eq!(r["filled"], 0);
    assert_eq!(r["unchanged"], 12);
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&output).unwrap());
}

#[test]
fn gen_desc_deterministic_fixtures_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let bare = manifest_without_pd(tmp.path());
    let (o1, o2) = (tmp.path().join("o1.jsonl"), tmp.path().join("o2.jsonl"));
    for o in [&o1, &o2] {
        let r = ok_json(&[
            "gen-desc",
            "--manifest",
            s(&bare),
            "--out",
            s(o),
            "--mode",
            "deterministic",
        ]);
        assert_eq!(r["filled"], 12);
        assert_eq!(r["remote_requests"], 0);
    }
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    for sample in load_manifest(&o1).unwrap() {
        assert_eq!(
            sample.descriptive_prompt.unwrap(),
            fixture_description(&sample.image_id)
        );
    }
}

#[test]
fn gen_desc_uses_the_remote_answer_and_its_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let bare = manifest_without_pd(tmp.path());
    let (url, hits) = describe_server("A calm harbour at night.");
    let cache = tmp.path().join("cache");
    let out = tmp.path().join("described.jsonl");
    let args = [
        "gen-desc",
        "--manifest",
        s(&bare),
        "--out",
        s(&out),
        "--mode",
        "remote",
        "--endpoint_url",
        &url,
        "--cache_dir",
        s(&cache),
    ];
    let first = ok_json(&args);
    assert_eq!(first["filled"], 12);
    assert_eq!(first["remote_requests"], 12);
    for sample in load_manifest(&out).unwrap() {
        assert_eq!(sample.descriptive_prompt.as_deref(), Some("A calm harbour at night."));
    }
    let second = ok_json(&args);
    assert_eq!(second["remote_requests"], 0);
    assert_eq!(hits.load(Ordering::SeqCst), 12);
}

#[test]
fn gen_desc_failures_are_reported_and_output_is_kept() {
    let tmp = tempfile::tempdir().unwrap();
    let bare = manifest_without_pd(tmp.path());
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/describe");
    let out = tmp.path().join("partial.jsonl");
    let cache = tmp.path().join("cache");
    let (code, stdout, _) = cli(&[
        "gen-desc",
        "--manifest",
        s(&bare),
        "--out",
        s(&out),
        "--mode",
        "remote",
        "--endpoint_url",
        &url,
        "--retries",
        "0",
        "--cache_dir",
        s(&cache),
    ]);
    assert_eq!(code, 2);
    let report: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report["failed"].as_array().unwrap().len(), 12);
    let kept = load_manifest(&out).unwrap();
    assert_eq!(kept.len(), 12);
    assert!(kept.iter().all(|s| s.descriptive_prompt.is_none()));
}

// train / eval / score ----------------------------------------------------

struct Run {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    summary: Value,
}

impl Run {
    fn checkpoint(&self) -> PathBuf {
        self.run.join(CHECKPOINT_FILE)
    }

    fn store(&self) -> PathBuf {
        self.data.join("embeddings")
    }
}

/// One short desk-config training run, converged on its training split,
/// shared by the tests below.
fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let run = tmp.path().join("run");
        ok_json(&["synth", "--out", s(&data), "--n", "120", "--seed", "2"]);
        let summary = ok_json(&[
            "train",
            "--manifest",
            s(&data.join("manifest.jsonl")),
            "--out",
            s(&run),
            "--preset",
            "desk",
            "--store_path",
            s(&data.join("embeddings")),
            "--max_epochs",
            "20",
            "--early_stop_patience",
            "20",
            "--batch_size",
            "4",
        ]);
        Run {
            _tmp: tmp,
            data,
            run,
            summary,
        }
    })
}

#[test]
fn training_log_follows_the_schedule() {
    let r = shared_run();
    let text = std::fs::read_to_string(r.run.join(LOG_FILE)).unwrap();
    let logs: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logs.len(), 20);
    let ck = Checkpoint::load(r.checkpoint()).unwrap();
    let schedule: &LrSchedule = &ck.config.schedule;
    for (i, log) in logs.iter().enumerate() {
        assert_eq!(log.epoch, i as u32);
        assert_eq!(log.lr, schedule.lr_at(log.epoch));
        assert!(log.train_loss.is_finite());
    }
    let best = logs.iter().map(|l| l.val_main_score).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(logs.last().unwrap().best_main_score, best);
    assert_eq!(r.summary["best_epoch"].as_u64().unwrap() as u32, ck.epoch);
}

#[test]
fn reloaded_checkpoint_reproduces_its_best_report() {
    let r = shared_run();
    let ck = Checkpoint::load(r.checkpoint()).unwrap();
    let report = ok_json(&[
        "eval",
        "--checkpoint",
        s(&r.checkpoint()),
        "--manifest",
        s(&r.run.join("val.jsonl")),
    ]);
    let drift = (report["main_score"].as_f64().unwrap() - ck.best.main_score).abs();
    assert!(drift < 1e-4, "main score drift {drift}");
    assert_eq!(report["n"].as_u64().unwrap() as usize, ck.best.n);
}

#[test]
fn eval_is_deterministic_and_fits_training_data_at_least_as_well() {
    let r = shared_run();
    let eval = |m: &str| {
        ok_json(&[
            "eval",
            "--checkpoint",
            s(&r.checkpoint()),
            "--manifest",
            s(&r.run.join(m)),
        ])
    };
    let (v1, v2) = (eval("val.jsonl"), eval("val.jsonl"));
    assert_eq!(v1, v2);
    let train = eval("train.jsonl");
    assert!(
        train["srcc"].as_f64().unwrap() >= v1["srcc"].as_f64().unwrap(),
        "{train} vs {v1}"
    );
}

fn predictions(r: &Run, crops: usize, seed: u64, out: &Path) -> Vec<f64> {
    let (crops, seed) = (crops.to_string(), seed.to_string());
    ok_json(&[
        "eval",
        "--checkpoint",
        s(&r.checkpoint()),
        "--manifest",
        s(&r.run.join("val.jsonl")),
        "--eval_crops",
        &crops,
        "--seed",
        &seed,
        "--predictions",
        s(out),
    ]);
    std::fs::read_to_string(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["score"].as_f64().unwrap())
        .collect()
}

#[test]
fn more_crops_reduce_variance_across_reseeds() {
    let r = shared_run();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.jsonl");
    let mean_variance = |crops| {
        let runs: Vec<Vec<f64>> = (0..6).map(|seed| predictions(r, crops, seed, &out)).collect();
        let n = runs[0].len();
        (0..n)
            .map(|i| {
                let m = runs.iter().map(|p| p[i]).sum::<f64>() / runs.len() as f64;
                runs.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>() / (runs.len() - 1) as f64
            })
            .sum::<f64>()
            / n as f64
    };
    let (one, fifteen) = (mean_variance(1), mean_variance(15));
    assert!(fifteen < one, "15-crop variance {fifteen} vs 1-crop {one}");
}

#[test]
fn score_matches_eval_for_the_same_sample() {
    let r = shared_run();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.jsonl");
    let ck = Checkpoint::load(r.checkpoint()).unwrap();
    let preds = predictions(r, ck.config.eval_crops, ck.config.seed, &out);
    let samples = load_manifest(r.run.join("val.jsonl")).unwrap();
    let checkpoint = r.checkpoint();
    for (sample, pred) in samples.iter().zip(&preds).take(3) {
        let args = [
            "score",
            "--checkpoint",
            s(&checkpoint),
            "--image",
            s(&sample.image_path),
            "--prompt",
            &sample.prompt,
            "--p_d",
            sample.descriptive_prompt.as_deref().unwrap(),
        ];
        let a = ok_json(&args);
        assert_eq!(a, ok_json(&args));
        let score = a["score"].as_f64().unwrap();
        assert!((score - pred).abs() < 1e-12, "{score} vs {pred}");
        assert_eq!(a["crop_scores"].as_array().unwrap().len(), ck.config.eval_crops);
        let (lo, hi) = (ck.normalizer.min, ck.normalizer.max);
        let margin = 0.2 * (hi - lo);
        assert!(score.is_finite() && score >= lo - margin && score <= hi + margin);
    }
}

#[test]
fn score_without_descriptive_prompt_is_a_usage_error() {
    let r = shared_run();
    let image = r.data.join("images").join("img_0000.ppm");
    let (code, _, err) = cli(&[
        "score",
        "--checkpoint",
        s(&r.checkpoint()),
        "--image",
        s(&image),
        "--prompt",
        "a fox",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("--p_d"), "{err}");
    // a deterministic provider can describe the image, but the file store
    // has no features for that text, which is a data error
    let (code, _, err) = cli(&[
        "score",
        "--checkpoint",
        s(&r.checkpoint()),
        "--image",
        s(&image),
        "--prompt",
        "a fox",
        "--store_path",
        s(&r.store()),
        "--p_d",
        "something never stored",
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn architecture_cannot_change_after_training() {
    let r = shared_run();
    let (code, _, err) = cli(&[
        "eval",
        "--checkpoint",
        s(&r.checkpoint()),
        "--manifest",
        s(&r.run.join("val.jsonl")),
        "--dim",
        "64",
    ]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn smoke_run_writes_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    ok_json(&["synth", "--out", s(&data), "--n", "32"]);
    let summary = ok_json(&[
        "train",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--out",
        s(&run),
        "--preset",
        "desk",
        "--store_path",
        s(&data.join("embeddings")),
        "--max_epochs",
        "2",
        "--early_stop_patience",
        "2",
    ]);
    assert_eq!(summary["epochs_run"], 2);
    let ck = Checkpoint::load(run.join(CHECKPOINT_FILE)).unwrap();
    ck.model().unwrap();
    assert_eq!(load_manifest(run.join("train.jsonl")).unwrap().len() + ck.best.n, 32);
}

#[test]
fn sixteen_samples_can_be_memorized() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    ok_json(&["synth", "--out", s(&data), "--n", "16", "--seed", "4"]);
    ok_json(&[
        "train",
        "--manifest",
        s(&data.join("manifest.jsonl")),
        "--out",
        s(&run),
        "--preset",
        "desk",
        "--store_path",
        s(&data.join("embeddings")),
        "--max_epochs",
        "30",
        "--early_stop_patience",
        "30",
    ]);
    let text = std::fs::read_to_string(run.join(LOG_FILE)).unwrap();
    let losses: Vec<f64> = text
        .lines()
        .map(|l| serde_json::from_str::<EpochLog>(l).unwrap().train_loss)
        .collect();
    assert_eq!(losses.len(), 30);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn missing_images_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    std::fs::write(
        &manifest,
        "{\"image\":\"gone_a.ppm\",\"prompt\":\"x\",\"mos\":1.0,\"p_d\":\"y\"}\n\
         {\"image\":\"gone_b.ppm\",\"prompt\":\"x\",\"mos\":2.0,\"p_d\":\"y\"}\n",
    )
    .unwrap();
    let r = shared_run();
    let (code, _, err) = cli(&["eval", "--checkpoint", s(&r.checkpoint()), "--manifest", s(&manifest)]);
    assert_eq!(code, 2);
    assert!(err.contains("gone_a.ppm") && err.contains("gone_b.ppm"), "{err}");
}

// viz-hvs ----------------------------------------------------------------

#[test]
fn viz_hvs_heatmap_follows_texture() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut img = RgbImage::filled(48, 32, [120, 120, 120]);
    for y in 0..16 {
        for x in 0..16 {
            let g = rng.random();
            img.set_pixel(x + 32, y, [g, g, g]);
        }
    }
    let src = tmp.path().join("in.ppm");
    std::fs::write(&src, img.to_ppm()).unwrap();
    let out = tmp.path().join("heat.pgm");
    let (code, table, err) = cli(&["viz-hvs", "--image", s(&src), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(table.lines().count(), 1 + 2 * 3);
    let heat = decode_image(&out).unwrap();
    assert_eq!((heat.width, heat.height), (48, 32));
    assert_eq!(heat.pixel(40, 8), [255; 3]);
    assert_eq!(heat.pixel(0, 0), [0; 3]);

    let (code, _, _) = cli(&["viz-hvs", "--image", s(&src), "--out", s(&out), "--patch_size", "64"]);
    assert_eq!(code, 2);
}

// process-level exit codes -------------------------------------------------

fn agiqa(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_agiqa")).args(args).output().unwrap()
}

#[test]
fn exit_codes_follow_the_convention() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let out = tmp.path().join("run");
    assert_eq!(agiqa(&["--help"]).status.code(), Some(0));
    assert_eq!(agiqa(&[]).status.code(), Some(1));
    assert_eq!(
        agiqa(&["train", "--manifest", s(&missing), "--out", s(&out), "--sead", "1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        agiqa(&[
            "train",
            "--manifest",
            s(&missing),
            "--out",
            s(&out),
            "--batch_size",
            "0"
        ])
        .status
        .code(),
        Some(1)
    );
    let o = agiqa(&["train", "--manifest", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));
}

#[test]
fn config_files_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"batch_size": 0}"#).unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let out = tmp.path().join("run");
    let base = [
        "train",
        "--manifest",
        s(&missing),
        "--out",
        s(&out),
        "--config",
        s(&cfg),
    ];
    // the file alone is invalid; a flag repairs it and the run reaches the data
    assert_eq!(cli(&base).0, 1);
    let mut fixed = base.to_vec();
    fixed.extend(["--batch_size", "4"]);
    assert_eq!(cli(&fixed).0, 2);
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(cli(&base).0, 1);
}
