//! The `agiqa` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! and provider errors. Reports go to stdout as JSON; per-epoch training
//! logs go to stderr, one JSON object per line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use agiqa_core::checkpoint::Checkpoint;
use agiqa_core::config::{parse_override, read_overrides, RunConfig};
use agiqa_core::dataset::{load_manifest, write_manifest, Sample};
use agiqa_core::embed::{DescriptiveDirective, Provider, ProviderMode};
use agiqa_core::hvs::{hvs_weights, luminance, render_weight_heatmap, PatchGrid, ViewingConfig};
use agiqa_core::pipeline::{evaluate, prepare, score_image, train};
use agiqa_core::raster::decode_image;
use agiqa_core::synth::{generate, SynthConfig};
use agiqa_core::{Error, Result};
use clap::{value_parser, Arg, ArgMatches, Command};
use serde_json::{json, Map, Value};

pub const CHECKPOINT_FILE: &str = "checkpoint.scck";
pub const LOG_FILE: &str = "train_log.jsonl";

fn config_keys() -> Vec<String> {
    match RunConfig::default().to_value() {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

fn with_overrides(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("Flat JSON config; flags below override its keys"),
    );
    config_keys().into_iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help_heading("Config overrides"),
        )
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .required(true)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    Command::new("agiqa")
        .about("Quality assessment for AI-generated images")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic dataset with known ground truth")
                .arg(path_arg("out", "Output directory"))
                .arg(
                    Arg::new("n")
                        .long("n")
                        .default_value("512")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(
                    Arg::new("image_size")
                        .long("image_size")
                        .default_value("64")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("dim")
                        .long("dim")
                        .default_value("32")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("n_tokens")
                        .long("n_tokens")
                        .default_value("8")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("gamma")
                        .long("gamma")
                        .default_value("1.0")
                        .value_parser(value_parser!(f64)),
                )
                .arg(
                    Arg::new("noise_rms")
                        .long("noise_rms")
                        .default_value("40.0")
                        .value_parser(value_parser!(f64)),
                ),
        )
        .subcommand(with_overrides(
            Command::new("gen-desc")
                .about("Fill missing descriptive prompts in a manifest")
                .arg(path_arg("manifest", "Input manifest (JSONL)"))
                .arg(path_arg("out", "Output manifest"))
                .arg(Arg::new("directive").long("directive").value_name("TEXT"))
                .arg(preset_arg()),
        ))
        .subcommand(with_overrides(
            Command::new("train")
                .about("Train a model and keep the best validation checkpoint")
                .arg(path_arg("manifest", "Training manifest (JSONL)"))
                .arg(path_arg("out", "Run directory"))
                .arg(preset_arg()),
        ))
        .subcommand(with_overrides(
            Command::new("eval")
                .about("Evaluate a checkpoint on a manifest")
                .arg(path_arg("checkpoint", "Checkpoint file"))
                .arg(path_arg("manifest", "Manifest (JSONL)"))
                .arg(
                    Arg::new("predictions")
                        .long("predictions")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("Also write per-sample predictions as JSONL"),
                ),
        ))
        .subcommand(with_overrides(
            Command::new("score")
                .about("Score a single image")
                .arg(path_arg("checkpoint", "Checkpoint file"))
                .arg(path_arg("image", "PPM or PGM image"))
                .arg(Arg::new("prompt").long("prompt").required(true).value_name("TEXT"))
                .arg(
                    Arg::new("p_d")
                        .long("p_d")
                        .value_name("TEXT")
                        .help("Descriptive prompt"),
                )
                .arg(
                    Arg::new("id")
                        .long("id")
                        .value_name("ID")
                        .help("Image id (default: file stem)"),
                ),
        ))
        .subcommand(
            Command::new("viz-hvs")
                .about("Render per-patch HVS weights as a PGM heatmap")
                .arg(path_arg("image", "PPM or PGM image"))
                .arg(path_arg("out", "Output PGM"))
                .arg(
                    Arg::new("patch_size")
                        .long("patch_size")
                        .default_value("16")
                        .value_parser(value_parser!(usize)),
                ),
        )
}

fn preset_arg() -> Arg {
    Arg::new("preset")
        .long("preset")
        .value_parser(["default", "desk"])
        .default_value("default")
        .help("Starting configuration before --config and overrides")
}

/// Config file keys, then flags on top; validation happens once on the
/// combined result.
fn resolve_config(m: &ArgMatches, base: RunConfig) -> Result<RunConfig> {
    let mut combined = match m.get_one::<PathBuf>("config") {
        Some(p) => read_overrides(p)?,
        None => Map::new(),
    };
    let current = base.to_value();
    for k in config_keys() {
        if let Some(raw) = m.get_one::<String>(&k) {
            let v = parse_override(raw, current.get(&k));
            combined.insert(k, v);
        }
    }
    base.merged(&combined)
}

fn preset(m: &ArgMatches) -> RunConfig {
    match m.get_one::<String>("preset").map(String::as_str) {
        Some("desk") => RunConfig::desk(),
        _ => RunConfig::default(),
    }
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{v}").map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_synth(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let dir = m.get_one::<PathBuf>("out").unwrap();
    let cfg = SynthConfig {
        n: *m.get_one("n").unwrap(),
        seed: *m.get_one("seed").unwrap(),
        image_size: *m.get_one("image_size").unwrap(),
        dim: *m.get_one("dim").unwrap(),
        n_tokens: *m.get_one("n_tokens").unwrap(),
        gamma: *m.get_one("gamma").unwrap(),
        noise_rms: *m.get_one("noise_rms").unwrap(),
    };
    let records = generate(dir, &cfg)?;
    let lo = records.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
    emit(
        out,
        &json!({
            "manifest": dir.join("manifest.jsonl"),
            "embeddings": dir.join("embeddings"),
            "n": records.len(),
            "mos_min": lo,
            "mos_max": hi,
        }),
    )
}

fn cmd_gen_desc(m: &ArgMatches, out: &mut dyn Write) -> Result<bool> {
    let cfg = resolve_config(m, preset(m))?;
    let directive = match m.get_one::<String>("directive") {
        Some(t) => DescriptiveDirective::new(t.clone())?,
        None => DescriptiveDirective::default(),
    };
    let provider = Provider::new(cfg.provider.clone(), cfg.model.dim)?;
    let mut samples = load_manifest(m.get_one::<PathBuf>("manifest").unwrap())?;
    let (mut filled, mut unchanged) = (0, 0);
    let mut failed = Vec::new();
    for s in &mut samples {
        if s.descriptive_prompt.is_some() {
            unchanged += 1;
            continue;
        }
        match provider.generate_descriptive_prompt(&s.image_path, &s.image_id, None, &directive) {
            Ok(d) => {
                s.descriptive_prompt = Some(d);
                filled += 1;
            }
            Err(e) => failed.push(json!({"id": s.image_id, "error": e.to_string()})),
        }
    }
    let out_path = m.get_one::<PathBuf>("out").unwrap();
    write_manifest(out_path, &absolute_paths(samples)?)?;
    emit(
        out,
        &json!({
            "manifest": out_path,
            "filled": filled,
            "unchanged": unchanged,
            "failed": failed,
            "remote_requests": provider.remote_calls(),
        }),
    )?;
    Ok(failed.is_empty())
}

/// Makes image paths absolute so a manifest can be written elsewhere.
fn absolute_paths(samples: Vec<Sample>) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|mut s| {
            s.image_path = std::path::absolute(&s.image_path).map_err(|e| Error::Io {
                path: s.image_path.clone(),
                source: e,
            })?;
            Ok(s)
        })
        .collect()
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(m, preset(m))?;
    let samples = load_manifest(m.get_one::<PathBuf>("manifest").unwrap())?;
    let dir = m.get_one::<PathBuf>("out").unwrap();
    create_dir(dir)?;
    let mut log = String::new();
    let outcome = train(&cfg, &samples, |l| {
        let line = serde_json::to_string(l).expect("log serializes");
        let _ = writeln!(err, "{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file(&dir.join(LOG_FILE), log.as_bytes())?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ck_path)?;
    write_manifest(dir.join("train.jsonl"), &absolute_paths(outcome.train)?)?;
    write_manifest(dir.join("val.jsonl"), &absolute_paths(outcome.val)?)?;
    emit(
        out,
        &json!({
            "checkpoint": ck_path,
            "best_epoch": outcome.checkpoint.epoch,
            "epochs_run": outcome.logs.len(),
            "best": outcome.checkpoint.best,
        }),
    )
}

/// Checkpoint config plus overrides; the architecture must not change.
fn checkpoint_config(m: &ArgMatches, ck: &Checkpoint) -> Result<RunConfig> {
    let cfg = resolve_config(m, ck.config.clone())?;
    let mut arch = cfg.model.clone();
    arch.disable_sci = ck.config.model.disable_sci;
    if arch != ck.config.model {
        return Err(Error::Config(
            "model architecture keys cannot be overridden for a trained checkpoint".into(),
        ));
    }
    Ok(cfg)
}

fn cmd_eval(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(m.get_one::<PathBuf>("checkpoint").unwrap())?;
    let cfg = checkpoint_config(m, &ck)?;
    let mut model = ck.model()?;
    model.config = cfg.model.clone();
    let provider = Provider::new(cfg.provider.clone(), cfg.model.dim)?;
    let samples = load_manifest(m.get_one::<PathBuf>("manifest").unwrap())?;
    let prepared = prepare(&samples, &provider)?;
    let (report, preds) = evaluate(&model, &ck.normalizer, &prepared, cfg.eval_crops, cfg.seed)?;
    if let Some(p) = m.get_one::<PathBuf>("predictions") {
        let mut text = String::new();
        for (s, pred) in samples.iter().zip(&preds) {
            text.push_str(&json!({"id": s.image_id, "score": pred, "mos": s.mos}).to_string());
            text.push('\n');
        }
        write_file(p, text.as_bytes())?;
    }
    emit(out, &serde_json::to_value(report).expect("report serializes"))
}

fn cmd_score(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(m.get_one::<PathBuf>("checkpoint").unwrap())?;
    let cfg = checkpoint_config(m, &ck)?;
    let mut model = ck.model()?;
    model.config = cfg.model.clone();
    let provider = Provider::new(cfg.provider.clone(), cfg.model.dim)?;
    let image = m.get_one::<PathBuf>("image").unwrap();
    let id = match m.get_one::<String>("id") {
        Some(id) => id.clone(),
        None => image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let prompt = m.get_one::<String>("prompt").unwrap();
    let p_d = match (m.get_one::<String>("p_d"), cfg.provider.mode) {
        (Some(p), _) => p.clone(),
        (None, ProviderMode::FileStore) => {
            return Err(Error::Config(
                "no descriptive prompt: pass --p_d, or use --mode remote --endpoint_url URL \
                 (or --mode deterministic) to generate one"
                    .into(),
            ))
        }
        (None, _) => provider.generate_descriptive_prompt(image, &id, None, &DescriptiveDirective::default())?,
    };
    let report = score_image(&ck, &model, &provider, image, &id, prompt, &p_d)?;
    emit(out, &serde_json::to_value(report).expect("report serializes"))
}

fn cmd_viz_hvs(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let img = decode_image(m.get_one::<PathBuf>("image").unwrap())?;
    let ps: usize = *m.get_one("patch_size").unwrap();
    let (rows, cols) = (img.height / ps.max(1), img.width / ps.max(1));
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than one {ps}x{ps} patch",
            img.width, img.height
        )));
    }
    let grid = PatchGrid::new(rows, cols, ps)?;
    let region = img.crop(0, 0, grid.width(), grid.height());
    let map = hvs_weights(&luminance(&region), &grid, &ViewingConfig::default())?;
    write_file(
        m.get_one::<PathBuf>("out").unwrap(),
        &render_weight_heatmap(&map).to_pgm(),
    )?;
    let mut table = String::from("row\tcol\tweight\n");
    for r in 0..rows {
        for c in 0..cols {
            table.push_str(&format!("{r}\t{c}\t{}\n", map.weights[r * cols + c]));
        }
    }
    out.write_all(table.as_bytes()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let result = match matches.subcommand() {
        Some(("synth", m)) => cmd_synth(m, out).map(|_| true),
        Some(("gen-desc", m)) => cmd_gen_desc(m, out),
        Some(("train", m)) => cmd_train(m, out, err).map(|_| true),
        Some(("eval", m)) => cmd_eval(m, out).map(|_| true),
        Some(("score", m)) => cmd_score(m, out).map(|_| true),
        Some(("viz-hvs", m)) => cmd_viz_hvs(m, out).map(|_| true),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
