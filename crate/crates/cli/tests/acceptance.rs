//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the report is always printed.

use std::path::Path;
use std::time::{Duration, Instant};

use agiqa_core::autodiff::{Tape, Var};
use agiqa_core::config::RunConfig;
use agiqa_core::embed::MultimodalFeatures;
use agiqa_core::fft::fft2;
use agiqa_core::gradcheck::{check_op, check_params, GradCheckReport};
use agiqa_core::hvs::{csf, hvs_weights, luminance, PatchGrid, ViewingConfig};
use agiqa_core::metrics::{main_score, plcc, srcc};
use agiqa_core::model::{aqafp_pool, moer_predict, select_top_k, Model, PreparedCrop};
use agiqa_core::optim::LrSchedule;
use agiqa_core::raster::{decode_image, decode_pnm, RgbImage};
use agiqa_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("agiqa").chain(args.iter().copied());
    let code = agiqa_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn cli_json(args: &[&str]) -> std::result::Result<Value, String> {
    let (code, out, err) = cli(args);
    if code != 0 {
        return Err(format!("`{}` exited {code}: {}", args.join(" "), err.trim()));
    }
    let last = out.lines().last().unwrap_or_default();
    serde_json::from_str(last).map_err(|e| format!("bad JSON from `{}`: {e}", args[0]))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 1 -----------------------------------------------------------------------

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "add_row",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.mul_row(v[0], v[1])),
        ),
        (
            "mul_col",
            vec![vec![3, 4], vec![3]],
            Box::new(|t, v| t.mul_col(v[0], v[1])),
        ),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("sigmoid", vec![vec![6]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("gelu", vec![vec![6]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("softmax/0", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax/1", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("mean_pool", vec![vec![4, 3]], Box::new(|t, v| t.mean_pool(v[0], 0))),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        ("narrow", vec![vec![4, 3]], Box::new(|t, v| t.narrow(v[0], 1, 1, 2))),
        (
            "concat",
            vec![vec![2, 3], vec![4, 3]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
        ),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("gather", vec![vec![6]], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]))),
        ("sum", vec![vec![2, 3]], Box::new(|t, v| Ok(t.sum(v[0])))),
        (
            "div_scalar",
            vec![vec![4], vec![1]],
            Box::new(|t, v| {
                // keep the divisor away from zero
                let two = t.constant(&[1], vec![2.5])?;
                let s = t.add(v[1], two)?;
                t.div_scalar(v[0], s)
            }),
        ),
        (
            "smooth_l1",
            vec![vec![6]],
            Box::new(|t, v| t.smooth_l1(v[0], &[0.9, -0.2, 0.1, 2.0, -1.5, 0.4], 0.5)),
        ),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = GradCheckReport::default();
    let mut failed = Vec::new();
    for (name, shapes, f) in op_suite() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let r = check_op(&inputs, 1e-4, 3, &*f).map_err(|e| format!("{name}: {e}"))?;
        if !r.passes(1e-4) {
            failed.push(name);
        }
        worst_op.merge(r);
    }

    let cfg = RunConfig::desk().model;
    let model = Model::new(cfg.clone(), 11).map_err(|e| e.to_string())?;
    let img = RgbImage::new(
        cfg.crop_size,
        cfg.crop_size,
        (0..cfg.crop_size * cfg.crop_size * 3).map(|_| rng.random()).collect(),
    )
    .unwrap();
    let crop = PreparedCrop::new(img, &cfg).map_err(|e| e.to_string())?;
    let feats = |rng: &mut ChaCha8Rng, n| MultimodalFeatures::new(random_tensor(&[n, cfg.dim], rng)).unwrap();
    let (pd, po) = (feats(&mut rng, 8), feats(&mut rng, 8));
    let all: Vec<_> = model
        .store
        .ids()
        .flat_map(|id| (0..model.store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let sample: Vec<_> = all.iter().copied().step_by(100).collect();
    let model_r =
        check_params(&model.store, &sample, 1e-4, |t| model.forward(t, &crop, &pd, &po)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failed.is_empty() && model_r.passes(1e-3) && secs < 60.0,
        format!(
            "{} op elements max rel {:.2e} (failed: {failed:?}); model {} of {} params max rel {:.2e}; {secs:.1}s",
            worst_op.checked,
            worst_op.max_rel_error,
            model_r.checked,
            all.len(),
            model_r.max_rel_error
        ),
    )
}

// 2 -----------------------------------------------------------------------

fn naive_dft(x: &[f64], s: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); s * s];
    for v in 0..s {
        for u in 0..s {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..s {
                for xx in 0..s {
                    let ang = -2.0 * std::f64::consts::PI * ((u * xx + v * y) % s) as f64 / s as f64;
                    re += x[y * s + xx] * ang.cos();
                    im += x[y * s + xx] * ang.sin();
                }
            }
            out[v * s + u] = (re, im);
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let s = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut max_err, mut max_parseval) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let patch = Tensor::from_vec(&[s, s], (0..s * s).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let fast = fft2(&patch).map_err(|e| e.to_string())?;
        let slow = naive_dft(patch.data(), s);
        for (k, &(re, im)) in slow.iter().enumerate() {
            max_err = max_err
                .max((fast.data()[2 * k] - re).abs())
                .max((fast.data()[2 * k + 1] - im).abs());
        }
        let energy: f64 = patch.data().iter().map(|v| v * v).sum();
        let spectral: f64 = fast.data().chunks(2).map(|c| c[0] * c[0] + c[1] * c[1]).sum::<f64>() / (s * s) as f64;
        max_parseval = max_parseval.max((energy - spectral).abs());
    }
    ensure(
        max_err < 1e-9 && max_parseval < 1e-9,
        format!("max |fft2 - dft| {max_err:.2e}, max Parseval gap {max_parseval:.2e}"),
    )
}

// 3 -----------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let a = [csf(0.0), csf(8.0), csf(30.0)];
    let a: Vec<f64> = a.into_iter().collect::<Result<_>>().map_err(|e| e.to_string())?;
    ensure(
        (a[0] - 0.04992).abs() <= 1e-6 && (a[1] - 0.9809).abs() <= 1e-3 && (a[2] - 0.187).abs() <= 1e-3,
        format!("A(0)={:.7} A(8)={:.5} A(30)={:.5}", a[0], a[1], a[2]),
    )
}

// 4 -----------------------------------------------------------------------

/// Ranks from a stable sort; tied runs share the mean of their positions.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut max_s, mut max_p, mut tied) = (0.0f64, 0.0f64, 0);
    for trial in 0..1000 {
        let n = rng.random_range(3..60);
        // every other trial draws from a small set of values to force ties
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if trial % 2 == 0 {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let (rx, ry) = (oracle_ranks(&x), oracle_ranks(&y));
        let want_s = oracle_pearson(&rx, &ry);
        let want_p = oracle_pearson(&x, &y);
        if !want_s.is_finite() || !want_p.is_finite() {
            continue;
        }
        tied += usize::from(rx.iter().any(|r| r.fract() != 0.0));
        let got_s = srcc(&x, &y).map_err(|e| e.to_string())?;
        let got_p = plcc(&x, &y).map_err(|e| e.to_string())?;
        max_s = max_s.max((got_s - want_s).abs());
        max_p = max_p.max((got_p - want_p).abs());
    }
    let ms = main_score(0.9051, 0.9558);
    ensure(
        max_s <= 1e-12 && max_p <= 1e-12 && tied > 100 && (ms - 0.93045).abs() < 1e-12 && (ms - 0.9305).abs() <= 0.5e-4,
        format!("max srcc gap {max_s:.1e}, max plcc gap {max_p:.1e}, {tied} tied vectors, main_score {ms:.5}"),
    )
}

// 5 -----------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = RunConfig::desk().model;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_sum, mut worst_perm, mut all_positive) = (0.0f64, 0.0f64, true);
    for trial in 0..20 {
        let mut model = Model::new(cfg.clone(), trial).map_err(|e| e.to_string())?;
        let gw = model.params.moer.gate.w;
        model.store.get_mut(gw).data_mut().iter_mut().for_each(|v| *v *= 8.0);
        let sci = random_tensor(&[cfg.dim], &mut rng);
        let vqi = random_tensor(&[cfg.dim], &mut rng);
        let score = |m: &Model| -> Result<(f64, Vec<usize>, Vec<f64>)> {
            let mut t = Tape::inference(&m.store);
            let (a, b) = (t.leaf(&sci), t.leaf(&vqi));
            let (s, r) = moer_predict(&mut t, a, b, &m.params.moer, cfg.top_k)?;
            Ok((t.scalar_value(s), r.experts, r.weights))
        };
        let (s0, experts, weights) = score(&model).map_err(|e| e.to_string())?;
        all_positive &= experts.len() == 3 && weights.iter().all(|&w| w > 0.0);
        worst_sum = worst_sum.max((weights.iter().sum::<f64>() - 1.0).abs());

        // relabel experts e -> perm[e] along with the matching gate columns
        let perm = [2usize, 0, 3, 1];
        let mut permuted = model.clone();
        let moer = &model.params.moer;
        let n = perm.len();
        for (e, &from) in perm.iter().enumerate() {
            for (a, b) in [
                (moer.experts[e].fc1.w, moer.experts[from].fc1.w),
                (moer.experts[e].fc1.b.unwrap(), moer.experts[from].fc1.b.unwrap()),
                (moer.experts[e].fc2.w, moer.experts[from].fc2.w),
                (moer.experts[e].fc2.b.unwrap(), moer.experts[from].fc2.b.unwrap()),
            ] {
                permuted
                    .store
                    .get_mut(a)
                    .data_mut()
                    .copy_from_slice(model.store.get(b).data());
            }
            let w = model.store.get(moer.gate.w).data().to_vec();
            for r in 0..w.len() / n {
                permuted.store.get_mut(moer.gate.w).data_mut()[r * n + e] = w[r * n + from];
            }
            let b = model.store.get(moer.gate.b.unwrap()).data()[from];
            permuted.store.get_mut(moer.gate.b.unwrap()).data_mut()[e] = b;
        }
        let (s1, _, _) = score(&permuted).map_err(|e| e.to_string())?;
        worst_perm = worst_perm.max((s0 - s1).abs());
    }
    let ties: Vec<Vec<(usize, f64)>> = (0..3).map(|_| select_top_k(&[0.25; 4], 3)).collect();
    let tie_ok = ties.iter().all(|t| t == &ties[0])
        && ties[0].iter().map(|&(i, _)| i).collect::<Vec<_>>() == vec![0, 1, 2]
        && ties[0].iter().all(|&(_, w)| (w - 1.0 / 3.0).abs() < 1e-15);
    ensure(
        all_positive && worst_sum <= 1e-12 && worst_perm <= 1e-12 && tie_ok,
        format!(
            "weight sum gap {worst_sum:.1e}, permutation gap {worst_perm:.1e}, equal logits pick {:?}",
            ties[0]
        ),
    )
}

// 6 -----------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut t = Tape::new();
    let f = t.constant(&[2, 2], vec![1.0, 0.0, 3.0, 0.0]).unwrap();
    let ws = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    let wc = t.constant(&[2], vec![1.0, 1.0]).unwrap();
    let v = aqafp_pool(&mut t, f, ws, wc, &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let hand = t.value(v).to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (p, d) = (rng.random_range(1..20), rng.random_range(1..20));
        let (s, w, c) = (
            rng.random_range(0.01..1.0),
            rng.random_range(0.01..1.0),
            rng.random_range(0.0..1.0),
        );
        let feats = random_tensor(&[p, d], &mut rng);
        let mut t = Tape::new();
        let f = t.leaf(&feats);
        let ws = t.constant(&[p, 1], vec![s; p]).unwrap();
        let wc = t.constant(&[d], vec![w; d]).unwrap();
        let v = aqafp_pool(&mut t, f, ws, wc, &vec![c; p]).map_err(|e| e.to_string())?;
        for j in 0..d {
            let mean = (0..p).map(|i| feats.data()[i * d + j]).sum::<f64>() / p as f64;
            worst = worst.max((t.value(v)[j] - s * w * mean).abs());
        }
    }
    ensure(
        hand == [7.0 / 3.0, 0.0] && worst <= 1e-12,
        format!("hand case {hand:?}, constant-weight gap {worst:.1e}"),
    )
}

// 7 -----------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let s = LrSchedule::default();
    let got: Vec<f64> = [0, 3, 6, 9].iter().map(|&e| s.lr_at(e)).collect();
    ensure(got == [2e-6, 1e-5, 1e-6, 1e-7], format!("lr at 0,3,6,9 = {got:?}"))
}

// 8 -----------------------------------------------------------------------

fn train_and_eval(data: &Path, run: &Path, extra: &[&str]) -> std::result::Result<(Value, Value), String> {
    let (manifest, store) = (data.join("manifest.jsonl"), data.join("embeddings"));
    let mut args = vec!["train", "--manifest", p(&manifest), "--out", p(run), "--preset", "desk"];
    args.extend_from_slice(&["--store_path", p(&store)]);
    args.extend_from_slice(extra);
    let summary = cli_json(&args)?;
    let report = cli_json(&[
        "eval",
        "--checkpoint",
        p(&run.join(agiqa_cli::CHECKPOINT_FILE)),
        "--manifest",
        p(&run.join("val.jsonl")),
    ])?;
    Ok((summary, report))
}

fn criterion_8(root: &Path) -> Outcome {
    let start = Instant::now();
    let data = root.join("synth");
    cli_json(&["synth", "--out", p(&data), "--n", "512", "--seed", "0"])?;
    let (summary, full) = train_and_eval(&data, &root.join("full"), &[])?;
    let elapsed = start.elapsed();
    let (_, ablated) = train_and_eval(&data, &root.join("no_sci"), &["--disable_sci", "true"])?;
    let get = |v: &Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let (srcc_full, ms_full, srcc_abl) = (get(&full, "srcc"), get(&full, "main_score"), get(&ablated, "srcc"));
    ensure(
        srcc_full >= 0.85 && ms_full >= 0.85 && elapsed < Duration::from_secs(600) && srcc_full - srcc_abl >= 0.05,
        format!(
            "holdout n={} srcc {srcc_full:.4} main {ms_full:.4} (best epoch {}, {} epochs) in {:.0}s; \
             without SCI srcc {srcc_abl:.4} (drop {:.4})",
            full["n"],
            summary["best_epoch"],
            summary["epochs_run"],
            elapsed.as_secs_f64(),
            srcc_full - srcc_abl
        ),
    )
}

// 9 -----------------------------------------------------------------------

fn criterion_9(root: &Path) -> Outcome {
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.join(format!("det_{name}"));
        let data = dir.join("synth");
        cli_json(&["synth", "--out", p(&data), "--n", "60", "--seed", "9"])?;
        let extra = ["--max_epochs", "3", "--early_stop_patience", "3", "--seed", "9"];
        let (summary, report) = train_and_eval(&data, &dir.join("run"), &extra)?;
        let log = std::fs::read_to_string(dir.join("run").join(agiqa_cli::LOG_FILE)).map_err(|e| e.to_string())?;
        runs.push((log, summary["best"].clone(), report));
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(
        a == b && !a.0.is_empty(),
        format!(
            "{} epoch log lines identical: {}, final reports identical: {}",
            a.0.lines().count(),
            a.0 == b.0,
            a.1 == b.1 && a.2 == b.2
        ),
    )
}

// 10 ----------------------------------------------------------------------

fn criterion_10(root: &Path) -> Outcome {
    let size = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut half = RgbImage::filled(size, size, [128, 128, 128]);
    for y in 0..size {
        for x in size / 2..size {
            let g: u8 = rng.random();
            half.set_pixel(x, y, [g, g, g]);
        }
    }
    let flat = RgbImage::filled(size, size, [90, 140, 200]);
    let mut heat = Vec::new();
    for (name, img) in [("half", &half), ("flat", &flat)] {
        let src = root.join(format!("{name}.ppm"));
        std::fs::write(&src, img.to_ppm()).map_err(|e| e.to_string())?;
        let out = root.join(format!("{name}_heat.pgm"));
        let (code, table, err) = cli(&["viz-hvs", "--image", p(&src), "--out", p(&out), "--patch_size", "16"]);
        if code != 0 {
            return Err(format!("viz-hvs exited {code}: {err}"));
        }
        let pgm = std::fs::read(&out).map_err(|e| e.to_string())?;
        let gray = decode_pnm(&pgm).map_err(|e| e.to_string())?;
        // the table must agree with the weights computed directly
        let grid = PatchGrid::new(4, 4, 16).unwrap();
        let direct = hvs_weights(
            &luminance(&decode_image(&src).unwrap()),
            &grid,
            &ViewingConfig::default(),
        )
        .unwrap();
        let listed: Vec<f64> = table
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
            .collect();
        if listed != direct.weights {
            return Err(format!("{name}: printed table differs from hvs_weights"));
        }
        heat.push(gray);
    }
    let mean = |img: &RgbImage, left: bool| -> f64 {
        let xs = if left { 0..size / 2 } else { size / 2..size };
        let mut sum = 0.0;
        for y in 0..size {
            for x in xs.clone() {
                sum += img.pixel(x, y)[0] as f64;
            }
        }
        sum / (size * size / 2) as f64
    };
    let (flat_half, noise_half) = (mean(&heat[0], true), mean(&heat[0], false));
    let uniform = (0..size).all(|y| (0..size).all(|x| heat[1].pixel(x, y) == [128; 3]));
    ensure(
        noise_half > flat_half && uniform,
        format!(
            "mean intensity flat half {flat_half:.1}, noise half {noise_half:.1}; flat image uniform 128: {uniform}"
        ),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(criterion_1)),
        ("FFT oracle", Box::new(criterion_2)),
        ("CSF golden values", Box::new(criterion_3)),
        ("metric oracle", Box::new(criterion_4)),
        ("MoE properties", Box::new(criterion_5)),
        ("AQAFP reductions", Box::new(criterion_6)),
        ("LR schedule", Box::new(criterion_7)),
        ("end-to-end learnability", Box::new(|| criterion_8(root))),
        ("determinism", Box::new(|| criterion_9(root))),
        ("HVS visualization", Box::new(|| criterion_10(root))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
