//! One line per acceptance criterion, each with its wall time. Exits non-zero
//! if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ssformer_core::complexity::{omega_ssformer, ComplexityInputs};
use ssformer_core::metrics::ConfusionMatrix;
use ssformer_core::selftest;
use ssformer_core::train::Checkpoint;

type Verdict = Result<String, String>;

fn ssformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssformer")).args(args).output().expect("binary runs")
}

fn ok_json(out: Output) -> Result<Value, String> {
    if !out.status.success() {
        return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn params() -> Verdict {
    let v = ok_json(ssformer(&["analyze", "--profile", "ade20k"]))?;
    let p = v["params_total"].as_u64().ok_or("no params_total")? as f64;
    let msg = format!("params_total {p} ({:+.2}% vs 87.5M)", (p / 87.5e6 - 1.0) * 100.0);
    if within(p, 87.5e6, 0.03) { Ok(msg) } else { Err(msg) }
}

fn flops_at(side: u32) -> Result<f64, String> {
    let s = side.to_string();
    let v = ok_json(ssformer(&["analyze", "--profile", "ade20k", "--height", &s, "--width", &s]))?;
    Ok(v["flops_detailed"].as_u64().ok_or("no flops_detailed")? as f64)
}

fn flops() -> Verdict {
    let f = flops_at(512)?;
    let msg = format!("flops_detailed {:.2}G ({:+.2}% vs 91.01G)", f / 1e9, (f / 91.01e9 - 1.0) * 100.0);
    if within(f, 91.01e9, 0.20) { Ok(msg) } else { Err(msg) }
}

fn scaling() -> Verdict {
    let r = flops_at(1024)? / flops_at(512)?;
    let msg = format!("1024^2 / 512^2 = {r:.3}");
    if (3.8..=4.1).contains(&r) { Ok(msg) } else { Err(msg) }
}

fn omega() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let x = ComplexityInputs {
            h: rng.gen_range(1..1 << 20),
            w: rng.gen_range(1..1 << 20),
            c: rng.gen_range(1..1 << 16),
            m: rng.gen_range(1..64),
            n_cls: rng.gen_range(1..1 << 12),
        };
        let big = |v: u64| BigUint::from(v);
        let hw = big(x.h) * big(x.w);
        let expect = big(4) * &hw * big(x.c) * big(x.c)
            + big(2) * big(x.m) * big(x.m) * &hw * big(x.c)
            + &hw * big(x.c) * big(x.c)
            + big(4) * &hw * big(x.c) * big(x.n_cls);
        if omega_ssformer(&x) != expect {
            return Err(format!("input {i} {x:?} differs"));
        }
    }
    Ok("1000 random inputs match the term-by-term sum".into())
}

const TOY_RUN: &str = r#"{
  "train": {"profile": "toy", "lr": 0.001, "batch_size": 8, "max_iters": 300, "eval_interval": 100, "seed": 0},
  "synth": {"seed": 0, "train_samples": 512, "eval_samples": 64, "height": 64, "width": 64}
}"#;

fn toy_training(dir: &Path) -> Verdict {
    let cfg = dir.join("toy.json");
    fs::write(&cfg, TOY_RUN).map_err(|e| e.to_string())?;
    let ckpt = dir.join("toy.ssfm");
    let out = ssformer(&["train", "--config", cfg.to_str().unwrap(), "--data", "synth", "--out", ckpt.to_str().unwrap()]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let log = fs::read_to_string(dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    let evals: Vec<(u64, f64)> = log
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|e| e["event"] == "eval")
        .map(|e| (e["iter"].as_u64().unwrap(), e["miou"].as_f64().unwrap()))
        .collect();
    let trace = evals.iter().map(|(i, m)| format!("{i}:{m:.3}")).collect::<Vec<_>>().join(" ");

    // the checkpoint on disk must score the same on the held-out split
    let metrics = dir.join("toy_eval.json");
    let v = ok_json(ssformer(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", "synth", "--config", cfg.to_str().unwrap(),
        "--out", metrics.to_str().unwrap(),
    ]))?;
    let miou = v["miou"].as_f64().ok_or("no miou")?;
    let msg = format!("held-out mIoU {miou:.4} after 300 iters (eval trace {trace})");
    if miou >= 0.90 && evals.last().map(|e| e.1) == Some(miou) { Ok(msg) } else { Err(msg) }
}

fn gradients() -> Verdict {
    let outcomes = selftest::gradient_suite(6, 100, 2);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    if let Some(f) = failed.first() {
        return Err(format!("{} of {} failed, first: {}: {}", failed.len(), outcomes.len(), f.name, f.detail));
    }
    Ok(format!("{} finite-difference cases below {:e} relative error", outcomes.len(), selftest::GRAD_TOL))
}

fn mechanisms() -> Verdict {
    let out = ssformer(&["selftest", "--seed", "7"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let mech: Vec<&str> = text.lines().filter(|l| l.contains("[mechanism]")).collect();
    let msg = format!("{} mechanism checks, selftest exit {:?}", mech.len(), out.status.code());
    if out.status.success() && mech.len() >= 4 && mech.iter().all(|l| l.starts_with("PASS")) {
        Ok(msg)
    } else {
        Err(format!("{msg}\n{text}"))
    }
}

fn metrics_oracle() -> Verdict {
    const IGNORE: u32 = 255;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 0..50 {
        let n = rng.gen_range(2..10u32);
        let gt: Vec<u32> = (0..256).map(|_| if rng.gen_bool(0.15) { IGNORE } else { rng.gen_range(0..n) }).collect();
        let pred: Vec<u32> = (0..256).map(|_| rng.gen_range(0..n)).collect();
        let mut cm = ConfusionMatrix::new(n as usize);
        cm.update(&pred, &gt, IGNORE).map_err(|e| e.to_string())?;

        let mut ious = Vec::new();
        for c in 0..n {
            let (mut inter, mut union) = (0u64, 0u64);
            for y in 0..16 {
                for x in 0..16 {
                    let (g, p) = (gt[y * 16 + x], pred[y * 16 + x]);
                    if g == IGNORE {
                        continue;
                    }
                    if g == c && p == c {
                        inter += 1;
                    }
                    if g == c || p == c {
                        union += 1;
                    }
                    if g == c && cm.get(c as usize, p as usize) == 0 {
                        return Err(format!("pair {t}: missing count at ({g},{p})"));
                    }
                }
            }
            let row: u64 = (0..n).map(|p| cm.get(c as usize, p as usize)).sum();
            let col: u64 = (0..n).map(|g| cm.get(g as usize, c as usize)).sum();
            if cm.get(c as usize, c as usize) != inter || row + col - inter != union {
                return Err(format!("pair {t}: class {c} counts differ"));
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let counted = gt.iter().filter(|&&g| g != IGNORE).count() as u64;
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        let got = cm.miou().map_err(|e| e.to_string())?;
        if cm.total() != counted || got != expect {
            return Err(format!("pair {t}: mIoU {got} vs {expect}, {} vs {counted} pixels", cm.total()));
        }
    }
    Ok("50 random 16x16 pairs with ignored pixels match exactly".into())
}

fn persistence(dir: &Path) -> Verdict {
    let cfg = dir.join("short.json");
    fs::write(
        &cfg,
        r#"{"train": {"lr": 0.001, "batch_size": 4, "max_iters": 5, "eval_interval": 0, "seed": 11},
            "synth": {"seed": 11, "train_samples": 8, "eval_samples": 0, "height": 32, "width": 32}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.join(format!("{run}.ssfm"));
        let out = ssformer(&["train", "--config", cfg.to_str().unwrap(), "--data", "synth", "--out", ckpt.to_str().unwrap()]);
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        bytes.push(fs::read(&ckpt).map_err(|e| e.to_string())?);
    }
    if bytes[0] != bytes[1] {
        return Err("two seeded runs wrote different checkpoints".into());
    }
    let ck = Checkpoint::load(&dir.join("a.ssfm")).map_err(|e| e.to_string())?;
    let resaved = dir.join("resaved.ssfm");
    ck.save(&resaved).map_err(|e| e.to_string())?;
    let model = ck.to_model(None).map_err(|e| e.to_string())?;
    let rebuilt = Checkpoint::from_model(&model, ck.optimizer.as_ref());
    if fs::read(&resaved).map_err(|e| e.to_string())? != bytes[0] || rebuilt.to_bytes() != bytes[0] {
        return Err("load/save changed the checkpoint bytes".into());
    }
    Ok(format!("seeded runs and load/save agree on all {} bytes", bytes[0].len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("1 parameter count", Duration::from_secs(1), Box::new(params)),
        ("2 flops at 512x512", Duration::from_secs(5), Box::new(flops)),
        ("3 linear scaling", Duration::from_secs(10), Box::new(scaling)),
        ("4 closed-form oracle", Duration::from_secs(1), Box::new(omega)),
        ("5 toy training mIoU", Duration::from_secs(15 * 60), Box::new(|| toy_training(dir.path()))),
        ("6 gradient integrity", Duration::from_secs(5 * 60), Box::new(gradients)),
        ("7 mechanism invariants", Duration::from_secs(2 * 60), Box::new(mechanisms)),
        ("8 metrics oracle", Duration::from_secs(10), Box::new(metrics_oracle)),
        ("9 determinism and persistence", Duration::from_secs(5 * 60), Box::new(|| persistence(dir.path()))),
    ];
    let mut failed = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let verdict = check();
        let took = start.elapsed();
        let (pass, detail) = match verdict {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("{} criterion {name} [{:.2?}]: {detail}", if pass { "PASS" } else { "FAIL" }, took);
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
