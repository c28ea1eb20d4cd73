//! Invariant suites run by the `selftest` command: attention mechanics,
//! finite-difference gradients, metric oracles and checkpoint persistence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth_dataset;
use crate::error::Result;
use crate::gradcheck::{self, rel_error, FD_STEP};
use crate::metrics::ConfusionMatrix;
use crate::model::encoder::{window_partition, window_reverse};
use crate::model::{EncoderConfig, ModelConfig, ParamBuilder, PatchMerging, Profile, SsFormer, SwinBlock};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Checkpoint, RunConfig, SynthConfig, TrainConfig};

/// Tolerance for finite-difference agreement.
pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(suite: &'static str, name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(suite, name, passed, detail),
            Err(e) => Self::new(suite, name, false, format!("error: {e}")),
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn random64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

// ---- mechanisms ----

fn window_roundtrip(rng: &mut ChaCha8Rng, trials: usize) -> Result<(bool, String)> {
    for _ in 0..trials {
        let m = rng.gen_range(1..8);
        let (gh, gw, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..9));
        let src = random_tensor(rng, &[gh * m, gw * m, c]);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(src.clone());
        let w = window_partition(&mut tape, x, m)?;
        let back = window_reverse(&mut tape, w, m, gh * m, gw * m)?;
        if tape.value(back).data() != src.data() {
            return Ok((false, format!("mismatch for {}x{}x{c}, window {m}", gh * m, gw * m)));
        }
    }
    Ok((true, format!("{trials} random maps bit-exact")))
}

/// Runs a shifted block and checks that every pair of tokens from different
/// regions of the un-shifted image gets (near) zero attention.
fn shifted_mask(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    let mut blocked = 0usize;
    for m in [2usize, 3, 4, 7] {
        for mult in [2usize, 3] {
            let hw = m * mult;
            let shift = m / 2;
            let cfg = EncoderConfig {
                window_size: m,
                embed_dim: 8,
                num_heads: vec![2, 2, 2, 2],
                depths: vec![2, 2, 2, 2],
                ..EncoderConfig::default()
            };
            let mut pb = ParamBuilder::new(rng.gen());
            let block = SwinBlock::new(&mut pb, "b", &cfg, 0, 1);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(random_tensor(rng, &[hw, hw, 8]));
            let (_, weights) = block.forward_traced(&mut tape, x)?;
            let wts = tape.value(weights);
            let grid = hw / m;
            let n = m * m;
            // region of an original coordinate: windows of the shifted
            // partition start at shift, shift + m, ...
            let region = |p: usize| (p + m - shift) / m;
            let origin = |win: usize, t: usize| {
                let y = (win / grid) * m + t / m;
                let x = (win % grid) * m + t % m;
                (region((y + shift) % hw), region((x + shift) % hw))
            };
            for win in 0..grid * grid {
                for q in 0..n {
                    for k in 0..n {
                        if origin(win, q) == origin(win, k) {
                            continue;
                        }
                        for h in 0..2 {
                            worst = worst.max(wts.at(&[win, h, q, k]));
                            blocked += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((worst < 1e-7, format!("{blocked} blocked pairs, max weight {worst:e}")))
}

fn softmax_rows(rng: &mut ChaCha8Rng, trials: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (rows, len) = (rng.gen_range(1..20), rng.gen_range(1..50));
        let scale = [1.0f32, 100.0, 1e4][rng.gen_range(0..3)];
        let x = Tensor::from_fn(vec![rows, len], |_| rng.gen_range(-scale..scale));
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1)?;
        for row in tape.value(s).data().chunks(len) {
            if row.iter().any(|&p| p < 0.0) {
                return Ok((false, "negative probability".into()));
            }
            worst = worst.max((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs());
        }
    }
    Ok((worst <= 1e-5, format!("max |row sum - 1| = {worst:e}")))
}

fn merging_shape() -> Result<(bool, String)> {
    let mut pb = ParamBuilder::new(0);
    let pm = PatchMerging::new(&mut pb, "m", 3);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(vec![4, 4, 3], |i| i as f32 / 48.0));
    let y = pm.forward(&mut tape, x)?;
    let shape = tape.shape(y).to_vec();
    Ok((shape == [2, 2, 6], format!("(4,4,3) -> {shape:?}")))
}

pub fn mechanism_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        CheckOutcome::from_result("mechanism", "window partition/reverse roundtrip", window_roundtrip(&mut rng, 200)),
        CheckOutcome::from_result("mechanism", "shifted-window mask", shifted_mask(&mut rng)),
        CheckOutcome::from_result("mechanism", "softmax rows sum to one", softmax_rows(&mut rng, 200)),
        CheckOutcome::from_result("mechanism", "patch merging shape", merging_shape()),
    ]
}

// ---- gradients ----

/// Weighted sum so every output element carries a different upstream
/// gradient.
fn probe(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub const OPS: [&str; 17] = [
    "add", "mul", "scale", "gelu", "matmul", "matmul_batched", "linear", "softmax", "layernorm", "reshape_permute",
    "concat_narrow", "pad", "roll", "gather_rows", "upsample_bilinear", "mean", "cross_entropy",
];

/// One randomized finite-difference check of op `OPS[which]`.
pub fn op_case(which: usize, seed: u64) -> Result<gradcheck::GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = || rng.gen_range(1..5usize);
    let (a, b, c) = (d(), d(), d());
    let k = d();
    let ps = seed.wrapping_mul(31);
    let r = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    match OPS[which] {
        "add" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[b, c])], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, ps)
        }),
        "mul" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[c])], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, ps)
        }),
        "scale" => gradcheck::check(&[random64(r, &[a, b])], |t, v| {
            let y = t.scale(v[0], -1.3)?;
            probe(t, y, ps)
        }),
        "gelu" => gradcheck::check(&[Tensor::from_fn(vec![a, b, c], |_| r.gen_range(-3.0..3.0))], |t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, ps)
        }),
        "matmul" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[c, k])], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, ps)
        }),
        "matmul_batched" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[a, c, k])], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, ps)
        }),
        "linear" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[c, k]), random64(r, &[k])], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, ps)
        }),
        "softmax" => {
            let axis = (seed % 3) as usize;
            gradcheck::check(&[Tensor::from_fn(vec![a, b, c], |_| r.gen_range(-3.0..3.0))], |t, v| {
                let y = t.softmax(v[0], axis)?;
                probe(t, y, ps)
            })
        }
        "layernorm" => {
            // rows with tiny variance make central differences themselves inaccurate
            let c = c + 2;
            let x = Tensor::from_fn(vec![a, b, c], |_| r.gen_range(-3.0..3.0));
            gradcheck::check(&[x, random64(r, &[c]), random64(r, &[c])], |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, ps)
            })
        }
        "reshape_permute" => gradcheck::check(&[random64(r, &[a, b, c])], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            let y = t.reshape(y, &[c * a, b])?;
            probe(t, y, ps)
        }),
        "concat_narrow" => gradcheck::check(&[random64(r, &[a, b, c]), random64(r, &[a, k, c])], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.narrow(y, 1, b.min(1), k)?;
            probe(t, y, ps)
        }),
        "pad" => gradcheck::check(&[random64(r, &[a, b, c])], |t, v| {
            let y = t.pad(v[0], 1, k % 2, k)?;
            probe(t, y, ps)
        }),
        "roll" => gradcheck::check(&[random64(r, &[a, b, c])], |t, v| {
            let y = t.roll(v[0], &[k as isize, -(k as isize), 1])?;
            probe(t, y, ps)
        }),
        "gather_rows" => {
            let index: Vec<usize> = (0..a + k).map(|_| r.gen_range(0..b)).collect();
            gradcheck::check(&[random64(r, &[b, c])], move |t, v| {
                let y = t.gather_rows(v[0], &index)?;
                probe(t, y, ps)
            })
        }
        "upsample_bilinear" => gradcheck::check(&[random64(r, &[a, b, c])], |t, v| {
            let y = t.upsample_bilinear(v[0], a + k, b * 2 + 1)?;
            probe(t, y, ps)
        }),
        "mean" => gradcheck::check(&[random64(r, &[a, b, c])], |t, v| {
            let y = t.gelu(v[0])?;
            t.mean(y)
        }),
        "cross_entropy" => {
            let labels: Vec<u32> = (0..a * b).map(|_| if r.gen_bool(0.2) { 255 } else { r.gen_range(0..c as u32 + 1) }).collect();
            gradcheck::check(&[random64(r, &[a, b, c + 1])], move |t, v| t.cross_entropy(v[0], &labels, 255))
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// End-to-end check of the toy architecture's loss gradient. Parameters are
/// stored in f32, so each probe perturbs the f32 value and divides by the
/// step actually taken; the loss itself is evaluated in f64. `per_tensor`
/// elements are sampled from every parameter tensor, plus the same number of
/// input pixels.
pub fn model_case(seed: u64, per_tensor: usize) -> Result<gradcheck::GradReport> {
    let cfg = Profile::Toy.model_config();
    let mut model = SsFormer::new(&cfg, seed)?;
    let sample = synth_dataset(seed, 1, 32, 32, cfg.decoder.num_classes)?.remove(0);
    let mut labels = sample.label.data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in labels.iter_mut() {
        if rng.gen_bool(0.1) {
            *l = cfg.decoder.ignore_index;
        }
    }
    let image: Tensor<f64> = sample.image.cast();
    let ignore = cfg.decoder.ignore_index;
    let loss_of = |model: &SsFormer, image: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(image.clone());
        let y = model.forward(&mut tape, x)?;
        let l = tape.cross_entropy(y, &labels, ignore)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::<f64>::new();
    let mut leaf = image.clone();
    leaf.requires_grad = true;
    let x = tape.leaf(leaf);
    let y = model.forward(&mut tape, x)?;
    let l = tape.cross_entropy(y, &labels, ignore)?;
    tape.backward(l)?;
    let analytic = tape.param_grads(model.num_param_tensors());
    let image_grad = tape.grad(x).map(|g| g.to_vec()).unwrap_or_default();

    let mut report = gradcheck::GradReport::default();
    let n = model.num_param_tensors();
    for pid in 0..n {
        let numel = model.params()[pid].numel();
        for _ in 0..per_tensor {
            let e = rng.gen_range(0..numel);
            let orig = model.params()[pid].tensor.data()[e];
            let plus = (orig as f64 + FD_STEP) as f32;
            let minus = (orig as f64 - FD_STEP) as f32;
            model.params_mut()[pid].tensor.data_mut()[e] = plus;
            let lp = loss_of(&model, &image)?;
            model.params_mut()[pid].tensor.data_mut()[e] = minus;
            let lm = loss_of(&model, &image)?;
            model.params_mut()[pid].tensor.data_mut()[e] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let a = analytic[pid].as_ref().map_or(0.0, |g| g[e]);
            report.record(pid, e, rel_error(a, numeric));
        }
    }
    let mut probe_image = image.clone();
    for _ in 0..per_tensor {
        let e = rng.gen_range(0..image.numel());
        let orig = image.data()[e];
        probe_image.data_mut()[e] = orig + FD_STEP;
        let lp = loss_of(&model, &probe_image)?;
        probe_image.data_mut()[e] = orig - FD_STEP;
        let lm = loss_of(&model, &probe_image)?;
        probe_image.data_mut()[e] = orig;
        report.record(n, e, rel_error(image_grad[e], (lp - lm) / (2.0 * FD_STEP)));
    }
    Ok(report)
}

/// `cases` randomized op checks (cycling through [`OPS`]) and `model_cases`
/// end-to-end checks.
pub fn gradient_suite(seed: u64, cases: usize, model_cases: usize) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = (0..cases)
        .map(|i| {
            let which = i % OPS.len();
            let r = op_case(which, seed.wrapping_add(i as u64)).map(|rep| {
                (rep.max_rel_error < GRAD_TOL, format!("max rel error {:.2e} over {} elements", rep.max_rel_error, rep.checked))
            });
            CheckOutcome::from_result("gradient", format!("{} case {i}", OPS[which]), r)
        })
        .collect();
    for i in 0..model_cases {
        let r = model_case(seed.wrapping_add(1000 + i as u64), 2).map(|rep| {
            (rep.max_rel_error < GRAD_TOL, format!("max rel error {:.2e} over {} elements", rep.max_rel_error, rep.checked))
        });
        out.push(CheckOutcome::from_result("gradient", format!("toy model loss case {i}"), r));
    }
    out
}

// ---- metrics ----

/// Compares [`ConfusionMatrix`] and mIoU with a per-pixel double loop on
/// random 16x16 mask pairs, a tenth of the ground truth set to ignore.
pub fn metrics_oracle(seed: u64, trials: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const IGNORE: u32 = 255;
    for t in 0..trials {
        let n = rng.gen_range(2..8usize);
        let (h, w) = (16, 16);
        let gt: Vec<u32> = (0..h * w)
            .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..n as u32) })
            .collect();
        let pred: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..n as u32)).collect();
        let mut cm = ConfusionMatrix::new(n);
        cm.update(&pred, &gt, IGNORE)?;

        let mut oracle = vec![vec![0u64; n]; n];
        for y in 0..h {
            for x in 0..w {
                let g = gt[y * w + x];
                if g != IGNORE {
                    oracle[g as usize][pred[y * w + x] as usize] += 1;
                }
            }
        }
        let mut ious = Vec::new();
        for c in 0..n {
            for p in 0..n {
                if cm.get(c, p) != oracle[c][p] {
                    return Ok((false, format!("trial {t}: cell ({c},{p}) differs")));
                }
            }
            let inter = oracle[c][c];
            let mut union = 0;
            for y in 0..h {
                for x in 0..w {
                    let g = gt[y * w + x];
                    if g != IGNORE && (g as usize == c || pred[y * w + x] as usize == c) {
                        union += 1;
                    }
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        if cm.miou()? != expect {
            return Ok((false, format!("trial {t}: mIoU {} vs {expect}", cm.miou()?)));
        }
    }
    Ok((true, format!("{trials} random 16x16 pairs match exactly")))
}

// ---- persistence ----

/// Two short seeded runs must produce identical checkpoint bytes, and a
/// checkpoint must survive a write/read cycle bit for bit.
pub fn persistence_check(seed: u64) -> Result<(bool, String)> {
    let mut cfg = RunConfig::for_profile(TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        max_iters: 3,
        seed,
        eval_interval: 0,
        ..TrainConfig::default()
    })?;
    cfg.synth = SynthConfig {
        seed,
        train_samples: 4,
        eval_samples: 0,
        height: 32,
        width: 32,
    };
    let (train_set, _) = crate::train::synth_splits(&cfg.synth, cfg.decoder.num_classes)?;
    let run = || -> Result<Vec<u8>> {
        let out = crate::train::train(&cfg, &train_set, &[], |_| Ok(()))?;
        Ok(Checkpoint::from_model(&out.model, Some(&out.optimizer)).to_bytes())
    };
    let (a, b) = (run()?, run()?);
    if a != b {
        return Ok((false, "two seeded runs wrote different checkpoints".into()));
    }
    let ck = Checkpoint::from_bytes(&a, "memory")?;
    if ck.to_bytes() != a {
        return Ok((false, "load/save changed the checkpoint bytes".into()));
    }
    let model: ModelConfig = ck.config.clone();
    ck.to_model(Some(&model))?;
    Ok((true, format!("{} checkpoint bytes reproduced exactly", a.len())))
}

/// Everything the `selftest` command runs.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = mechanism_suite(seed);
    out.extend(gradient_suite(seed, 100, 2));
    out.push(CheckOutcome::from_result("metrics", "confusion matrix and mIoU oracle", metrics_oracle(seed, 50)));
    out.push(CheckOutcome::from_result("persistence", "seeded checkpoints and roundtrip", persistence_check(seed)));
    out
}
