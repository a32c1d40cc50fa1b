//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 6 and 7 train nine full-size models and take a
//! while on CPU.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rpstn_core::jre::{self, JreVars};
use rpstn_core::jrpsp;
use rpstn_core::pck::{pck, pck_sweep, FrameTruth, Norm, Subset};
use rpstn_core::pipeline::{self, Stage, Trained};
use rpstn_core::heatmap::JointSet;
use rpstn_core::synth::Occluder;
use rpstn_core::{checkpoint, gradsuite, pseq, synth};
use rpstn_core::{Ablation, DataConfig, Dataset, ExperimentConfig, Model, ModelConfig, PoseSequenceSample};
use rpstn_tensor::{BnStats, Mode, ParamStore, Tape, Tensor};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CLEAN_TARGET: f64 = 0.90;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const ABLATION_MARGIN: f64 = 0.01;
const ABLATION_SEEDS: [u64; 3] = [7, 8, 9];
const OCCLUDE_RATE: f64 = 0.3;
const TEST_SAMPLES: usize = 128;
const TRAIN_DATA_SEED: u64 = 1;
const TEST_DATA_SEED: u64 = 2;
const OCCLUDE_SEED: u64 = 3;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, passed: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, passed, detail };
    println!(
        "criterion {} {:<28} {}  {}",
        o.id,
        o.name,
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    o
}

fn note(text: String) {
    println!("    note: {text}");
}

fn property(name: &str, holds: bool, detail: String) {
    println!("property {:<30} {}  {}", name, if holds { "HOLDS" } else { "DOES NOT HOLD" }, detail);
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run(gradsuite::TRIALS, gradsuite::SEED).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_error < GRAD_TOLERANCE))
        .map(|r| format!("{} ({:.2e})", r.name, r.max_error))
        .collect();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let passed = failed.is_empty() && elapsed < GRAD_BUDGET;
    let mut detail = format!(
        "{} cases x {} trials, worst {:.2e}, {:.1}s",
        results.len(),
        gradsuite::TRIALS,
        worst,
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail.push_str(&format!(", failing: {}", failed.join(", ")));
    }
    outcome(1, "gradient suite", passed, detail)
}

fn relation_parameters() -> Outcome {
    let mut counts = Vec::new();
    let mut passed = true;
    for k in [1, 13, 15, 17] {
        let mut store = ParamStore::<f32>::new();
        let p = jre::JreParams::new(&mut store, &mut common::rng(k as u64), k);
        let n = p.parameter_count(&store);
        passed &= n == 2 * k * k;
        counts.push(format!("K={k}:{n}"));
    }
    outcome(2, "relation parameter count", passed, counts.join(" "))
}

fn relation_matrix_f32(m: &Tensor<f64>) -> Vec<f64> {
    let mut t = Tape::<f32>::new();
    let v = t.constant(m.cast()).unwrap();
    let r = jre::relation_matrix(&mut t, v).unwrap();
    t.value(r).to_f64_vec()
}

fn relation_oracle_check() -> Outcome {
    let (b, k, hw) = (2, 13, 64);
    let mut rng = common::rng(3);
    let (mut worst_oracle, mut worst_row) = (0.0f64, 0.0f64);
    let mut inputs = Vec::new();
    for _ in 0..100 {
        let m = common::random(&mut rng, &[b, k, 8, 8]);
        let got = relation_matrix_f32(&m);
        let want = common::relation_oracle(m.data(), b, k, hw);
        worst_oracle = worst_oracle.max(common::max_abs_diff(&got, &want));
        for row in got.chunks(k) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        inputs.push((m, got));
    }
    let mut equivariant = 0;
    for (m, r) in inputs.iter().take(20) {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut pm = vec![0.0; b * k * hw];
        for bi in 0..b {
            for (i, &p) in perm.iter().enumerate() {
                let (dst, src) = ((bi * k + i) * hw, (bi * k + p) * hw);
                pm[dst..dst + hw].copy_from_slice(&m.data()[src..src + hw]);
            }
        }
        let rp = relation_matrix_f32(&Tensor::new(&[b, k, 8, 8], pm).unwrap());
        let exact = (0..b).all(|bi| {
            (0..k).all(|i| (0..k).all(|j| rp[(bi * k + i) * k + j] == r[(bi * k + perm[i]) * k + perm[j]]))
        });
        equivariant += exact as usize;
    }
    let passed = worst_oracle < 1e-5 && worst_row < 1e-5 && equivariant == 20;
    outcome(
        3,
        "relation matrix oracle",
        passed,
        format!("oracle {worst_oracle:.2e}, row sums {worst_row:.2e}, exact permutations {equivariant}/20"),
    )
}

fn residual_identity() -> Outcome {
    let k = 13;
    let mut rng = common::rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(1..17), rng.gen_range(1..17));
        let m: Tensor<f32> = common::random(&mut rng, &[b, k, h, w]).cast();
        let mut t = Tape::<f32>::new();
        let x = t.constant(m.clone()).unwrap();
        let vars = JreVars {
            w_g: t.constant(Tensor::zeros(&[k, k, 1, 1])).unwrap(),
            w_o: t.constant(Tensor::zeros(&[k, k, 1, 1])).unwrap(),
            gamma: t.constant(Tensor::full(&[k], 1.0)).unwrap(),
            beta: t.constant(Tensor::zeros(&[k])).unwrap(),
        };
        let mut stats = BnStats::pass_through(k);
        let out = jre::refine(&mut t, x, &vars, &mut stats, Mode::Eval, true).unwrap();
        let diff = t
            .value(out)
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    outcome(4, "residual identity", worst < 1e-6, format!("20 inputs, worst {worst:.2e}"))
}

fn correlation_oracle() -> Outcome {
    let mut rng = common::rng(5);
    let mut worst = 0.0f64;
    let mut even = 0;
    for i in 0..50 {
        let c = rng.gen_range(1..5);
        let b = rng.gen_range(1..3);
        // every pairing of extents 1..=5 on the two axes over the first 25
        let (kh, kw) = (i % 5 + 1, (i / 5) % 5 + 1);
        even += (kh % 2 == 0 || kw % 2 == 0) as usize;
        let (h, w) = (rng.gen_range(kh.max(4)..13), rng.gen_range(kw.max(4)..13));
        let template = common::random(&mut rng, &[b, c, kh, kw]);
        let target = common::random(&mut rng, &[b, c, h, w]);
        let mut identity = vec![0.0f32; c * c];
        for d in 0..c {
            identity[d * c + d] = 1.0;
        }
        let mut t = Tape::<f32>::new();
        let tv = t.constant(template.cast()).unwrap();
        let xv = t.constant(target.cast()).unwrap();
        let wv = t.constant(Tensor::new(&[c, c, 1, 1], identity).unwrap()).unwrap();
        let bv = t.constant(Tensor::zeros(&[c])).unwrap();
        let out = jrpsp::propagate(&mut t, tv, xv, (wv, bv)).unwrap();
        let got = t.value(out).to_f64_vec();
        for p in 0..b * c {
            let want = common::correlate_oracle(
                &target.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                &template.data()[p * kh * kw..(p + 1) * kh * kw],
                kh,
                kw,
            );
            worst = worst.max(common::max_abs_diff(&got[p * h * w..(p + 1) * h * w], &want));
        }
    }
    outcome(
        5,
        "dynamic convolution oracle",
        worst < 1e-5,
        format!("50 pairs ({even} with an even extent), worst {worst:.2e}"),
    )
}

fn acceptance_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::default(),
        data: DataConfig {
            data_seed: TRAIN_DATA_SEED,
            ..DataConfig::default()
        },
    }
}

struct Splits {
    train: Dataset,
    test: Dataset,
    occluded: Dataset,
}

fn splits(cfg: &ExperimentConfig) -> Splits {
    let train = synth::generate(&cfg.model, &cfg.data, cfg.data.data_seed).unwrap();
    let test_cfg = DataConfig {
        samples: TEST_SAMPLES,
        ..cfg.data.clone()
    };
    let test = synth::generate(&cfg.model, &test_cfg, TEST_DATA_SEED).unwrap();
    let occluded = synth::occlude_dataset(&test, OCCLUDE_RATE, synth::occluder_side(&cfg.model), OCCLUDE_SEED).unwrap();
    Splits { train, test, occluded }
}

fn train(cfg: &ModelConfig, data: &Dataset, ablation: &str, seed: u64) -> (Trained, Duration) {
    let mut cfg = cfg.clone();
    cfg.ablation = Ablation::parse(ablation).unwrap();
    cfg.seed = seed;
    let start = Instant::now();
    let trained = pipeline::train(&cfg, data, None, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    eprintln!("trained {ablation} seed {seed} in {:.0}s", elapsed.as_secs_f64());
    (trained, elapsed)
}

fn mpck(model: &mut Model, data: &Dataset, gamma: f64, subset: Subset) -> f64 {
    pipeline::evaluate(model, data, gamma, Norm::Bbox, subset).unwrap().mpck_or_zero()
}

fn desk_scale(full: &mut Trained, elapsed: Duration, s: &Splits) -> Outcome {
    let clean = mpck(&mut full.model, &s.test, 0.2, Subset::Visible);
    let passed = clean >= CLEAN_TARGET && elapsed <= TRAIN_BUDGET;
    let init = pipeline::initializer_pck(&mut full.model, &s.test, 0.2, Norm::Bbox).unwrap().mpck_or_zero();
    let seq: Vec<f64> = full.log.iter().filter(|e| e.stage == Stage::Sequence).map(|e| e.loss).collect();
    let o = outcome(
        6,
        "desk-scale training",
        passed,
        format!("clean mPCK@0.2 {clean:.4}, {:.1} min", elapsed.as_secs_f64() / 60.0),
    );
    note(format!("initializer alone on clean test frames: mPCK@0.2 {init:.4}"));
    if let (Some(first), Some(last)) = (seq.first(), seq.last()) {
        note(format!("sequence loss epoch 1 {first:.4}, final {last:.4}"));
    }
    let sweep = pipeline::predict(&mut full.model, &s.test).unwrap();
    let reports = pipeline::score(&sweep, &s.test, &[0.1, 0.2, 0.3, 0.4, 0.5], Norm::Bbox, Subset::Visible).unwrap();
    let line: Vec<String> = reports.iter().map(|r| format!("{:.1}:{:.4}", r.gamma, r.mpck_or_zero())).collect();
    note(format!("clean threshold sweep {}", line.join(" ")));
    o
}

fn ablation_trend(runs: &mut [(String, Vec<Model>)], s: &Splits) -> Outcome {
    let mut means = Vec::new();
    for (name, models) in runs.iter_mut() {
        let scores: Vec<f64> = models.iter_mut().map(|m| mpck(m, &s.occluded, 0.2, Subset::All)).collect();
        let visible: Vec<f64> = models.iter_mut().map(|m| mpck(m, &s.occluded, 0.2, Subset::Visible)).collect();
        let hidden: Vec<f64> = models.iter_mut().map(|m| mpck(m, &s.occluded, 0.2, Subset::Occluded)).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        note(format!(
            "{name}: occluded split mPCK per seed {:?}, visible joints {:.4}, masked joints {:.4}",
            scores.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            visible.iter().sum::<f64>() / visible.len() as f64,
            hidden.iter().sum::<f64>() / hidden.len() as f64,
        ));
        means.push(mean);
    }
    let (full, no_jre, no_jrpsp) = (means[0], means[1], means[2]);
    let passed = full - no_jre >= ABLATION_MARGIN && full - no_jrpsp >= ABLATION_MARGIN;
    outcome(
        7,
        "ablation trend",
        passed,
        format!("mean over seeds: full {full:.4}, no_jre {no_jre:.4}, no_jrpsp {no_jrpsp:.4}"),
    )
}

fn pck_metric(full: &mut Model, s: &Splits) -> Outcome {
    let c = common::crafted_pck();
    let truths: Vec<FrameTruth> = c
        .truths
        .iter()
        .zip(&c.boxes)
        .map(|(j, &bbox)| FrameTruth { joints: j, bbox })
        .collect();
    let mut exact = true;
    for (subset, (per_joint, mean)) in [
        (Subset::Visible, common::CRAFTED_VISIBLE),
        (Subset::All, common::CRAFTED_ALL),
        (Subset::Occluded, common::CRAFTED_OCCLUDED),
    ] {
        let r = pck(&c.predictions, &truths, &["a", "b"], 0.2, Norm::Bbox, subset, 1).unwrap();
        let got: Vec<f64> = r.per_joint.iter().map(|p| p.pck.unwrap_or(f64::NAN)).collect();
        exact &= got == per_joint && r.mpck == Some(mean);
    }
    let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let crafted = pck_sweep(&c.predictions, &truths, &["a", "b"], &gammas, Norm::Bbox, Subset::All, 1).unwrap();
    let preds = pipeline::predict(full, &s.occluded).unwrap();
    let model_sweep = pipeline::score(&preds, &s.occluded, &gammas, Norm::Bbox, Subset::All).unwrap();
    let monotone = |r: &[rpstn_core::PckReport]| r.windows(2).all(|w| w[0].mpck_or_zero() <= w[1].mpck_or_zero());
    let passed = exact && monotone(&crafted) && monotone(&model_sweep);
    outcome(
        8,
        "PCK metric",
        passed,
        format!(
            "crafted case exact: {exact}, sweeps monotone: crafted {} model {}",
            monotone(&crafted),
            monotone(&model_sweep)
        ),
    )
}

fn round_trips(full: &Model, s: &Splits) -> Outcome {
    let mut data_exact = true;
    for d in [&s.train, &s.test, &s.occluded] {
        let bytes = pseq::to_bytes(d).unwrap();
        let back = pseq::from_bytes(&bytes).unwrap();
        data_exact &= &back == d && pseq::to_bytes(&back).unwrap() == bytes;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.ckpt");
    let mut ckpt_exact = true;
    for with_optimizer in [false, true] {
        checkpoint::save(&path, full, with_optimizer).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        ckpt_exact &= checkpoint::to_bytes(&loaded, with_optimizer) == first;
    }

    // reduced budget: 64 samples, two epochs per stage
    let mut cfg = acceptance_config();
    cfg.data.samples = 64;
    cfg.model.epochs = 2;
    cfg.model.pretrain_epochs = 2;
    let small = synth::generate(&cfg.model, &cfg.data, cfg.data.data_seed).unwrap();
    let regenerated = synth::generate(&cfg.model, &cfg.data, cfg.data.data_seed).unwrap();
    let a = pipeline::train(&cfg.model, &small, None, &mut |_| {}).unwrap();
    let b = pipeline::train(&cfg.model, &regenerated, None, &mut |_| {}).unwrap();
    let training_exact = small == regenerated
        && a.log == b.log
        && checkpoint::to_bytes(&a.model, true) == checkpoint::to_bytes(&b.model, true);
    outcome(
        9,
        "round trips and determinism",
        data_exact && ckpt_exact && training_exact,
        format!("datasets {data_exact}, checkpoints {ckpt_exact}, same-seed training {training_exact}"),
    )
}

const PROPERTY_SAMPLES: usize = 32;

fn with_frames(s: &PoseSequenceSample, fill: impl Fn(usize, &mut [f32])) -> PoseSequenceSample {
    let mut out = s.clone();
    let t = out.frame_count();
    let per = out.frames.len() / t;
    for (i, frame) in out.frames.data_mut().chunks_mut(per).enumerate() {
        fill(i, frame);
    }
    out
}

fn decode_rollout(model: &mut Model, s: &PoseSequenceSample) -> Vec<JointSet> {
    pipeline::infer_occluded(model, s, &[]).unwrap()
}

fn identical_frames(model: &mut Model, s: &Splits) {
    let stride = model.config.stride as f32;
    let (mut within, mut total) = (0, 0);
    for sample in s.test.samples.iter().take(PROPERTY_SAMPLES) {
        let first = sample.frame(0);
        let still = with_frames(sample, |_, f| f.copy_from_slice(first.data()));
        let pred = decode_rollout(model, &still);
        for p in &pred[1..] {
            for (a, b) in p.coords.iter().zip(&pred[0].coords) {
                within += ((a[0] - b[0]).abs() <= stride && (a[1] - b[1]).abs() <= stride) as usize;
                total += 1;
            }
        }
    }
    property(
        "identical frames",
        within == total,
        format!("{within}/{total} joints within one cell of frame 1"),
    );
}

fn black_frames(model: &mut Model, cfg: &ExperimentConfig) {
    let frozen = DataConfig {
        samples: PROPERTY_SAMPLES,
        angular_speed: 0.0,
        root_speed: 0.0,
        ..cfg.data.clone()
    };
    let data = synth::generate(&cfg.model, &frozen, TEST_DATA_SEED).unwrap();
    let limit = 2.0 * model.config.stride as f32;
    let (mut within, mut total) = (0, 0);
    for sample in &data.samples {
        let dark = with_frames(sample, |t, f| {
            if t > 0 {
                f.fill(0.0);
            }
        });
        let pred = decode_rollout(model, &dark);
        for p in &pred[1..] {
            for (a, b) in p.coords.iter().zip(&sample.joints[0].coords) {
                within += ((a[0] - b[0]).hypot(a[1] - b[1]) <= limit) as usize;
                total += 1;
            }
        }
    }
    property(
        "black frames after frame 1",
        within == total,
        format!("{within}/{total} joints within 2*stride of frame 1, frozen motion"),
    );
}

/// Hits and trials of joint `i mod K` over frames t >= 1 of sample `i`.
fn tracked_joint_hits(model: &mut Model, data: &Dataset, occlude: bool) -> (usize, usize) {
    let side = synth::occluder_side(&model.config);
    let names = pipeline::joint_names(data.joints);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let (mut correct, mut total) = (0, 0);
    for (i, sample) in data.samples.iter().enumerate().take(PROPERTY_SAMPLES * 2) {
        let j = i % data.joints;
        let occluders: Vec<Occluder> = if occlude {
            (1..sample.frame_count())
                .map(|t| {
                    let [x, y] = sample.joints[t].coords[j];
                    let fill = synth::border_color(&sample.frames, t);
                    Occluder::centered(t, x, y, side, data.height, data.width, fill)
                })
                .collect()
        } else {
            Vec::new()
        };
        let pred = pipeline::infer_occluded(model, sample, &occluders).unwrap();
        let truths: Vec<FrameTruth> = sample.joints[1..]
            .iter()
            .zip(&sample.bbox[1..])
            .map(|(joints, &bbox)| FrameTruth { joints, bbox })
            .collect();
        let r = pck(&pred[1..], &truths, &names, 0.2, Norm::Bbox, Subset::All, 1).unwrap();
        correct += r.per_joint[j].correct;
        total += r.per_joint[j].total;
    }
    (correct, total)
}

fn single_joint_occlusion(runs: &mut [(String, Vec<Model>)], s: &Splits) {
    let mut drops = Vec::new();
    for (name, models) in runs.iter_mut().take(2) {
        let mut per_seed = Vec::new();
        for m in models.iter_mut() {
            let (c, n) = tracked_joint_hits(m, &s.test, false);
            let (co, no) = tracked_joint_hits(m, &s.test, true);
            per_seed.push(c as f64 / n as f64 - co as f64 / no as f64);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        note(format!("{name}: PCK drop of the masked joint per seed {per_seed:.4?}"));
        drops.push(mean);
    }
    property(
        "single-joint occlusion drop",
        drops[0] < drops[1],
        format!("mean drop full {:.4}, no_jre {:.4}", drops[0], drops[1]),
    );
}

fn training_and_sweep(full: &mut Trained, s: &Splits) {
    let seq: Vec<f64> = full.log.iter().filter(|e| e.stage == Stage::Sequence).map(|e| e.loss).collect();
    if seq.len() >= 5 {
        property("sequence loss epoch 5 < epoch 1", seq[4] < seq[0], format!("{:.4} vs {:.4}", seq[4], seq[0]));
    }
    let preds = pipeline::predict(&mut full.model, &s.test).unwrap();
    let r = pipeline::score(&preds, &s.test, &[0.1, 0.2, 0.4, 0.5], Norm::Bbox, Subset::Visible).unwrap();
    let m: Vec<f64> = r.iter().map(|x| x.mpck_or_zero()).collect();
    property(
        "threshold sweep saturates",
        m[3] - m[2] <= m[1] - m[0],
        format!("gain 0.1->0.2 {:.4}, gain 0.4->0.5 {:.4}, mPCK@0.4 {:.4}", m[1] - m[0], m[3] - m[2], m[2]),
    );
}

fn main() -> ExitCode {
    let mut results = vec![
        gradient_suite(),
        relation_parameters(),
        relation_oracle_check(),
        residual_identity(),
        correlation_oracle(),
    ];

    let cfg = acceptance_config();
    let s = splits(&cfg);
    let mut runs: Vec<(String, Vec<Model>)> = Vec::new();
    let mut first_full = None;
    for ablation in ["full", "no_jre", "no_jrpsp"] {
        let mut models = Vec::new();
        for &seed in &ABLATION_SEEDS {
            let (trained, elapsed) = train(&cfg.model, &s.train, ablation, seed);
            if ablation == "full" && seed == cfg.model.seed {
                first_full = Some((trained.log.clone(), elapsed));
            }
            models.push(trained.model);
        }
        runs.push((ablation.to_string(), models));
    }
    let (log, elapsed) = first_full.expect("acceptance seed is among the ablation seeds");
    let seed_index = ABLATION_SEEDS.iter().position(|&x| x == cfg.model.seed).unwrap();
    let mut full = Trained {
        model: runs[0].1.remove(seed_index),
        log,
    };
    results.push(desk_scale(&mut full, elapsed, &s));
    training_and_sweep(&mut full, &s);
    identical_frames(&mut full.model, &s);
    black_frames(&mut full.model, &cfg);
    runs[0].1.insert(seed_index, full.model);
    results.push(ablation_trend(&mut runs, &s));
    single_joint_occlusion(&mut runs, &s);
    let full_model = &mut runs[0].1[seed_index];
    results.push(pck_metric(full_model, &s));
    results.push(round_trips(full_model, &s));

    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
