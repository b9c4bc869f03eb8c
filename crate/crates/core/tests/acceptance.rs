//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Needs the optimized test profile; the phantom
//! suite takes about 20 minutes on one core.

use std::time::Instant;

use patchseg::atlas::build_atlas;
use patchseg::eval::{dice, evaluate_pair, hausdorff, msd, BinaryMask};
use patchseg::model::{build_model, count_params, grad_check_model, Model, NetworkConfig};
use patchseg::nn::gradcheck::{check_layer, layer_cases, DEFAULT_EPS};
use patchseg::nn::{poly_lr, Mode, OptimConfig, Tensor};
use patchseg::phantom::{generate_phantom, PhantomSpec};
use patchseg::pipeline::{build_resources, predict_volume, train_on, Checkpoint, Dataset, PredictOptions, TrainConfig};
use patchseg::rng::Rng;
use patchseg::sampling::{build_sample, PatchSample, SamplingMode, PATCH, PATCH_3D};
use patchseg::spatial::{build_grid, distance_image, rbf_normalize};
use patchseg::volume::{Dims, LabelMap, Volume};

struct Outcome {
    failed: usize,
}

impl Outcome {
    fn report(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("[{}] criterion {id}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed += 1;
        }
    }
}

fn random_sample(cfg: &NetworkConfig, seed: u64) -> PatchSample {
    let mut rng = Rng::new(seed);
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f32> { (0..n).map(|_| rng.uniform(lo, hi) as f32).collect() };
    let raw = draw(cfg.num_classes, 0.05, 1.0);
    let total: f32 = raw.iter().sum();
    PatchSample {
        p25: draw(PATCH * PATCH, -1.5, 1.5),
        p51s: draw(PATCH * PATCH, -1.5, 1.5),
        p71s: draw(PATCH * PATCH, -1.5, 1.5),
        p3d: Some(draw(PATCH_3D.pow(3), -1.5, 1.5)),
        dist: Some(draw(cfg.landmarks_per_axis.pow(3), 0.0, 3.0)),
        atlas_prob: Some(raw.iter().map(|x| x / total).collect()),
        center: [0, 0, 0],
        target: (seed % cfg.num_classes as u64) as u16,
    }
}

// Tiny gradients (~1e-7) deep in the network are roundoff-bound at 1e-5.
const MODEL_EPS: f64 = 1e-4;

fn gradients(out: &mut Outcome) {
    let t = Instant::now();
    let mut layer_worst = 0.0f64;
    for seed in 0..5 {
        for (spec, shapes) in layer_cases() {
            layer_worst = layer_worst.max(check_layer(&spec, &shapes, seed, DEFAULT_EPS).unwrap().max_rel_error);
        }
    }
    let cfg = NetworkConfig::full(8);
    let (mut model_worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    for seed in 0..5 {
        let m: Model<f64> = build_model(&cfg, seed).unwrap();
        let c = grad_check_model(&m, &random_sample(&cfg, 100 + seed), &Rng::new(seed), MODEL_EPS, 16, seed).unwrap();
        model_worst = model_worst.max(c.report.max_rel_error);
        checked += c.report.checked;
        kinks += c.skipped_kinks;
    }
    let secs = t.elapsed().as_secs_f64();
    out.report(
        1,
        "gradient checks (f64, 5 seeds)",
        layer_worst < 1e-6 && model_worst < 1e-4 && secs < 120.0,
        format!(
            "layers max rel {layer_worst:.2e} (< 1e-6), full model max rel {model_worst:.2e} (< 1e-4) over {checked} entries, \
             {kinks} skipped at relu kinks, {secs:.1}s (< 120s)"
        ),
    );
}

fn learning_rate(out: &mut Outcome) {
    let cfg = OptimConfig { lr0: 1e-3, momentum: 0.9, weight_decay: 0.0, power: 0.9, max_iter: 100 };
    let worst = (0..=100).map(|i| (poly_lr(i, &cfg).unwrap() - 1e-3 * (1.0 - i as f64 / 100.0).powf(0.9)).abs()).fold(0.0, f64::max);
    let half = poly_lr(50, &cfg).unwrap();
    out.report(
        2,
        "poly learning rate",
        worst <= 1e-12 && (half - 5.35887e-4).abs() < 1e-9,
        format!("max deviation {worst:.1e} (<= 1e-12), lr(50/100) = {half:.6e} (5.35887e-4)"),
    );
}

fn parameter_counts(out: &mut Outcome) {
    let count = |cfg: NetworkConfig| count_params(&build_model::<f32>(&cfg, 0).unwrap());
    let base = NetworkConfig::new(135);
    let prob_delta = count(NetworkConfig { use_prob: true, ..base.clone() }) - count(base.clone());
    let order = [
        count(base.clone()),
        count(NetworkConfig { use_dist: true, ..base.clone() }),
        count(NetworkConfig { use_dist: true, use_prob: true, ..base.clone() }),
        count(NetworkConfig { use_dist: true, use_prob: true, use_3d: true, ..base.clone() }),
    ];
    out.report(
        3,
        "parameter counts",
        prob_delta == 54_675 && order.windows(2).all(|w| w[0] < w[1]) && prob_delta > 0,
        format!("prob branch adds {prob_delta} (54675) at 135 classes, Base/+Dist/+Dist+Prob/+Dist+Prob+3d = {order:?}"),
    );
}

fn oracle_boundary(m: &BinaryMask) -> Vec<[f64; 3]> {
    let d = m.dims();
    let [nx, ny, nz] = d.as_array();
    let s = m.spacing();
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && m.data()[d.index([x as usize, y as usize, z as usize])]
    };
    let mut pts = Vec::new();
    for i in 0..d.len() {
        if !m.data()[i] {
            continue;
        }
        let [x, y, z] = d.voxel(i).map(|c| c as i64);
        let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if faces.iter().any(|&(a, b, c)| !inside(x + a, y + b, z + c)) {
            pts.push([x as f64 * f64::from(s[0]), y as f64 * f64::from(s[1]), z as f64 * f64::from(s[2])]);
        }
    }
    pts
}

fn directed(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn metrics(out: &mut Outcome) {
    let mut rng = Rng::new(7);
    let (mut dice_exact, mut dist_err) = (true, 0.0f64);
    for _ in 0..100 {
        let dims = Dims::new(1 + rng.below(16) as usize, 1 + rng.below(16) as usize, 1 + rng.below(16) as usize);
        let spacing = [0.5 + rng.next_f64() as f32, 0.5 + rng.next_f64() as f32, 0.5 + rng.next_f64() as f32];
        let density = 0.02 + 0.4 * rng.next_f64();
        let mut mask = || loop {
            let data: Vec<bool> = (0..dims.len()).map(|_| rng.next_f64() < density).collect();
            if data.contains(&true) {
                return BinaryMask::new(dims, spacing, data).unwrap();
            }
        };
        let (x, y) = (mask(), mask());
        let both = x.data().iter().zip(y.data()).filter(|(a, b)| **a && **b).count();
        let oracle_dice = 2.0 * both as f64 / (x.count() + y.count()) as f64;
        dice_exact &= dice(&x, &y).unwrap() == oracle_dice;
        let (bx, by) = (oracle_boundary(&x), oracle_boundary(&y));
        let (xy, yx) = (directed(&bx, &by), directed(&by, &bx));
        let h = xy.iter().chain(&yx).copied().fold(0.0, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m = 0.5 * (mean(&xy) + mean(&yx));
        dist_err = dist_err.max((hausdorff(&x, &y).unwrap() - h).abs()).max((msd(&x, &y).unwrap() - m).abs());
    }
    let d = Dims::new(8, 8, 2);
    let a = BinaryMask::from_fn(d, [1.0; 3], |v| v == [0, 0, 0]);
    let b = BinaryMask::from_fn(d, [1.0; 3], |v| v == [3, 4, 0]);
    let hand = (hausdorff(&a, &b).unwrap(), msd(&a, &b).unwrap());
    let same = (dice(&a, &a).unwrap(), hausdorff(&a, &a).unwrap(), msd(&a, &a).unwrap());
    out.report(
        4,
        "metric oracle",
        dice_exact && dist_err <= 1e-9 && hand == (5.0, 5.0) && same == (1.0, 0.0, 0.0),
        format!(
            "100 random pairs: dice exact {dice_exact}, distance max err {dist_err:.1e} (<= 1e-9); singletons {hand:?}; identical {same:?}"
        ),
    );
}

const CLASSES: u16 = 8;

fn phantom(seed: u64) -> (Volume, LabelMap) {
    generate_phantom(&PhantomSpec::new(Dims::cube(64), CLASSES, seed)).unwrap()
}

fn suite_config(network: NetworkConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(NetworkConfig { dropout: 0.0, use_rbf: network.use_dist, ..network });
    cfg.epochs = 20;
    cfg.batches_per_epoch = 50;
    cfg.batch_size = 32;
    cfg.lr0 = 0.01;
    cfg.sampling = SamplingMode::ClassUniform;
    cfg.val_voxels = 2000;
    cfg.seed = seed;
    cfg
}

#[derive(Default, Clone, Copy)]
struct Score {
    dice: f64,
    hausdorff: f64,
    pair: f64,
}

fn run_suite(cfg: &TrainConfig, data: &Dataset, test: &[(Volume, LabelMap)]) -> Score {
    let trained = train_on(cfg, data).unwrap();
    let model = trained.checkpoint.model().unwrap();
    let maps: Vec<LabelMap> = data.train.iter().map(|(_, m)| m.clone()).collect();
    let res = build_resources(cfg, &maps).unwrap();
    let mut s = Score::default();
    for (v, gt) in test {
        let pred = predict_volume(&model, cfg, &trained.checkpoint.norm, v, &res, PredictOptions::default()).unwrap();
        let r = evaluate_pair(&pred, gt).unwrap();
        s.dice += r.mean_dice;
        s.hausdorff += r.mean_hausdorff_mm.unwrap_or(f64::INFINITY);
        s.pair += 0.5 * (r.class(CLASSES - 2).unwrap().dice + r.class(CLASSES - 1).unwrap().dice);
    }
    let n = test.len() as f64;
    Score { dice: s.dice / n, hausdorff: s.hausdorff / n, pair: s.pair / n }
}

fn mean(scores: &[Score]) -> Score {
    let n = scores.len() as f64;
    Score {
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / n,
        hausdorff: scores.iter().map(|s| s.hausdorff).sum::<f64>() / n,
        pair: scores.iter().map(|s| s.pair).sum::<f64>() / n,
    }
}

fn phantom_suite(out: &mut Outcome, data: &Dataset, test: &[(Volume, LabelMap)]) {
    let t = Instant::now();
    let base = NetworkConfig::new(CLASSES as usize);
    let dist = NetworkConfig { use_dist: true, ..base.clone() };
    let mut runs = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..3 {
        for (i, net) in [&base, &dist].into_iter().enumerate() {
            let s = run_suite(&suite_config(net.clone(), seed), data, test);
            println!("  seed {seed} {}: dice {:.4} hausdorff {:.2} pair dice {:.4}", ["base", "base+dist"][i], s.dice, s.hausdorff, s.pair);
            runs[i].push(s);
        }
    }
    let suite_secs = t.elapsed().as_secs_f64();
    let (b, d) = (mean(&runs[0]), mean(&runs[1]));
    out.report(
        5,
        "distance branch on the phantom suite",
        d.dice > b.dice && d.hausdorff < b.hausdorff && b.pair <= 0.55 && d.pair >= 0.85 && suite_secs < 1800.0,
        format!(
            "dice {:.4} -> {:.4}, hausdorff {:.2} -> {:.2}, mirrored pair dice base {:.4} (<= 0.55) dist {:.4} (>= 0.85), {:.0}s (< 1800s)",
            b.dice, d.dice, b.hausdorff, d.hausdorff, b.pair, d.pair, suite_secs
        ),
    );

    let full = NetworkConfig::full(CLASSES as usize);
    for seed in 0..3 {
        let mut cfg = suite_config(full.clone(), seed);
        cfg.augment = true;
        let s = run_suite(&cfg, data, test);
        println!("  seed {seed} full: dice {:.4} hausdorff {:.2} pair dice {:.4}", s.dice, s.hausdorff, s.pair);
        runs[2].push(s);
    }
    let f = mean(&runs[2]);
    out.report(
        6,
        "full model beats BaseNet",
        f.dice >= b.dice + 0.02,
        format!("dice base {:.4} full {:.4} (>= base + 0.02)", b.dice, f.dice),
    );
}

fn reproducibility(out: &mut Outcome, data: &Dataset) {
    let mut cfg = suite_config(NetworkConfig::full(CLASSES as usize), 5);
    cfg.epochs = 2;
    cfg.batches_per_epoch = 5;
    cfg.augment = true;
    cfg.network.dropout = 0.5;
    let a = train_on(&cfg, data).unwrap().checkpoint;
    let b = train_on(&cfg, data).unwrap().checkpoint;
    let identical = a.to_bytes() == b.to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (m0, m1) = (a.model().unwrap(), loaded.model().unwrap());
    let maps: Vec<LabelMap> = data.train.iter().map(|(_, m)| m.clone()).collect();
    let res = build_resources(&cfg, &maps).unwrap();
    let features = res.features(&cfg);
    let v = patchseg::volume::normalize(&data.val[0].0, &a.norm);
    let mut rng = Rng::new(9);
    let mut same = true;
    for _ in 0..100 {
        let c = [0, 0, 0].map(|_| rng.below(64) as usize);
        let s = build_sample(&features, &v, c, 0, None);
        let p = m0.forward(&s, Mode::Eval, &Rng::new(0)).unwrap().probs;
        let q = m1.forward(&s, Mode::Eval, &Rng::new(0)).unwrap().probs;
        same &= p.iter().zip(&q).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    out.report(
        7,
        "reproducible checkpoints",
        identical && same,
        format!("two runs byte-identical {identical}, reloaded probe of 100 samples bit-identical {same}"),
    );
}

fn probabilities(out: &mut Outcome, data: &Dataset) {
    let maps: Vec<LabelMap> = data.train.iter().map(|(_, m)| m.clone()).collect();
    let atlas = build_atlas(&maps, 1e-3).unwrap();
    let l = CLASSES as usize;
    let atlas_err = atlas.probs().chunks(l).map(|p| (p.iter().map(|&x| f64::from(x)).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);

    let cfg = NetworkConfig::new(l);
    let mut model: Model<f32> = build_model(&cfg, 3).unwrap();
    let bias = model.param_index("fc3.bias").unwrap();
    let mut rng = Rng::new(11);
    let mut soft_err = 0.0f64;
    for i in 0..1000 {
        let magnitude = 10f64.powf(4.0 * i as f64 / 999.0);
        let logits: Vec<f32> = (0..l).map(|_| rng.uniform(-magnitude, magnitude) as f32).collect();
        model.params_mut()[bias] = Tensor::vector(logits);
        let p = model.forward(&random_sample(&cfg, i), Mode::Eval, &Rng::new(0)).unwrap().probs;
        let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
        soft_err = soft_err.max(if p.iter().all(|x| x.is_finite()) { (sum - 1.0).abs() } else { f64::INFINITY });
    }
    out.report(
        8,
        "probability normalisation",
        atlas_err <= 1e-6 && soft_err <= 1e-6,
        format!(
            "atlas max |sum - 1| {atlas_err:.1e}, softmax max |sum - 1| {soft_err:.1e} over 1000 inputs with logits up to 1e4 (<= 1e-6)"
        ),
    );
}

fn distance_features(out: &mut Outcome) {
    let one = patchseg::spatial::DistanceImage { k: 1, values: vec![0.0] };
    let ten = patchseg::spatial::DistanceImage { k: 1, values: vec![10.0] };
    let r0 = rbf_normalize(&one, 0.01).unwrap().values[0];
    let r10 = rbf_normalize(&ten, 0.01).unwrap().values[0];
    let grid = build_grid(Dims::cube(65), 2).unwrap();
    let corners = grid.positions().iter().all(|p| p.iter().all(|&c| c == 0.0 || c == 64.0));
    let d = distance_image(&grid, [32.0, 32.0, 32.0]);
    let err = d.values.iter().map(|v| (v - 32.0 * 3f64.sqrt()).abs()).fold(0.0, f64::max);
    out.report(
        9,
        "rbf and distance image",
        r0 == 1.0 && (r10 - (-1f64).exp()).abs() < 1e-9 && corners && err < 1e-9,
        format!("rbf(0) = {r0}, rbf(10) = {r10:.12} (e^-1), corner landmarks {corners}, centre distance error {err:.1e} (< 1e-9)"),
    );
}

fn main() {
    let t = Instant::now();
    let mut out = Outcome { failed: 0 };
    gradients(&mut out);
    learning_rate(&mut out);
    parameter_counts(&mut out);
    metrics(&mut out);
    let data = Dataset { train: (0..10).map(phantom).collect(), val: (100..105).map(phantom).collect() };
    let test: Vec<_> = (200..205).map(phantom).collect();
    probabilities(&mut out, &data);
    distance_features(&mut out);
    reproducibility(&mut out, &data);
    phantom_suite(&mut out, &data, &test);
    println!("acceptance: {} failed, {:.0}s total", out.failed, t.elapsed().as_secs_f64());
    if out.failed > 0 {
        std::process::exit(1);
    }
}
