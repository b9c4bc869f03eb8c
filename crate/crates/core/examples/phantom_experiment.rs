use patchseg::eval::evaluate_pair;
use patchseg::model::NetworkConfig;
use patchseg::phantom::{generate_phantom, PhantomSpec};
use patchseg::pipeline::{build_resources, predict_volume, train_on, Dataset, PredictOptions, TrainConfig};
use patchseg::sampling::SamplingMode;
use patchseg::volume::{Dims, LabelMap};
use std::time::Instant;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let dims = Dims::cube(64);
    let gen = |seed| generate_phantom(&PhantomSpec::new(dims, 8, seed)).unwrap();
    let t0 = Instant::now();
    let data = Dataset { train: (0..10).map(gen).collect(), val: (100..105).map(gen).collect() };
    let test: Vec<_> = (200..205).map(gen).collect();
    println!("phantoms {:.1}s", t0.elapsed().as_secs_f64());
    let which = std::env::var("CFG").unwrap_or("base,dist".into());
    for name in which.split(',') {
        let net = match name {
            "base" => NetworkConfig::new(8),
            "dist" => NetworkConfig { use_dist: true, ..NetworkConfig::new(8) },
            "full" => NetworkConfig::full(8),
            _ => panic!(),
        };
        let mut cfg = TrainConfig::new(net);
        cfg.epochs = env("EPOCHS", 15);
        cfg.batches_per_epoch = env("BPE", 40);
        cfg.batch_size = env("BS", 32);
        cfg.lr0 = env("LR", 0.02);
        cfg.network.dropout = env("DROP", 0.3);
        cfg.sampling = if env("UNIFORM", 1) == 1 { SamplingMode::ClassUniform } else { SamplingMode::Natural };
        cfg.val_voxels = env("VAL", 500);
        cfg.augment = name == "full";
        cfg.seed = env("SEED", 0);
        cfg.network.use_rbf = env("RBF", 0) == 1;
        cfg.network.aux_weights = (env("AUXB", 0.3), env("AUXD", 0.3));
        let t = Instant::now();
        let out = train_on(&cfg, &data).unwrap();
        let tt = t.elapsed().as_secs_f64();
        for r in &out.history {
            println!("  {name} ep {} lr {:.4} loss {:.4} val {:?}", r.epoch, r.lr, r.train_loss, r.val_dice);
        }
        let model = out.checkpoint.model().unwrap();
        let maps: Vec<LabelMap> = data.train.iter().map(|(_, m)| m.clone()).collect();
        let res = build_resources(&cfg, &maps).unwrap();
        let t = Instant::now();
        let (mut d, mut h, mut pair) = (0.0, 0.0, 0.0);
        let ntest = env("NTEST", 5);
        for (v, gt) in test.iter().take(ntest) {
            let pred = predict_volume(&model, &cfg, &out.checkpoint.norm, v, &res, PredictOptions::default()).unwrap();
            let r = evaluate_pair(&pred, gt).unwrap();
            println!("   per class {:?}", r.classes.iter().map(|c| (c.dice * 100.0).round() / 100.0).collect::<Vec<_>>());
            d += r.mean_dice / ntest as f64;
            h += r.mean_hausdorff_mm.unwrap_or(f64::NAN) / ntest as f64;
            pair += (r.class(6).unwrap().dice + r.class(7).unwrap().dice) / (2 * ntest) as f64;
        }
        println!("{name}: train {tt:.1}s predict {:.1}s dice {d:.4} hd {h:.2} pair {pair:.4}", t.elapsed().as_secs_f64());
    }
}
