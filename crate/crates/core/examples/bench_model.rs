use patchseg::model::{build_model, count_params, Model, NetworkConfig};
use patchseg::nn::Mode;
use patchseg::rng::Rng;
use patchseg::sampling::{PatchSample, PATCH, PATCH_3D};
use std::time::Instant;

fn main() {
    for cfg in [NetworkConfig::new(8), NetworkConfig { use_dist: true, ..NetworkConfig::new(8) }, NetworkConfig::full(8)] {
        let m: Model<f32> = build_model(&cfg, 0).unwrap();
        let mut rng = Rng::new(1);
        let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect() };
        let s = PatchSample {
            p25: v(PATCH * PATCH),
            p51s: v(PATCH * PATCH),
            p71s: v(PATCH * PATCH),
            p3d: Some(v(PATCH_3D.pow(3))),
            dist: Some(v(343)),
            atlas_prob: Some(vec![0.125; 8]),
            center: [0; 3],
            target: 3,
        };
        let n = 2000;
        let t = Instant::now();
        for _ in 0..n {
            m.forward(&s, Mode::Eval, &Rng::new(0)).unwrap();
        }
        let f = t.elapsed().as_secs_f64() / n as f64;
        let mut g = m.zero_grads();
        let t = Instant::now();
        for _ in 0..n {
            m.loss_and_grad(&s, Mode::Train, &Rng::new(0), None, 1.0, &mut g).unwrap();
        }
        let b = t.elapsed().as_secs_f64() / n as f64;
        println!("params {} fwd {:.1}us fwd+bwd {:.1}us", count_params(&m), f * 1e6, b * 1e6);
    }
}
