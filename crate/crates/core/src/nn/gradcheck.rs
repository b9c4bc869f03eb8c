//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-8)`;
//! checks report the maximum over every entry they visit.

use super::layers::{Layer, LayerSpec, Mode};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for each requested index.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64, indices: &[usize]) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Description of the entry with the largest error.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn empty() -> Self {
        GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 }
    }

    pub fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

/// Representative configuration and input shapes for every layer kind.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<Vec<usize>>)> {
    vec![
        (LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, bias: true }, vec![vec![2, 6, 5]]),
        (LayerSpec::Conv3d { in_channels: 2, out_channels: 2, kernel: 2, bias: true }, vec![vec![2, 4, 3, 4]]),
        (LayerSpec::Dense { inputs: 7, outputs: 4, bias: true }, vec![vec![7]]),
        (LayerSpec::Relu, vec![vec![12]]),
        (LayerSpec::Dropout { p: 0.4 }, vec![vec![12]]),
        (LayerSpec::Softmax, vec![vec![5]]),
        (LayerSpec::Concat, vec![vec![2, 3, 3], vec![1, 3, 3]]),
        (LayerSpec::Add, vec![vec![6], vec![6]]),
        (LayerSpec::Flatten, vec![vec![2, 3, 2]]),
    ]
}

/// Checks input and parameter gradients of one layer in double precision
/// against the scalar loss `sum_i r_i * out_i` with random `r`. Dropout runs
/// in train mode with the same mask for every evaluation.
pub fn check_layer(spec: &LayerSpec, input_shapes: &[Vec<usize>], seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut layer = Layer::new(spec.kind(), spec.clone());
    let mut params: Vec<Tensor<f64>> = Vec::new();
    if let Some(s) = spec.weight_shape() {
        let n = s.iter().product();
        params.push(Tensor::new(s, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())?);
        layer.weight = Some(0);
    }
    if let Some(s) = spec.bias_shape() {
        let n = s.iter().product();
        params.push(Tensor::new(s, (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect())?);
        layer.bias = Some(params.len() - 1);
    }
    // keep ReLU inputs away from the kink
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = rng.uniform(0.1, 1.0);
                if rng.next_f64() < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect()
    };
    let inputs: Vec<Tensor<f64>> = input_shapes.iter().map(|s| Tensor::new(s.clone(), draw(s.iter().product()))).collect::<Result<_>>()?;
    let drop_rng = Rng::new(seed ^ 0xD0D0);

    let probe = layer.forward(&params, &inputs.iter().collect::<Vec<_>>(), Mode::Train, &drop_rng)?;
    let weights = draw(probe.out.len());
    let loss = |params: &[Tensor<f64>], inputs: &[Tensor<f64>]| -> f64 {
        let node = layer.forward(params, &inputs.iter().collect::<Vec<_>>(), Mode::Train, &drop_rng).expect("forward");
        node.out.data().iter().zip(&weights).map(|(o, r)| o * r).sum()
    };

    let mut grads: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let upstream = Tensor::new(probe.out.shape().to_vec(), weights.clone())?;
    let input_refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let dx = layer.backward(&params, &input_refs, &probe, &upstream, &mut grads, true)?;

    let mut report = GradCheckReport::empty();
    for (k, x) in inputs.iter().enumerate() {
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = central_difference(
            |v| {
                let mut xs = inputs.clone();
                xs[k] = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                loss(&params, &xs)
            },
            x.data(),
            eps,
            &idx,
        );
        for (i, n) in numeric.into_iter().enumerate() {
            report.record(|| format!("{} input {k}[{i}]", spec.kind()), dx[k].data()[i], n);
        }
    }
    for (t, p) in params.iter().enumerate() {
        let idx: Vec<usize> = (0..p.len()).collect();
        let numeric = central_difference(
            |v| {
                let mut ps = params.clone();
                ps[t] = Tensor::new(p.shape().to_vec(), v.to_vec()).unwrap();
                loss(&ps, &inputs)
            },
            p.data(),
            eps,
            &idx,
        );
        for (i, n) in numeric.into_iter().enumerate() {
            report.record(|| format!("{} param {t}[{i}]", spec.kind()), grads[t].data()[i], n);
        }
    }
    Ok(report)
}
