//! Layer vocabulary. Layers are stateless descriptions that reference
//! parameter tensors by index; forward returns a [`Node`] that backward
//! consumes. All tensors are single samples: conv2d maps are `[C, H, W]`,
//! conv3d maps `[C, D, H, W]`, dense inputs are flat.

use super::tensor::{axpy, dot, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Stride 1, no padding: output side is `in - kernel + 1`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Relu,
    /// Inverted dropout with drop probability `p`.
    Dropout {
        p: f64,
    },
    Softmax,
    /// Concatenation along the leading axis.
    Concat,
    Add,
    Flatten,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerSpec::Conv3d { in_channels, out_channels, kernel, .. } => Some(vec![out_channels, in_channels, kernel, kernel, kernel]),
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { out_channels, bias: true, .. } | LayerSpec::Conv3d { out_channels, bias: true, .. } => {
                Some(vec![out_channels])
            }
            LayerSpec::Dense { outputs, bias: true, .. } => Some(vec![outputs]),
            _ => None,
        }
    }

    /// Inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::Conv3d { in_channels, kernel, .. } => in_channels * kernel * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Concat => "concat",
            LayerSpec::Add => "add",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub weight: Option<usize>,
    pub bias: Option<usize>,
}

/// Output of a forward call plus what backward needs beyond the inputs.
#[derive(Debug, Clone)]
pub struct Node<T> {
    pub out: Tensor<T>,
    /// Dropout multipliers (0 or 1/(1-p)).
    pub mask: Option<Vec<T>>,
}

impl<T> Node<T> {
    fn plain(out: Tensor<T>) -> Self {
        Node { out, mask: None }
    }
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Layer { name: name.into(), spec, weight: None, bias: None }
    }

    fn shape_err(&self, detail: String) -> Error {
        Error::Shape { layer: format!("{} ({})", self.name, self.spec.kind()), detail }
    }

    fn one<'a, T>(&self, inputs: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>> {
        match inputs {
            [x] => Ok(x),
            _ => Err(self.shape_err(format!("expected 1 input, got {}", inputs.len()))),
        }
    }

    fn params<'a, T: Scalar>(&self, params: &'a [Tensor<T>]) -> (&'a [T], Option<&'a [T]>) {
        let w = params[self.weight.expect("parametric layer has a weight")].data();
        (w, self.bias.map(|b| params[b].data()))
    }

    pub fn forward<T: Scalar>(&self, params: &[Tensor<T>], inputs: &[&Tensor<T>], mode: Mode, rng: &Rng) -> Result<Node<T>> {
        match self.spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let x = self.one(inputs)?;
                let &[c, h, w] = x.shape() else {
                    return Err(self.shape_err(format!("expected [C, H, W], got {:?}", x.shape())));
                };
                if c != in_channels || h < kernel || w < kernel {
                    return Err(self.shape_err(format!("input {:?} incompatible with {in_channels} channels / kernel {kernel}", x.shape())));
                }
                let (wt, b) = self.params(params);
                let (ho, wo) = (h - kernel + 1, w - kernel + 1);
                let mut out = vec![T::zero(); out_channels * ho * wo];
                conv_forward(x.data(), wt, b, &mut out, &[c, 1, h, w], out_channels, kernel, 1, [1, ho, wo]);
                Ok(Node::plain(Tensor::new(vec![out_channels, ho, wo], out)?))
            }
            LayerSpec::Conv3d { in_channels, out_channels, kernel, .. } => {
                let x = self.one(inputs)?;
                let &[c, d, h, w] = x.shape() else {
                    return Err(self.shape_err(format!("expected [C, D, H, W], got {:?}", x.shape())));
                };
                if c != in_channels || d < kernel || h < kernel || w < kernel {
                    return Err(self.shape_err(format!("input {:?} incompatible with {in_channels} channels / kernel {kernel}", x.shape())));
                }
                let (wt, b) = self.params(params);
                let o = [d - kernel + 1, h - kernel + 1, w - kernel + 1];
                let mut out = vec![T::zero(); out_channels * o[0] * o[1] * o[2]];
                conv_forward(x.data(), wt, b, &mut out, &[c, d, h, w], out_channels, kernel, kernel, o);
                Ok(Node::plain(Tensor::new(vec![out_channels, o[0], o[1], o[2]], out)?))
            }
            LayerSpec::Dense { inputs: n_in, outputs, .. } => {
                let x = self.one(inputs)?;
                if x.len() != n_in {
                    return Err(self.shape_err(format!("expected {n_in} inputs, got shape {:?}", x.shape())));
                }
                let (wt, b) = self.params(params);
                let out = (0..outputs)
                    .map(|o| {
                        let s = dot(&wt[o * n_in..(o + 1) * n_in], x.data());
                        b.map_or(s, |b| s + b[o])
                    })
                    .collect();
                Ok(Node::plain(Tensor::vector(out)))
            }
            LayerSpec::Relu => {
                let x = self.one(inputs)?;
                let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                Ok(Node::plain(Tensor::new(x.shape().to_vec(), out)?))
            }
            LayerSpec::Dropout { p } => {
                let x = self.one(inputs)?;
                if mode == Mode::Eval || p == 0.0 {
                    return Ok(Node::plain(x.clone()));
                }
                let keep = T::of(1.0 / (1.0 - p));
                let mut r = rng.split_str(&self.name);
                let mask: Vec<T> = (0..x.len()).map(|_| if r.next_f64() < p { T::zero() } else { keep }).collect();
                let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok(Node { out: Tensor::new(x.shape().to_vec(), out)?, mask: Some(mask) })
            }
            LayerSpec::Softmax => {
                let x = self.one(inputs)?;
                Ok(Node::plain(Tensor::new(x.shape().to_vec(), super::loss::softmax(x.data()))?))
            }
            LayerSpec::Concat => {
                if inputs.is_empty() {
                    return Err(self.shape_err("no inputs".into()));
                }
                let tail = &inputs[0].shape()[1.min(inputs[0].shape().len())..];
                let same_tail = inputs.iter().all(|t| !t.shape().is_empty() && &t.shape()[1..] == tail);
                let data: Vec<T> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                let shape = if same_tail && !tail.is_empty() {
                    let mut s = vec![inputs.iter().map(|t| t.shape()[0]).sum()];
                    s.extend_from_slice(tail);
                    s
                } else {
                    vec![data.len()]
                };
                Ok(Node::plain(Tensor::new(shape, data)?))
            }
            LayerSpec::Add => {
                let first = inputs.first().ok_or_else(|| self.shape_err("no inputs".into()))?;
                let mut out = first.data().to_vec();
                for t in &inputs[1..] {
                    if t.shape() != first.shape() {
                        return Err(self.shape_err(format!("{:?} + {:?}", first.shape(), t.shape())));
                    }
                    for (o, &v) in out.iter_mut().zip(t.data()) {
                        *o = *o + v;
                    }
                }
                Ok(Node::plain(Tensor::new(first.shape().to_vec(), out)?))
            }
            LayerSpec::Flatten => {
                let x = self.one(inputs)?;
                Ok(Node::plain(Tensor::vector(x.data().to_vec())))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns one gradient
    /// per input (empty when `need_input_grad` is false).
    pub fn backward<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        inputs: &[&Tensor<T>],
        node: &Node<T>,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input_grad: bool,
    ) -> Result<Vec<Tensor<T>>> {
        if grad_out.len() != node.out.len() {
            return Err(self.shape_err(format!("upstream gradient {:?} does not match output {:?}", grad_out.shape(), node.out.shape())));
        }
        let g = grad_out.data();
        match self.spec {
            LayerSpec::Conv2d { out_channels, kernel, .. } | LayerSpec::Conv3d { out_channels, kernel, .. } => {
                let x = self.one(inputs)?;
                let dims: [usize; 4] = match *x.shape() {
                    [c, h, w] => [c, 1, h, w],
                    [c, d, h, w] => [c, d, h, w],
                    _ => return Err(self.shape_err(format!("bad input {:?}", x.shape()))),
                };
                let kd = if x.shape().len() == 3 { 1 } else { kernel };
                let o = if x.shape().len() == 3 {
                    [1, dims[2] - kernel + 1, dims[3] - kernel + 1]
                } else {
                    [dims[1] - kernel + 1, dims[2] - kernel + 1, dims[3] - kernel + 1]
                };
                let wi = self.weight.unwrap();
                if let Some(bi) = self.bias {
                    let plane = o[0] * o[1] * o[2];
                    let db = grads[bi].data_mut();
                    for oc in 0..out_channels {
                        db[oc] = db[oc] + g[oc * plane..(oc + 1) * plane].iter().copied().sum::<T>();
                    }
                }
                conv_weight_grad(x.data(), g, grads[wi].data_mut(), &dims, out_channels, kernel, kd, o);
                if !need_input_grad {
                    return Ok(Vec::new());
                }
                let mut dx = vec![T::zero(); x.len()];
                conv_input_grad(params[wi].data(), g, &mut dx, &dims, out_channels, kernel, kd, o);
                Ok(vec![Tensor::new(x.shape().to_vec(), dx)?])
            }
            LayerSpec::Dense { inputs: n_in, outputs, .. } => {
                let x = self.one(inputs)?;
                let wi = self.weight.unwrap();
                if let Some(bi) = self.bias {
                    for (d, &v) in grads[bi].data_mut().iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
                {
                    let dw = grads[wi].data_mut();
                    for o in 0..outputs {
                        if g[o] != T::zero() {
                            axpy(g[o], x.data(), &mut dw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                }
                if !need_input_grad {
                    return Ok(Vec::new());
                }
                let w = params[wi].data();
                let mut dx = vec![T::zero(); n_in];
                for o in 0..outputs {
                    if g[o] != T::zero() {
                        axpy(g[o], &w[o * n_in..(o + 1) * n_in], &mut dx);
                    }
                }
                Ok(vec![Tensor::new(x.shape().to_vec(), dx)?])
            }
            LayerSpec::Relu => {
                let x = self.one(inputs)?;
                let dx = x.data().iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), dx)?])
            }
            LayerSpec::Dropout { .. } => {
                let x = self.one(inputs)?;
                let dx = match &node.mask {
                    Some(m) => g.iter().zip(m).map(|(&d, &k)| d * k).collect(),
                    None => g.to_vec(),
                };
                Ok(vec![Tensor::new(x.shape().to_vec(), dx)?])
            }
            LayerSpec::Softmax => {
                let s = node.out.data();
                let gs = dot(g, s);
                let dx = s.iter().zip(g).map(|(&si, &gi)| si * (gi - gs)).collect();
                Ok(vec![Tensor::new(node.out.shape().to_vec(), dx)?])
            }
            LayerSpec::Concat => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let part = g[offset..offset + t.len()].to_vec();
                        offset += t.len();
                        Tensor::new(t.shape().to_vec(), part)
                    })
                    .collect()
            }
            LayerSpec::Add => inputs.iter().map(|t| Tensor::new(t.shape().to_vec(), g.to_vec())).collect(),
            LayerSpec::Flatten => {
                let x = self.one(inputs)?;
                Ok(vec![Tensor::new(x.shape().to_vec(), g.to_vec())?])
            }
        }
    }
}

// Shared conv kernels. `dims` is [C, D, H, W] (D = 1 for 2D), `o` the output
// [D', H', W']; for 2D the kernel depth is 1.

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    out: &mut [T],
    dims: &[usize; 4],
    out_c: usize,
    k: usize,
    kd: usize,
    o: [usize; 3],
) {
    let [c_in, d, h, wd] = *dims;
    let plane = o[0] * o[1] * o[2];
    for oc in 0..out_c {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        if let Some(b) = b {
            dst.fill(b[oc]);
        }
        for c in 0..c_in {
            let src = &x[c * d * h * wd..(c + 1) * d * h * wd];
            for kz in 0..kd {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[(((oc * c_in + c) * kd + kz) * k + ky) * k + kx];
                        for z in 0..o[0] {
                            for y in 0..o[1] {
                                let s0 = ((z + kz) * h + y + ky) * wd + kx;
                                let d0 = (z * o[1] + y) * o[2];
                                axpy(wv, &src[s0..s0 + o[2]], &mut dst[d0..d0 + o[2]]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_weight_grad<T: Scalar>(x: &[T], g: &[T], dw: &mut [T], dims: &[usize; 4], out_c: usize, k: usize, kd: usize, o: [usize; 3]) {
    let [c_in, d, h, wd] = *dims;
    let plane = o[0] * o[1] * o[2];
    for oc in 0..out_c {
        let go = &g[oc * plane..(oc + 1) * plane];
        for c in 0..c_in {
            let src = &x[c * d * h * wd..(c + 1) * d * h * wd];
            for kz in 0..kd {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for z in 0..o[0] {
                            for y in 0..o[1] {
                                let s0 = ((z + kz) * h + y + ky) * wd + kx;
                                let d0 = (z * o[1] + y) * o[2];
                                acc = acc + dot(&go[d0..d0 + o[2]], &src[s0..s0 + o[2]]);
                            }
                        }
                        let i = (((oc * c_in + c) * kd + kz) * k + ky) * k + kx;
                        dw[i] = dw[i] + acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_input_grad<T: Scalar>(w: &[T], g: &[T], dx: &mut [T], dims: &[usize; 4], out_c: usize, k: usize, kd: usize, o: [usize; 3]) {
    let [c_in, d, h, wd] = *dims;
    let plane = o[0] * o[1] * o[2];
    for oc in 0..out_c {
        let go = &g[oc * plane..(oc + 1) * plane];
        for c in 0..c_in {
            let dst = &mut dx[c * d * h * wd..(c + 1) * d * h * wd];
            for kz in 0..kd {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[(((oc * c_in + c) * kd + kz) * k + ky) * k + kx];
                        for z in 0..o[0] {
                            for y in 0..o[1] {
                                let s0 = ((z + kz) * h + y + ky) * wd + kx;
                                let d0 = (z * o[1] + y) * o[2];
                                axpy(wv, &go[d0..d0 + o[2]], &mut dst[s0..s0 + o[2]]);
                            }
                        }
                    }
                }
            }
        }
    }
}
