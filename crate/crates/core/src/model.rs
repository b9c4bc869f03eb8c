//! BaseNet plus the optional 3D, distance and atlas-probability branches.
//!
//! Dataflow for one sample:
//!
//! ```text
//! p25, p51s, p71s -> conv5 relu conv3 relu  (x3) -> concat -> conv1x1 relu -> flatten --+
//! p3d             -> conv3d relu conv3d relu -> flatten -------------------------------+-> base features
//! base features   -> aux_base (dense)
//! base features   -> fc1 relu dropout ------------------------------+
//! dist            -> [rbf] -> conv1x1 | conv3x3 [| conv5x5] or dense -+-> fc2 relu dropout -> fc3 -> (+ prob) -> softmax
//! dist features   -> aux_dist (dense)
//! atlas prob      -> dense relu dense relu dense (no biases) ----------------------------------------^
//! ```

use crate::error::{Error, Result};
use crate::nn::gradcheck::GradCheckReport;
use crate::nn::layers::{Layer, LayerSpec, Mode, Node};
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::tensor::{Scalar, Tensor};
use crate::rng::Rng;
use crate::sampling::{PatchSample, PATCH, PATCH_3D};
use crate::spatial::DEFAULT_RBF_ALPHA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistMode {
    VectorFc,
    #[default]
    Conv2d,
}

impl DistMode {
    pub fn name(self) -> &'static str {
        match self {
            DistMode::VectorFc => "vector_fc",
            DistMode::Conv2d => "conv2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vector_fc" => Ok(DistMode::VectorFc),
            "conv2d" => Ok(DistMode::Conv2d),
            _ => Err(Error::Config(format!("unknown dist_mode '{s}' (expected vector_fc or conv2d)"))),
        }
    }
}

/// Network shape and branch toggles. The widths default to a desk-scale
/// network that trains on one CPU core in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Output channels of the 5×5 conv in each 2D branch.
    pub conv1_channels: usize,
    /// Output channels of the 3×3 conv in each 2D branch.
    pub conv2_channels: usize,
    /// Output channels of the 1×1 conv after the multi-scale concatenation.
    pub mix_channels: usize,
    pub conv3d_channels: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
    /// Channels per kernel size in the conv2d distance branch.
    pub dist_channels: usize,
    /// Units of the dense distance branch.
    pub dist_units: usize,
    pub landmarks_per_axis: usize,
    pub use_3d: bool,
    pub use_dist: bool,
    pub use_prob: bool,
    pub use_aux: bool,
    pub dist_mode: DistMode,
    pub use_rbf: bool,
    pub rbf_alpha: f64,
    /// Loss weights of the BaseNet and DistBranch auxiliary heads.
    pub aux_weights: (f64, f64),
    pub dropout: f64,
    pub weight_decay: f64,
}

impl NetworkConfig {
    pub fn new(num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            conv1_channels: 3,
            conv2_channels: 6,
            mix_channels: 4,
            conv3d_channels: 2,
            fc1_units: 48,
            fc2_units: 32,
            dist_channels: 4,
            dist_units: 32,
            landmarks_per_axis: crate::spatial::DEFAULT_LANDMARKS_PER_AXIS,
            use_3d: false,
            use_dist: false,
            use_prob: false,
            use_aux: true,
            dist_mode: DistMode::default(),
            use_rbf: false,
            rbf_alpha: DEFAULT_RBF_ALPHA,
            aux_weights: (0.3, 0.3),
            dropout: 0.5,
            weight_decay: 0.0,
        }
    }

    /// Every branch and the auxiliary heads enabled.
    pub fn full(num_classes: usize) -> Self {
        NetworkConfig { use_3d: true, use_dist: true, use_prob: true, ..NetworkConfig::new(num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.conv1_channels,
            self.conv2_channels,
            self.mix_channels,
            self.conv3d_channels,
            self.fc1_units,
            self.fc2_units,
            self.dist_channels,
            self.dist_units,
        ];
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.use_dist && self.dist_mode == DistMode::Conv2d && self.landmarks_per_axis < 3 {
            return Err(Error::Config(format!(
                "conv2d distance branch needs at least 3 landmarks per axis, got {}",
                self.landmarks_per_axis
            )));
        }
        if self.use_dist && self.landmarks_per_axis < 2 {
            return Err(Error::Config("need at least 2 landmarks per axis".into()));
        }
        if self.use_rbf && !(self.rbf_alpha > 0.0 && self.rbf_alpha.is_finite()) {
            return Err(Error::Config(format!("rbf alpha must be > 0, got {}", self.rbf_alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        let (a, b) = self.aux_weights;
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config("aux weights must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    fn dist_kernels(&self) -> Vec<usize> {
        if self.landmarks_per_axis >= 9 {
            vec![1, 3, 5]
        } else {
            vec![1, 3]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    /// Weight decay applies (weights yes, biases no).
    pub decay: bool,
}

/// A chain of single-input layers.
#[derive(Debug, Clone, PartialEq)]
struct Seq {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct SeqTrace<T> {
    inputs: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> SeqTrace<T> {
    fn output(&self) -> &Tensor<T> {
        &self.nodes.last().expect("non-empty chain").out
    }
}

impl Seq {
    fn forward<T: Scalar>(&self, params: &[Tensor<T>], x: Tensor<T>, mode: Mode, rng: &Rng) -> Result<SeqTrace<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut nodes: Vec<Node<T>> = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let node = layer.forward(params, &[&cur], mode, rng)?;
            let next = node.out.clone();
            inputs.push(cur);
            nodes.push(node);
            cur = next;
        }
        Ok(SeqTrace { inputs, nodes })
    }

    fn backward<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        trace: &SeqTrace<T>,
        grad: Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = grad;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = i > 0 || need_input_grad;
            let mut dx = layer.backward(params, &[&trace.inputs[i]], &trace.nodes[i], &g, grads, need)?;
            if !need {
                return Ok(None);
            }
            g = dx.pop().expect("one input gradient");
        }
        Ok(Some(g))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DistNet {
    /// Parallel conv paths over the `[k, k, k]` field, each flattened.
    Conv(Vec<Seq>),
    Fc(Seq),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: NetworkConfig,
    params: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
    branches: [Seq; 3],
    mix: Seq,
    branch3d: Option<Seq>,
    aux_base: Option<Layer>,
    fc1: Seq,
    dist: Option<DistNet>,
    aux_dist: Option<Layer>,
    fc2: Seq,
    fc3: Layer,
    prob: Option<Seq>,
}

/// Main-head probabilities plus auxiliary head probabilities (BaseNet head
/// first, then the DistBranch head when present).
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    pub probs: Vec<T>,
    pub aux: Vec<Vec<T>>,
}

struct Builder<T> {
    seed: u64,
    params: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
}

impl<T: Scalar> Builder<T> {
    fn layer(&mut self, name: &str, spec: LayerSpec) -> Layer {
        let mut layer = Layer::new(name, spec.clone());
        if let Some(shape) = spec.weight_shape() {
            let pname = format!("{name}.weight");
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let mut rng = Rng::new(self.seed).split_str(&pname);
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
            layer.weight = Some(self.push(pname, Tensor::new(shape, data).expect("shape"), true));
        }
        if let Some(shape) = spec.bias_shape() {
            layer.bias = Some(self.push(format!("{name}.bias"), Tensor::zeros(&shape), false));
        }
        layer
    }

    fn push(&mut self, name: String, t: Tensor<T>, decay: bool) -> usize {
        self.params.push(t);
        self.info.push(ParamInfo { name, decay });
        self.params.len() - 1
    }

    fn seq(&mut self, prefix: &str, specs: Vec<(&str, LayerSpec)>) -> Seq {
        Seq { layers: specs.into_iter().map(|(n, s)| self.layer(&format!("{prefix}.{n}"), s)).collect() }
    }
}

fn conv2d(i: usize, o: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: k, bias: true }
}

fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense { inputs: i, outputs: o, bias: true }
}

const BRANCH_SIDE: usize = PATCH - 4 - 2;
const BRANCH3D_SIDE: usize = PATCH_3D - 2 - 2;

pub fn build_model<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let l = cfg.num_classes;
    let mut b = Builder { seed, params: Vec::new(), info: Vec::new() };
    let branches = ["branch25", "branch51", "branch71"].map(|name| {
        b.seq(
            name,
            vec![
                ("conv1", conv2d(1, cfg.conv1_channels, 5)),
                ("relu1", LayerSpec::Relu),
                ("conv2", conv2d(cfg.conv1_channels, cfg.conv2_channels, 3)),
                ("relu2", LayerSpec::Relu),
            ],
        )
    });
    let mix = b.seq(
        "mix",
        vec![("conv", conv2d(3 * cfg.conv2_channels, cfg.mix_channels, 1)), ("relu", LayerSpec::Relu), ("flatten", LayerSpec::Flatten)],
    );
    let mut base_width = cfg.mix_channels * BRANCH_SIDE * BRANCH_SIDE;
    let branch3d = cfg.use_3d.then(|| {
        let c = cfg.conv3d_channels;
        let conv3d = |i, o| LayerSpec::Conv3d { in_channels: i, out_channels: o, kernel: 3, bias: true };
        b.seq(
            "branch3d",
            vec![
                ("conv1", conv3d(1, c)),
                ("relu1", LayerSpec::Relu),
                ("conv2", conv3d(c, c)),
                ("relu2", LayerSpec::Relu),
                ("flatten", LayerSpec::Flatten),
            ],
        )
    });
    if cfg.use_3d {
        base_width += cfg.conv3d_channels * BRANCH3D_SIDE.pow(3);
    }
    let aux_base = cfg.use_aux.then(|| b.layer("aux_base", dense(base_width, l)));
    let fc1 = b.seq(
        "fc1",
        vec![("dense", dense(base_width, cfg.fc1_units)), ("relu", LayerSpec::Relu), ("dropout", LayerSpec::Dropout { p: cfg.dropout })],
    );
    let k = cfg.landmarks_per_axis;
    let mut dist_width = 0;
    let dist = cfg.use_dist.then(|| match cfg.dist_mode {
        DistMode::Conv2d => DistNet::Conv(
            cfg.dist_kernels()
                .into_iter()
                .map(|ks| {
                    dist_width += cfg.dist_channels * (k - ks + 1).pow(2);
                    b.seq(
                        &format!("dist.conv{ks}"),
                        vec![("conv", conv2d(k, cfg.dist_channels, ks)), ("relu", LayerSpec::Relu), ("flatten", LayerSpec::Flatten)],
                    )
                })
                .collect(),
        ),
        DistMode::VectorFc => {
            dist_width = cfg.dist_units;
            DistNet::Fc(b.seq("dist.fc", vec![("dense", dense(k * k * k, cfg.dist_units)), ("relu", LayerSpec::Relu)]))
        }
    });
    let aux_dist = (cfg.use_dist && cfg.use_aux).then(|| b.layer("aux_dist", dense(dist_width, l)));
    let fc2 = b.seq(
        "fc2",
        vec![
            ("dense", dense(cfg.fc1_units + dist_width, cfg.fc2_units)),
            ("relu", LayerSpec::Relu),
            ("dropout", LayerSpec::Dropout { p: cfg.dropout }),
        ],
    );
    let fc3 = b.layer("fc3", dense(cfg.fc2_units, l));
    let prob = cfg.use_prob.then(|| {
        let fc = || LayerSpec::Dense { inputs: l, outputs: l, bias: false };
        b.seq("prob", vec![("fc1", fc()), ("relu1", LayerSpec::Relu), ("fc2", fc()), ("relu2", LayerSpec::Relu), ("fc3", fc())])
    });
    Ok(Model {
        config: cfg.clone(),
        params: b.params,
        info: b.info,
        branches,
        mix,
        branch3d,
        aux_base,
        fc1,
        dist,
        aux_dist,
        fc2,
        fc3,
        prob,
    })
}

pub fn count_params<T: Scalar>(m: &Model<T>) -> usize {
    m.params.iter().map(Tensor::len).sum()
}

struct Trace<T> {
    branches: Vec<SeqTrace<T>>,
    mix: SeqTrace<T>,
    branch3d: Option<SeqTrace<T>>,
    base_feat: Tensor<T>,
    aux_base: Option<(Node<T>, Vec<T>)>,
    fc1: SeqTrace<T>,
    dist: Vec<SeqTrace<T>>,
    dist_feat: Option<Tensor<T>>,
    aux_dist: Option<(Node<T>, Vec<T>)>,
    fc2: SeqTrace<T>,
    fc3: Node<T>,
    prob: Option<SeqTrace<T>>,
    logits: Vec<T>,
}

fn cat<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    Tensor::vector(parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn split<T: Scalar>(g: &[T], lens: &[usize]) -> Vec<Tensor<T>> {
    let mut off = 0;
    lens.iter()
        .map(|&n| {
            let t = Tensor::vector(g[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn input<T: Scalar>(name: &str, data: &[f32], shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(Error::Shape { layer: format!("{name} input"), detail: format!("expected {n} values, got {}", data.len()) });
    }
    Tensor::from_f32(shape, data)
}

fn missing(field: &str, branch: &str) -> Error {
    Error::invalid(format!("sample has no {field} but the {branch} is enabled"))
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    pub fn decay_flags(&self) -> Vec<bool> {
        self.info.iter().map(|p| p.decay).collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Names of every layer in wiring order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seq = |s: &Seq| out.extend(s.layers.iter().map(|l| l.name.clone()));
        self.branches.iter().for_each(&mut seq);
        seq(&self.mix);
        self.branch3d.iter().for_each(&mut seq);
        seq(&self.fc1);
        match &self.dist {
            Some(DistNet::Conv(paths)) => paths.iter().for_each(&mut seq),
            Some(DistNet::Fc(s)) => seq(s),
            None => {}
        }
        seq(&self.fc2);
        self.prob.iter().for_each(&mut seq);
        out.extend(self.aux_base.iter().chain(&self.aux_dist).chain([&self.fc3]).map(|l| l.name.clone()));
        out
    }

    /// Replaces all parameters, keeping names and shapes.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} tensors, got {}", self.params.len(), params.len())));
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::Shape {
                    layer: self.info[i].name.clone(),
                    detail: format!("expected {:?}, got {:?}", old.shape(), new.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            info: self.info.clone(),
            branches: self.branches.clone(),
            mix: self.mix.clone(),
            branch3d: self.branch3d.clone(),
            aux_base: self.aux_base.clone(),
            fc1: self.fc1.clone(),
            dist: self.dist.clone(),
            aux_dist: self.aux_dist.clone(),
            fc2: self.fc2.clone(),
            fc3: self.fc3.clone(),
            prob: self.prob.clone(),
        }
    }

    /// `rng` seeds dropout; it is unused in eval mode.
    pub fn forward(&self, sample: &PatchSample, mode: Mode, rng: &Rng) -> Result<Output<T>> {
        let t = self.trace(sample, mode, rng)?;
        let aux = t.aux_base.iter().chain(&t.aux_dist).map(|(_, p)| p.clone()).collect();
        Ok(Output { probs: softmax(&t.logits), aux })
    }

    /// Global loss (main plus weighted auxiliary cross-entropies) for one
    /// sample; gradients are added to `grads` after scaling by `scale`.
    pub fn loss_and_grad(
        &self,
        sample: &PatchSample,
        mode: Mode,
        rng: &Rng,
        class_weights: Option<&[T]>,
        scale: T,
        grads: &mut [Tensor<T>],
    ) -> Result<T> {
        let t = self.trace(sample, mode, rng)?;
        let target = usize::from(sample.target);
        let (mut loss, g_logits) = softmax_cross_entropy(&t.logits, target, class_weights)?;
        let p = &self.params;
        let sc = |g: Vec<T>| -> Vec<T> { g.into_iter().map(|v| v * scale).collect() };

        // logits = fc3 + prob
        if let (Some(prob), Some(tr)) = (&self.prob, &t.prob) {
            prob.backward(p, tr, Tensor::vector(sc(g_logits.clone())), grads, false)?;
        }
        let mut g = self.fc3.backward(p, &[t.fc2.output()], &t.fc3, &Tensor::vector(sc(g_logits)), grads, true)?;
        let g_fc2_out = g.pop().unwrap();
        let g_fc2_in = self.fc2.backward(p, &t.fc2, g_fc2_out, grads, true)?.unwrap();
        let fc1_len = self.config.fc1_units;
        let dist_len = t.dist_feat.as_ref().map_or(0, Tensor::len);
        let mut parts = split(g_fc2_in.data(), &[fc1_len, dist_len]);
        let mut g_dist = parts.pop().unwrap();
        let g_fc1_out = parts.pop().unwrap();

        if let (Some(layer), Some((node, _)), Some(feat)) = (&self.aux_dist, &t.aux_dist, &t.dist_feat) {
            let w = T::of(self.config.aux_weights.1);
            let (l_aux, g_aux) = softmax_cross_entropy(node.out.data(), target, class_weights)?;
            loss = loss + w * l_aux;
            let gx = layer.backward(p, &[feat], node, &Tensor::vector(sc(g_aux.into_iter().map(|v| v * w).collect())), grads, true)?;
            add_into(&mut g_dist, gx[0].data());
        }
        match &self.dist {
            Some(DistNet::Conv(paths)) => {
                let lens: Vec<usize> = t.dist.iter().map(|tr| tr.output().len()).collect();
                for ((path, tr), gp) in paths.iter().zip(&t.dist).zip(split(g_dist.data(), &lens)) {
                    path.backward(p, tr, gp, grads, false)?;
                }
            }
            Some(DistNet::Fc(s)) => {
                s.backward(p, &t.dist[0], g_dist, grads, false)?;
            }
            None => {}
        }

        let mut g_base = self.fc1.backward(p, &t.fc1, g_fc1_out, grads, true)?.unwrap();
        if let (Some(layer), Some((node, _))) = (&self.aux_base, &t.aux_base) {
            let w = T::of(self.config.aux_weights.0);
            let (l_aux, g_aux) = softmax_cross_entropy(node.out.data(), target, class_weights)?;
            loss = loss + w * l_aux;
            let gx =
                layer.backward(p, &[&t.base_feat], node, &Tensor::vector(sc(g_aux.into_iter().map(|v| v * w).collect())), grads, true)?;
            add_into(&mut g_base, gx[0].data());
        }
        let mix_len = t.mix.output().len();
        let len3d = t.branch3d.as_ref().map_or(0, |tr| tr.output().len());
        let mut parts = split(g_base.data(), &[mix_len, len3d]);
        let g3d = parts.pop().unwrap();
        let g_mix = parts.pop().unwrap();
        if let (Some(s), Some(tr)) = (&self.branch3d, &t.branch3d) {
            s.backward(p, tr, g3d, grads, false)?;
        }
        let g_mix_in = self.mix.backward(p, &t.mix, g_mix, grads, true)?.unwrap();
        let plane = t.branches[0].output().len();
        debug_assert_eq!(g_mix_in.len(), 3 * plane);
        for (i, (branch, tr)) in self.branches.iter().zip(&t.branches).enumerate() {
            let gi = Tensor::new(tr.output().shape().to_vec(), g_mix_in.data()[i * plane..(i + 1) * plane].to_vec())?;
            branch.backward(p, tr, gi, grads, false)?;
        }
        Ok(loss)
    }

    fn trace(&self, s: &PatchSample, mode: Mode, rng: &Rng) -> Result<Trace<T>> {
        let cfg = &self.config;
        let p = &self.params;
        let shape2d = [1, PATCH, PATCH];
        let patches = [("p25", &s.p25), ("p51s", &s.p51s), ("p71s", &s.p71s)];
        let mut branches = Vec::with_capacity(3);
        for ((name, data), branch) in patches.into_iter().zip(&self.branches) {
            branches.push(branch.forward(p, input(name, data, &shape2d)?, mode, rng)?);
        }
        let side = branches[0].output().shape()[1..].to_vec();
        let mix_in = Tensor::new(
            [vec![3 * cfg.conv2_channels], side].concat(),
            branches.iter().flat_map(|b| b.output().data().iter().copied()).collect(),
        )?;
        let mix = self.mix.forward(p, mix_in, mode, rng)?;

        let branch3d = match &self.branch3d {
            Some(b) => {
                let data = s.p3d.as_ref().ok_or_else(|| missing("3D patch", "3D branch"))?;
                Some(b.forward(p, input("p3d", data, &[1, PATCH_3D, PATCH_3D, PATCH_3D])?, mode, rng)?)
            }
            None => None,
        };
        let base_feat = match &branch3d {
            Some(tr) => cat(&[mix.output(), tr.output()]),
            None => mix.output().clone(),
        };
        let aux_base = match &self.aux_base {
            Some(layer) => {
                let node = layer.forward(p, &[&base_feat], mode, rng)?;
                let probs = softmax(node.out.data());
                Some((node, probs))
            }
            None => None,
        };
        let fc1 = self.fc1.forward(p, base_feat.clone(), mode, rng)?;

        let mut dist = Vec::new();
        let mut dist_feat = None;
        if let Some(net) = &self.dist {
            let k = cfg.landmarks_per_axis;
            let raw = s.dist.as_ref().ok_or_else(|| missing("distance image", "distance branch"))?;
            let mut x: Tensor<T> = input("dist", raw, &[k, k, k])?;
            if cfg.use_rbf {
                let a = T::of(cfg.rbf_alpha);
                for v in x.data_mut() {
                    *v = (-a * *v * *v).exp();
                }
            }
            match net {
                DistNet::Conv(paths) => {
                    for path in paths {
                        dist.push(path.forward(p, x.clone(), mode, rng)?);
                    }
                }
                DistNet::Fc(seq) => dist.push(seq.forward(p, x.reshaped(vec![k * k * k])?, mode, rng)?),
            }
            dist_feat = Some(cat(&dist.iter().map(SeqTrace::output).collect::<Vec<_>>()));
        }
        let aux_dist = match (&self.aux_dist, &dist_feat) {
            (Some(layer), Some(f)) => {
                let node = layer.forward(p, &[f], mode, rng)?;
                let probs = softmax(node.out.data());
                Some((node, probs))
            }
            _ => None,
        };
        let fc2_in = match &dist_feat {
            Some(f) => cat(&[fc1.output(), f]),
            None => fc1.output().clone(),
        };
        let fc2 = self.fc2.forward(p, fc2_in, mode, rng)?;
        let fc3 = self.fc3.forward(p, &[fc2.output()], mode, rng)?;
        let mut logits = fc3.out.data().to_vec();
        let prob = match &self.prob {
            Some(seq) => {
                let a = s.atlas_prob.as_ref().ok_or_else(|| missing("atlas probability", "probability branch"))?;
                let tr = seq.forward(p, input("atlas_prob", a, &[cfg.num_classes])?, mode, rng)?;
                for (l, &v) in logits.iter_mut().zip(tr.output().data()) {
                    *l = *l + v;
                }
                Some(tr)
            }
            None => None,
        };
        Ok(Trace { branches, mix, branch3d, base_feat, aux_base, fc1, dist, dist_feat, aux_dist, fc2, fc3, prob, logits })
    }
}

/// Compares analytic and central-difference gradients of the global loss for
/// up to `per_tensor` entries of every parameter tensor (all entries when the
/// tensor is smaller). Dropout masks are identical across evaluations.
///
/// An entry whose perturbation flips the sign of any ReLU input is not
/// differentiable at that step size; it is skipped and counted in
/// `skipped_kinks`.
pub fn grad_check_model<T: Scalar>(
    model: &Model<T>,
    sample: &PatchSample,
    rng: &Rng,
    eps: f64,
    per_tensor: usize,
    pick_seed: u64,
) -> Result<ModelGradCheck> {
    let mut grads = model.zero_grads();
    model.loss_and_grad(sample, Mode::Train, rng, None, T::one(), &mut grads)?;
    let (_, base_signature) = model.loss_and_signature(sample, rng)?;
    let mut report = GradCheckReport::empty();
    let mut skipped_kinks = 0;
    let mut pick = Rng::new(pick_seed);
    let mut probe = model.clone();
    for (t, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let idx: Vec<usize> =
            if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| pick.below(n as u64) as usize).collect() };
        for i in idx {
            let orig = model.params[t].data()[i];
            probe.params[t].data_mut()[i] = orig + T::of(eps);
            let (plus, sig_plus) = probe.loss_and_signature(sample, rng)?;
            probe.params[t].data_mut()[i] = orig - T::of(eps);
            let (minus, sig_minus) = probe.loss_and_signature(sample, rng)?;
            probe.params[t].data_mut()[i] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(|| format!("{}[{i}]", model.info[t].name), grad.data()[i].f64(), numeric);
        }
    }
    Ok(ModelGradCheck { report, skipped_kinks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub skipped_kinks: usize,
}

impl<T: Scalar> Model<T> {
    /// Global loss plus a hash of the sign pattern of every ReLU input.
    fn loss_and_signature(&self, sample: &PatchSample, rng: &Rng) -> Result<(f64, u64)> {
        let t = self.trace(sample, Mode::Train, rng)?;
        let target = usize::from(sample.target);
        let ce = |l: &[T]| softmax_cross_entropy(l, target, None).map(|r| r.0.f64());
        let mut loss = ce(&t.logits)?;
        if let Some((node, _)) = &t.aux_base {
            loss += self.config.aux_weights.0 * ce(node.out.data())?;
        }
        if let Some((node, _)) = &t.aux_dist {
            loss += self.config.aux_weights.1 * ce(node.out.data())?;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let seqs = self
            .branches
            .iter()
            .zip(&t.branches)
            .chain([(&self.mix, &t.mix), (&self.fc1, &t.fc1), (&self.fc2, &t.fc2)])
            .chain(self.branch3d.iter().zip(&t.branch3d))
            .chain(self.prob.iter().zip(&t.prob));
        let dist_seqs: Vec<&Seq> = match &self.dist {
            Some(DistNet::Conv(paths)) => paths.iter().collect(),
            Some(DistNet::Fc(s)) => vec![s],
            None => Vec::new(),
        };
        for (seq, tr) in seqs.chain(dist_seqs.into_iter().zip(&t.dist)) {
            for (layer, x) in seq.layers.iter().zip(&tr.inputs) {
                if layer.spec == LayerSpec::Relu {
                    for &v in x.data() {
                        h = (h ^ u64::from(v > T::zero())).wrapping_mul(0x100_0000_01b3);
                    }
                }
            }
        }
        Ok((loss, h))
    }
}
