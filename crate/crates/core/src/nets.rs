//! Multilayer perceptrons for the generator, the discriminator backbone and
//! its three heads, plus the moving-average updates that drive the momentum
//! encoder and the generator EMA.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::graph::{leaky_relu_slope, Graph, GraphError, Var};
use crate::rng::substream;
use crate::tensor::{gemm, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("{name}: dimensions must be positive, got {dims:?}")]
    ZeroDim { name: String, dims: Vec<usize> },
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("moving-average weight must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("unknown head `{0}` (expected domain, real or fake)")]
    UnknownHead(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Identity => x,
        }
    }
}

/// One affine layer `y = act(x·W + b)` with `W` of shape `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// An MLP's parameters. `trainable` decides whether binding it onto a graph
/// produces gradient-carrying leaves; momentum copies are never trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub name: String,
    pub layers: Vec<Layer>,
    pub trainable: bool,
}

impl NetworkParams {
    /// Builds an MLP through `dims` (input, hidden..., output). Hidden layers
    /// use `hidden` activation, the last layer `output`. Weights are uniform in
    /// `±sqrt(1/in_dim)`, biases zero.
    pub fn mlp<R: Rng>(
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetError::ZeroDim {
                name: name.to_string(),
                dims: dims.to_vec(),
            });
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data),
                    bias: Tensor::zeros(&[fan_out]),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Ok(NetworkParams {
            name: name.to_string(),
            layers,
            trainable: true,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// `(name, tensor)` pairs, e.g. `generator.2.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{}.{i}.weight", self.name), &l.weight),
                    (format!("{}.{i}.bias", self.name), &l.bias),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// A frozen copy suitable as a momentum or EMA target.
    pub fn frozen_copy(&self) -> Self {
        NetworkParams {
            trainable: false,
            ..self.clone()
        }
    }

    /// Forward pass outside any graph. Bitwise equal to the graph forward.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            let (m, k, n) = (cur.rows(), layer.in_dim(), layer.out_dim());
            assert_eq!(cur.cols(), k, "{}: input width", self.name);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, cur.data(), false, layer.weight.data(), false, &mut out, false);
            for row in out.chunks_exact_mut(n) {
                for (y, b) in row.iter_mut().zip(layer.bias.data()) {
                    *y += b;
                }
            }
            if layer.activation != Activation::Identity {
                out.iter_mut().for_each(|y| *y = layer.activation.apply(*y));
            }
            cur = Tensor::matrix(m, n, out);
        }
        cur
    }

    pub fn bind(&self, g: &mut Graph) -> BoundNet {
        self.bind_as(g, self.trainable)
    }

    /// Binds parameters onto `g`, as trainable leaves or as constants.
    pub fn bind_as(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.weight.clone(), trainable),
                    g.leaf(l.bias.clone(), trainable),
                    l.activation,
                )
            })
            .collect();
        BoundNet { layers }
    }

    /// Wraps already-bound leaves (in [`tensors`](Self::tensors) order) with
    /// this network's activations.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundNet {
        assert_eq!(vars.len(), 2 * self.layers.len(), "{}: var count", self.name);
        let layers = self
            .layers
            .iter()
            .zip(vars.chunks_exact(2))
            .map(|(l, wb)| (wb[0], wb[1], l.activation))
            .collect();
        BoundNet { layers }
    }

    fn check_same_structure(&self, other: &NetworkParams) -> Result<(), NetError> {
        if self.layers.len() != other.layers.len() {
            return Err(NetError::Structure(format!(
                "{} has {} layers, {} has {}",
                self.name,
                self.layers.len(),
                other.name,
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.shape() != b.weight.shape() || a.bias.shape() != b.bias.shape() {
                return Err(NetError::Structure(format!(
                    "{}.{i}: {:?} vs {:?}",
                    self.name,
                    a.weight.shape(),
                    b.weight.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of a [`NetworkParams`] bound onto a graph.
#[derive(Clone, Debug)]
pub struct BoundNet {
    layers: Vec<(Var, Var, Activation)>,
}

/// Forward pass with pre-activations retained, for input-gradient chains.
pub struct Trace {
    pub output: Var,
    pub layers: Vec<TracedLayer>,
}

pub struct TracedLayer {
    pub weight: Var,
    pub preact: Var,
    pub activation: Activation,
}

impl BoundNet {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|(w, b, _)| [*w, *b])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, GraphError> {
        Ok(self.forward_traced(g, x)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<Trace, GraphError> {
        let mut cur = x;
        let mut layers = Vec::with_capacity(self.layers.len());
        for &(w, b, act) in &self.layers {
            let h = g.matmul(cur, w)?;
            let h = g.add_row_bias(h, b)?;
            cur = match act {
                Activation::LeakyRelu(s) => g.leaky_relu(h, s)?,
                Activation::Identity => h,
            };
            layers.push(TracedLayer {
                weight: w,
                preact: h,
                activation: act,
            });
        }
        Ok(Trace {
            output: cur,
            layers,
        })
    }

    /// Accumulated gradients in parameter order, zero where none reached.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars().map(|v| g.grad_tensor(v)).collect()
    }
}

/// Builds, as graph ops, the gradient of `Σ output` with respect to the traced
/// network input, row by row. Every layer must have a single output column at
/// the end of the chain. The result stays differentiable in the weights, which
/// is what the R1 penalty needs.
pub fn input_gradient(g: &mut Graph, layers: &[&TracedLayer]) -> Result<Var, GraphError> {
    let last = layers.last().expect("at least one layer");
    let rows = g.value(last.preact).rows();
    let width = g.value(last.preact).cols();
    let mut delta = g.constant(Tensor::full(&[rows, width], 1.0));
    for layer in layers.iter().rev() {
        if let Activation::LeakyRelu(s) = layer.activation {
            let pre = g.value(layer.preact);
            let mask = pre.data().iter().map(|&h| leaky_relu_slope(h, s)).collect();
            let mask = Tensor::new(pre.shape().to_vec(), mask).unwrap();
            let mask = g.constant(mask);
            delta = g.mul(delta, mask)?;
        }
        let wt = g.transpose(layer.weight)?;
        delta = g.matmul(delta, wt)?;
    }
    Ok(delta)
}

pub fn build_generator(
    latent_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    seed: u64,
) -> Result<NetworkParams, NetError> {
    let mut dims = vec![latent_dim];
    dims.extend_from_slice(hidden);
    dims.push(out_dim);
    let mut rng = substream(seed, 0);
    NetworkParams::mlp(
        "generator",
        &dims,
        Activation::LeakyRelu(LEAKY_SLOPE),
        Activation::Identity,
        &mut rng,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Domain,
    Real,
    Fake,
}

impl FromStr for Head {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        match s {
            "domain" => Ok(Head::Domain),
            "real" => Ok(Head::Real),
            "fake" => Ok(Head::Fake),
            other => Err(NetError::UnknownHead(other.to_string())),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Domain => "domain",
            Head::Real => "real",
            Head::Fake => "fake",
        })
    }
}

/// Discriminator backbone with its domain head and the two instance heads.
///
/// The conventional discriminator is `domain_head ∘ backbone`. The real and
/// fake instance heads are separate two-layer projections whose outputs are
/// L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBundle {
    pub backbone: NetworkParams,
    pub domain_head: NetworkParams,
    pub real_head: NetworkParams,
    pub fake_head: NetworkParams,
}

pub fn build_discriminator(
    in_dim: usize,
    hidden: &[usize],
    feat_dim: usize,
    proj_dim: usize,
    seed: u64,
) -> Result<DiscriminatorBundle, NetError> {
    let lrelu = Activation::LeakyRelu(LEAKY_SLOPE);
    let mut dims = vec![in_dim];
    dims.extend_from_slice(hidden);
    dims.push(feat_dim);
    let mut rng = substream(seed, 1);
    let backbone = NetworkParams::mlp("backbone", &dims, lrelu, lrelu, &mut rng)?;
    let domain_head =
        NetworkParams::mlp("domain_head", &[feat_dim, 1], lrelu, Activation::Identity, &mut rng)?;
    let head_dims = [feat_dim, proj_dim, proj_dim];
    let real_head = NetworkParams::mlp("real_head", &head_dims, lrelu, Activation::Identity, &mut rng)?;
    let fake_head = NetworkParams::mlp("fake_head", &head_dims, lrelu, Activation::Identity, &mut rng)?;
    Ok(DiscriminatorBundle {
        backbone,
        domain_head,
        real_head,
        fake_head,
    })
}

impl DiscriminatorBundle {
    pub fn in_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.real_head.out_dim()
    }

    pub fn nets(&self) -> [&NetworkParams; 4] {
        [&self.backbone, &self.domain_head, &self.real_head, &self.fake_head]
    }

    pub fn nets_mut(&mut self) -> [&mut NetworkParams; 4] {
        [
            &mut self.backbone,
            &mut self.domain_head,
            &mut self.real_head,
            &mut self.fake_head,
        ]
    }

    pub fn head(&self, head: Head) -> &NetworkParams {
        match head {
            Head::Domain => &self.domain_head,
            Head::Real => &self.real_head,
            Head::Fake => &self.fake_head,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.nets().into_iter().flat_map(|n| n.tensors())
    }

    /// Frozen copy for use as the momentum encoder.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.nets_mut().into_iter().flat_map(|n| n.tensors_mut())
    }

    pub fn momentum_copy(&self) -> Self {
        DiscriminatorBundle {
            backbone: self.backbone.frozen_copy(),
            domain_head: self.domain_head.frozen_copy(),
            real_head: self.real_head.frozen_copy(),
            fake_head: self.fake_head.frozen_copy(),
        }
    }

    pub fn features(&self, x: &Tensor) -> Tensor {
        self.backbone.forward(x)
    }

    /// Head output from precomputed backbone features, outside any graph.
    pub fn head_forward(&self, feats: &Tensor, head: Head) -> Tensor {
        let out = self.head(head).forward(feats);
        match head {
            Head::Domain => out,
            Head::Real | Head::Fake => normalize_rows(out),
        }
    }

    /// Forward pass outside any graph: raw `(B, 1)` logits for the domain
    /// head, unit `(B, proj)` rows for the instance heads.
    pub fn forward(&self, x: &Tensor, head: Head) -> Tensor {
        self.head_forward(&self.features(x), head)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDisc {
        self.bind_as(g, self.backbone.trainable)
    }

    pub fn bind_as(&self, g: &mut Graph, trainable: bool) -> BoundDisc {
        BoundDisc {
            backbone: self.backbone.bind_as(g, trainable),
            domain_head: self.domain_head.bind_as(g, trainable),
            real_head: self.real_head.bind_as(g, trainable),
            fake_head: self.fake_head.bind_as(g, trainable),
        }
    }
}

fn normalize_rows(mut t: Tensor) -> Tensor {
    let c = t.cols();
    for row in t.data_mut().chunks_exact_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    t
}

pub struct DomainTrace {
    pub features: Var,
    pub logits: Var,
    pub layers: Vec<TracedLayer>,
}

impl DomainTrace {
    /// Gradient of the summed logits w.r.t. the traced input.
    pub fn input_gradient(&self, g: &mut Graph) -> Result<Var, GraphError> {
        let chain: Vec<&TracedLayer> = self.layers.iter().collect();
        input_gradient(g, &chain)
    }
}

/// A [`DiscriminatorBundle`] bound onto a graph.
#[derive(Clone, Debug)]
pub struct BoundDisc {
    pub backbone: BoundNet,
    pub domain_head: BoundNet,
    pub real_head: BoundNet,
    pub fake_head: BoundNet,
}

impl BoundDisc {
    pub fn head(&self, head: Head) -> &BoundNet {
        match head {
            Head::Domain => &self.domain_head,
            Head::Real => &self.real_head,
            Head::Fake => &self.fake_head,
        }
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var, GraphError> {
        self.backbone.forward(g, x)
    }

    pub fn head_forward(&self, g: &mut Graph, feats: Var, head: Head) -> Result<Var, GraphError> {
        let out = self.head(head).forward(g, feats)?;
        match head {
            Head::Domain => Ok(out),
            Head::Real | Head::Fake => g.l2_normalize_rows(out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, head: Head) -> Result<Var, GraphError> {
        let feats = self.features(g, x)?;
        self.head_forward(g, feats, head)
    }

    /// Backbone features and domain logits, with every layer traced.
    pub fn domain_traced(&self, g: &mut Graph, x: Var) -> Result<DomainTrace, GraphError> {
        let body = self.backbone.forward_traced(g, x)?;
        let head = self.domain_head.forward_traced(g, body.output)?;
        let mut layers = body.layers;
        layers.extend(head.layers);
        Ok(DomainTrace {
            features: body.output,
            logits: head.output,
            layers,
        })
    }

    /// Domain logits together with their gradient w.r.t. the input batch,
    /// the latter expressed as differentiable graph ops.
    pub fn domain_with_input_grad(&self, g: &mut Graph, x: Var) -> Result<(Var, Var), GraphError> {
        let t = self.domain_traced(g, x)?;
        let grad = t.input_gradient(g)?;
        Ok((t.logits, grad))
    }

    /// Gradients in the bundle's parameter order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        [&self.backbone, &self.domain_head, &self.real_head, &self.fake_head]
            .into_iter()
            .flat_map(|n| n.grads(g))
            .collect()
    }
}

/// `target := alpha·target + (1 − alpha)·source`, elementwise.
pub fn moving_average(target: &mut NetworkParams, source: &NetworkParams, alpha: f64) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NetError::BadAlpha(alpha));
    }
    target.check_same_structure(source)?;
    for (t, s) in target.tensors_mut().zip(source.tensors()) {
        for (p, q) in t.data_mut().iter_mut().zip(s.data()) {
            *p = alpha * *p + (1.0 - alpha) * q;
        }
    }
    Ok(())
}

/// Momentum-encoder update over all four parts of the bundle.
pub fn momentum_update(
    online: &DiscriminatorBundle,
    momentum: &mut DiscriminatorBundle,
    alpha: f64,
) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NetError::BadAlpha(alpha));
    }
    for (m, o) in momentum.nets_mut().into_iter().zip(online.nets()) {
        m.check_same_structure(o)?;
    }
    for (m, o) in momentum.nets_mut().into_iter().zip(online.nets()) {
        moving_average(m, o, alpha)?;
    }
    Ok(())
}
