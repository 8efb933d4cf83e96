//! A small reverse-mode tape over vector-valued nodes, dense layers, and the
//! one-hot amortized mixture encoder built from them.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{DiagGaussian, RngStream};
use crate::vfamily::MixtureParams;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `W x + b` with W stored row-major as `out × in`.
    Affine { w: Var, b: Var, x: Var },
    Relu(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    /// `Σ_i a_i c_i` for a constant vector c.
    DotConst(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`], one vector per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// A leaf node: an input or a parameter block.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (out, inp) = (self.value(b).len(), self.value(x).len());
        if self.value(w).len() != out * inp {
            return Err(contract(format!(
                "weight has {} entries, expected {out} x {inp}",
                self.value(w).len()
            )));
        }
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        let y = (0..out)
            .map(|o| {
                let row = &wv[o * inp..(o + 1) * inp];
                bv[o] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(Op::Affine { w, b, x }, y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push(Op::Relu(a), y)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let y = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a), y)
    }

    pub fn dot_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(contract("dot_const length mismatch"));
        }
        let y = vec![self.value(a).iter().zip(c).map(|(x, y)| x * y).sum()];
        Ok(self.push(Op::DotConst(a, c.to_vec()), y))
    }

    fn same_len(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(contract(format!(
                "operand lengths {} and {} differ",
                self.value(a).len(),
                self.value(b).len()
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar node. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(contract("backward already ran on this tape; record a new forward pass"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!("loss node has {} entries, expected a scalar", self.value(loss).len())));
        }
        self.consumed = true;
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[loss.0][0] = 1.0;
        for id in (0..=loss.0).rev() {
            if adj[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[id]);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let inp = self.nodes[x.0].value.len();
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        adj[b.0][o] += go;
                        for i in 0..inp {
                            adj[w.0][o * inp + i] += go * xv[i];
                            adj[x.0][i] += go * wv[o * inp + i];
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            adj[a.0][i] += g[i];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        for i in 0..n {
                            adj[p.0][i] += g[off + i];
                        }
                        off += n;
                    }
                }
                Op::Add(a, b) => {
                    for i in 0..g.len() {
                        adj[a.0][i] += g[i];
                        adj[b.0][i] += g[i];
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..g.len() {
                        let (va, vb) = (self.nodes[a.0].value[i], self.nodes[b.0].value[i]);
                        adj[a.0][i] += g[i] * vb;
                        adj[b.0][i] += g[i] * va;
                    }
                }
                Op::Sum(a) => {
                    for v in adj[a.0].iter_mut() {
                        *v += g[0];
                    }
                }
                Op::DotConst(a, c) => {
                    for (v, ci) in adj[a.0].iter_mut().zip(c) {
                        *v += g[0] * ci;
                    }
                }
            }
            adj[id] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDenseLayer")]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major `out_dim × in_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<RawDenseLayer> for DenseLayer {
    type Error = Error;

    fn try_from(r: RawDenseLayer) -> Result<Self> {
        DenseLayer::new(r.in_dim, r.out_dim, r.activation, r.weight, r.bias)
    }
}

/// Parameters of one layer placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(contract("layer dimensions must be positive"));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(contract(format!(
                "layer {in_dim}->{out_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(contract("layer parameters must be finite"));
        }
        Ok(Self { in_dim, out_dim, activation, weight, bias })
    }

    /// Kaiming-uniform weights, bound `sqrt(6 / fan_in)`, zero bias.
    pub fn kaiming_uniform(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut RngStream) -> Result<Self> {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
        Self::new(in_dim, out_dim, activation, weight, vec![0.0; out_dim])
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            activation: self.activation,
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, flat: &[f64]) -> usize {
        let nw = self.weight.len();
        self.weight.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..nw + self.out_dim]);
        nw + self.out_dim
    }
}

impl BoundLayer {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.affine(self.weight, self.bias, x)?;
        Ok(match self.activation {
            Activation::Identity => y,
            Activation::Relu => tape.relu(y),
        })
    }
}

/// `o_A(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHot {
    index: usize,
    a: usize,
}

impl OneHot {
    pub fn new(index: usize, a: usize) -> Result<Self> {
        if index >= a {
            return Err(contract(format!("one-hot index {index} out of range for A = {a}")));
        }
        Ok(Self { index, a })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn a(&self) -> usize {
        self.a
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.a];
        v[self.index] = 1.0;
        v
    }
}

/// Feed-forward pass of the data-to-hidden network on a tape.
pub fn d2h_forward(tape: &mut Tape, net: &[BoundLayer], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in net {
        h = layer.apply(tape, h)?;
    }
    Ok(h)
}

/// Value-only convenience wrapper around [`d2h_forward`].
pub fn d2h_eval(net: &[DenseLayer], x: &[f64]) -> Result<Vec<f64>> {
    if let Some(first) = net.first() {
        if first.in_dim != x.len() {
            return Err(contract(format!("input has {} entries, first layer expects {}", x.len(), first.in_dim)));
        }
    }
    let mut tape = Tape::new();
    let bound: Vec<BoundLayer> = net.iter().map(|l| l.bind(&mut tape)).collect();
    let xv = tape.leaf(x.to_vec());
    let h = d2h_forward(&mut tape, &bound, xv)?;
    Ok(tape.value(h).to_vec())
}

/// Where the one-hot code enters the mixture-parameter network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Concatenated to the input of every layer, output heads included.
    #[default]
    EveryLayer,
    /// Concatenated to the input of the first layer only.
    FirstLayer,
}

/// Network mapping `(h, o_A(s))` to the s-th component's mean and log-std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpNet {
    pub a: usize,
    pub injection: InjectionMode,
    pub hidden: Vec<DenseLayer>,
    pub mean_head: DenseLayer,
    pub log_std_head: DenseLayer,
}

/// The AMP network's parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundAmp {
    hidden: Vec<BoundLayer>,
    mean_head: BoundLayer,
    log_std_head: BoundLayer,
}

impl AmpNet {
    pub fn new(h_dim: usize, widths: &[usize], d_z: usize, a: usize, injection: InjectionMode, rng: &mut RngStream) -> Result<Self> {
        if a == 0 {
            return Err(contract("A must be at least 1"));
        }
        let mut hidden = Vec::new();
        let mut prev = h_dim;
        for (i, &w) in widths.iter().enumerate() {
            let extra = if i == 0 || injection == InjectionMode::EveryLayer { a } else { 0 };
            hidden.push(DenseLayer::kaiming_uniform(prev + extra, w, Activation::Relu, rng)?);
            prev = w;
        }
        let extra = if widths.is_empty() || injection == InjectionMode::EveryLayer { a } else { 0 };
        let mean_head = DenseLayer::kaiming_uniform(prev + extra, d_z, Activation::Identity, rng)?;
        let log_std_head = DenseLayer::kaiming_uniform(prev + extra, d_z, Activation::Identity, rng)?;
        Ok(Self { a, injection, hidden, mean_head, log_std_head })
    }

    fn injected(&self, layer_index: usize) -> bool {
        layer_index == 0 || self.injection == InjectionMode::EveryLayer
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.hidden.iter().chain([&self.mean_head, &self.log_std_head])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(DenseLayer::num_params).sum()
    }

    /// Parameters added per extra component: the summed output width of every
    /// layer that sees the one-hot code.
    pub fn one_hot_fan_in_width(&self) -> usize {
        let hidden: usize = self
            .hidden
            .iter()
            .enumerate()
            .filter(|(i, _)| self.injected(*i))
            .map(|(_, l)| l.out_dim)
            .sum();
        let heads = if self.injected(self.hidden.len()) {
            self.mean_head.out_dim + self.log_std_head.out_dim
        } else {
            0
        };
        hidden + heads
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAmp {
        BoundAmp {
            hidden: self.hidden.iter().map(|l| l.bind(tape)).collect(),
            mean_head: self.mean_head.bind(tape),
            log_std_head: self.log_std_head.bind(tape),
        }
    }
}

/// One component's `(mean, log_std)` from hidden features `h`.
pub fn amp_forward(tape: &mut Tape, net: &AmpNet, bound: &BoundAmp, h: Var, s: OneHot) -> Result<(Var, Var)> {
    if s.a != net.a {
        return Err(contract(format!("one-hot over A = {} but the network is built for A = {}", s.a, net.a)));
    }
    let code = tape.leaf(s.to_vec());
    let mut cur = h;
    for (i, layer) in bound.hidden.iter().enumerate() {
        let input = if net.injected(i) { tape.concat(&[cur, code]) } else { cur };
        cur = layer.apply(tape, input)?;
    }
    let input = if net.injected(bound.hidden.len()) { tape.concat(&[cur, code]) } else { cur };
    let mean = bound.mean_head.apply(tape, input)?;
    let log_std = bound.log_std_head.apply(tape, input)?;
    Ok((mean, log_std))
}

/// Sizes of the toy-scale encoder.
pub const D2H_WIDTHS: [usize; 2] = [32, 32];
pub const AMP_WIDTHS: [usize; 1] = [40];

/// Mixture encoder: a shared data-to-hidden network followed by the
/// one-hot conditioned parameter network, evaluated once per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misvae {
    pub d2h: Vec<DenseLayer>,
    pub amp: AmpNet,
}

/// Encoder parameters on a tape and the per-component output nodes.
pub struct EncoderPass {
    pub d2h: Vec<BoundLayer>,
    pub amp: BoundAmp,
    pub components: Vec<(Var, Var)>,
}

impl Misvae {
    pub fn new(d_x: usize, d_z: usize, a: usize, injection: InjectionMode, rng: &mut RngStream) -> Result<Self> {
        Self::with_widths(d_x, d_z, a, injection, &D2H_WIDTHS, &AMP_WIDTHS, rng)
    }

    pub fn with_widths(
        d_x: usize,
        d_z: usize,
        a: usize,
        injection: InjectionMode,
        d2h_widths: &[usize],
        amp_widths: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        if d_x == 0 || d_z == 0 {
            return Err(contract("d_x and d_z must be positive"));
        }
        let mut d2h = Vec::new();
        let mut prev = d_x;
        for &w in d2h_widths {
            d2h.push(DenseLayer::kaiming_uniform(prev, w, Activation::Relu, rng)?);
            prev = w;
        }
        let amp = AmpNet::new(prev, amp_widths, d_z, a, injection, rng)?;
        Ok(Self { d2h, amp })
    }

    pub fn a(&self) -> usize {
        self.amp.a
    }

    pub fn d_x(&self) -> usize {
        self.d2h.first().map_or(self.amp.mean_head.in_dim, |l| l.in_dim)
    }

    pub fn d_z(&self) -> usize {
        self.amp.mean_head.out_dim
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.d2h.iter().chain(self.amp.layers())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(DenseLayer::num_params).sum()
    }

    pub fn one_hot_fan_in_width(&self) -> usize {
        self.amp.one_hot_fan_in_width()
    }

    /// Parameters in layer order, each layer weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            l.write_flat(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(contract(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(contract(format!("parameter {i} is not finite")));
        }
        let mut off = 0;
        for l in self.d2h.iter_mut().chain(self.amp.hidden.iter_mut()) {
            off += l.read_flat(&flat[off..]);
        }
        off += self.amp.mean_head.read_flat(&flat[off..]);
        self.amp.log_std_head.read_flat(&flat[off..]);
        Ok(())
    }

    /// Records the encoder for one datum, all A components.
    pub fn forward(&self, tape: &mut Tape, x: &[f64]) -> Result<EncoderPass> {
        if x.len() != self.d_x() {
            return Err(contract(format!("datum has {} entries, encoder expects {}", x.len(), self.d_x())));
        }
        let d2h: Vec<BoundLayer> = self.d2h.iter().map(|l| l.bind(tape)).collect();
        let amp = self.amp.bind(tape);
        let xv = tape.leaf(x.to_vec());
        let h = d2h_forward(tape, &d2h, xv)?;
        let components = (0..self.a())
            .map(|s| amp_forward(tape, &self.amp, &amp, h, OneHot::new(s, self.a())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderPass { d2h, amp, components })
    }

    /// Mixture parameters for one datum.
    pub fn encode(&self, x: &[f64]) -> Result<MixtureParams> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x)?;
        pass.mixture(&tape)
    }

    /// Pulls `upstream` (gradient of an objective w.r.t. the flat mixture
    /// parameters of one datum) back to the network parameters, accumulating
    /// into `grad` in [`Misvae::to_flat`] order.
    pub fn backprop(&self, mut tape: Tape, pass: &EncoderPass, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let d = self.d_z();
        if upstream.len() != 2 * d * self.a() || grad.len() != self.num_params() {
            return Err(contract("gradient buffers have the wrong size"));
        }
        let mut terms = Vec::with_capacity(2 * self.a());
        for (k, &(mean, log_std)) in pass.components.iter().enumerate() {
            let base = 2 * d * k;
            terms.push(tape.dot_const(mean, &upstream[base..base + d])?);
            terms.push(tape.dot_const(log_std, &upstream[base + d..base + 2 * d])?);
        }
        let stacked = tape.concat(&terms);
        let loss = tape.sum(stacked);
        let g = tape.backward(loss)?;
        let mut off = 0;
        let mut take = |layer: &BoundLayer| {
            for src in [layer.weight, layer.bias] {
                let part = g.wrt(src);
                for (dst, v) in grad[off..off + part.len()].iter_mut().zip(part) {
                    *dst += v;
                }
                off += part.len();
            }
        };
        for l in &pass.d2h {
            take(l);
        }
        for l in &pass.amp.hidden {
            take(l);
        }
        take(&pass.amp.mean_head);
        take(&pass.amp.log_std_head);
        Ok(())
    }
}

impl EncoderPass {
    pub fn mixture(&self, tape: &Tape) -> Result<MixtureParams> {
        let comps = self
            .components
            .iter()
            .map(|&(m, s)| DiagGaussian::new(tape.value(m).to_vec(), tape.value(s).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::uniform(comps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x), &[2.0, 4.0]);
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, -1e-300, 1.0]);
        let r = t.relu(x);
        let loss = t.sum(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_layer_and_negative_relu() {
        let eye = DenseLayer::new(2, 2, Activation::Identity, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(d2h_eval(&[eye], &[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
        let relu = DenseLayer::new(2, 2, Activation::Relu, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(d2h_eval(std::slice::from_ref(&relu), &[-3.0, -4.0]).unwrap(), vec![0.0, 0.0]);
        assert!(d2h_eval(&[relu], &[1.0]).is_err());
    }

    #[test]
    fn one_hot_validation() {
        assert!(OneHot::new(3, 3).is_err());
        assert_eq!(OneHot::new(1, 3).unwrap().to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn parameter_increment_is_fan_in_width() {
        for mode in [InjectionMode::EveryLayer, InjectionMode::FirstLayer] {
            let count = |a| Misvae::new(20, 2, a, mode, &mut RngStream::new(0, 0)).unwrap();
            for a in 1..=8 {
                let (m0, m1) = (count(a), count(a + 1));
                assert_eq!(m1.num_params() - m0.num_params(), m0.one_hot_fan_in_width());
            }
        }
        let m = Misvae::new(20, 2, 1, InjectionMode::EveryLayer, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(m.one_hot_fan_in_width(), 44);
    }

    #[test]
    fn components_differ_and_share_weights() {
        let m = Misvae::new(5, 2, 3, InjectionMode::EveryLayer, &mut RngStream::new(1, 0)).unwrap();
        let x = [1.0, 0.0, 1.0, 1.0, 0.0];
        let q = m.encode(&x).unwrap();
        assert_ne!(q.component(0), q.component(1));
        // touching one shared parameter moves every component
        let mut flat = m.to_flat();
        let mean_bias = m.num_params() - m.amp.log_std_head.num_params() - m.d_z();
        flat[mean_bias] += 0.5;
        let mut m2 = m.clone();
        m2.set_flat(&flat).unwrap();
        let q2 = m2.encode(&x).unwrap();
        for k in 0..3 {
            assert_ne!(q.component(k), q2.component(k));
        }
    }

    #[test]
    fn single_component_ignores_code() {
        let m = Misvae::new(4, 2, 1, InjectionMode::EveryLayer, &mut RngStream::new(2, 0)).unwrap();
        let a = m.encode(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = m.encode(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Misvae::new(6, 2, 3, InjectionMode::FirstLayer, &mut RngStream::new(3, 0)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: Misvae = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let mut flat = m.to_flat();
        let mut m2 = m.clone();
        m2.set_flat(&flat).unwrap();
        assert_eq!(m2, m);
        flat.pop();
        assert!(m2.set_flat(&flat).is_err());
    }
}
