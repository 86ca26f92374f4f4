use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParameterSet;
use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

pub type NodeId = usize;
pub type ParamId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Layer vocabulary. Parameterised layers refer to entries of the graph's
/// parameter list; shapes below are per sample (batch axis excluded).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    /// `[in] → [out]`, weight `(out, in)`.
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    /// `[c, h, w] → [out_c, h, w]`, stride 1, zero padding 1, weight `(out_c, c, 3, 3)`.
    Conv3x3 {
        weight: ParamId,
        bias: ParamId,
    },
    /// `[c, h, w] → [out_c, h, w]`, weight `(out_c, c)`.
    Conv1x1 {
        weight: ParamId,
        bias: ParamId,
    },
    /// 2×2 max pooling, argmax routed to the first maximum in row-major order.
    MaxPool2,
    /// Nearest-neighbour 2× upsampling.
    Upsample2,
    Relu,
    /// Channel concatenation of all inputs.
    ConcatChannels,
    /// `[c, h, w] → [c]`.
    GlobalMean,
    /// Shape-only change.
    Reshape,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// A validated layer DAG. Every node's shape is known at construction.
#[derive(Debug, Clone)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    output: NodeId,
    check_finite: bool,
}

/// Incrementally builds a [`Graph`], rejecting ill-formed layers immediately.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: vec![],
                shape: input_shape.to_vec(),
            }],
            params: vec![],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn node(&self, id: NodeId, layer: &str) -> Result<&Node, AutodiffError> {
        self.nodes.get(id).ok_or_else(|| AutodiffError::Shape {
            layer: layer.into(),
            msg: format!("unknown input node {id}"),
        })
    }

    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
    ) -> NodeId {
        self.nodes.push(Node {
            name,
            kind,
            inputs,
            shape,
        });
        self.nodes.len() - 1
    }

    fn param(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: Init,
    ) -> Result<ParamId, AutodiffError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(AutodiffError::Shape {
                layer: name,
                msg: "duplicate parameter name".into(),
            });
        }
        self.params.push(ParamSpec { name, shape, init });
        Ok(self.params.len() - 1)
    }

    fn auto_name(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn shape_err(layer: &str, msg: String) -> AutodiffError {
        AutodiffError::Shape {
            layer: layer.into(),
            msg,
        }
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId, AutodiffError> {
        self.dense_init(name, x, out, None)
    }

    /// Dense layer with an explicit weight initialisation (bias zero).
    pub fn dense_init(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        weight_init: Option<Init>,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.node(x, name)?.shape.clone();
        let [inp] = shape[..] else {
            return Err(Self::shape_err(
                name,
                format!("dense expects a flat input, got {shape:?}"),
            ));
        };
        if out == 0 {
            return Err(Self::shape_err(name, "zero output features".into()));
        }
        let init = weight_init.unwrap_or(Init::He { fan_in: inp });
        let weight = self.param(format!("{name}.weight"), vec![out, inp], init)?;
        let bias = self.param(format!("{name}.bias"), vec![out], Init::Zeros)?;
        Ok(self.push(
            name.into(),
            LayerKind::Dense { weight, bias },
            vec![x],
            vec![out],
        ))
    }

    fn chw(&self, name: &str, x: NodeId) -> Result<(usize, usize, usize), AutodiffError> {
        let shape = &self.node(x, name)?.shape;
        match shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Self::shape_err(
                name,
                format!("expected [c, h, w] input, got {shape:?}"),
            )),
        }
    }

    pub fn conv3x3(
        &mut self,
        name: &str,
        x: NodeId,
        out_c: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (c, h, w) = self.chw(name, x)?;
        if out_c == 0 {
            return Err(Self::shape_err(name, "zero output channels".into()));
        }
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_c, c, 3, 3],
            Init::He { fan_in: 9 * c },
        )?;
        let bias = self.param(format!("{name}.bias"), vec![out_c], Init::Zeros)?;
        Ok(self.push(
            name.into(),
            LayerKind::Conv3x3 { weight, bias },
            vec![x],
            vec![out_c, h, w],
        ))
    }

    pub fn conv1x1(
        &mut self,
        name: &str,
        x: NodeId,
        out_c: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.conv1x1_bias(name, x, out_c, 0.0)
    }

    /// 1×1 convolution whose bias starts at `bias_init`.
    pub fn conv1x1_bias(
        &mut self,
        name: &str,
        x: NodeId,
        out_c: usize,
        bias_init: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (c, h, w) = self.chw(name, x)?;
        if out_c == 0 {
            return Err(Self::shape_err(name, "zero output channels".into()));
        }
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_c, c],
            Init::He { fan_in: c },
        )?;
        let bias = self.param(
            format!("{name}.bias"),
            vec![out_c],
            Init::Constant(bias_init),
        )?;
        Ok(self.push(
            name.into(),
            LayerKind::Conv1x1 { weight, bias },
            vec![x],
            vec![out_c, h, w],
        ))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("maxpool2");
        let (c, h, w) = self.chw(&name, x)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Self::shape_err(
                &name,
                format!("spatial size {h}×{w} is not even"),
            ));
        }
        Ok(self.push(name, LayerKind::MaxPool2, vec![x], vec![c, h / 2, w / 2]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("upsample2");
        let (c, h, w) = self.chw(&name, x)?;
        Ok(self.push(name, LayerKind::Upsample2, vec![x], vec![c, 2 * h, 2 * w]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("relu");
        let shape = self.node(x, &name)?.shape.clone();
        Ok(self.push(name, LayerKind::Relu, vec![x], shape))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("concat");
        if xs.len() < 2 {
            return Err(Self::shape_err(&name, "needs at least two inputs".into()));
        }
        let (_, h, w) = self.chw(&name, xs[0])?;
        let mut c_total = 0;
        for &x in xs {
            let (c, hh, ww) = self.chw(&name, x)?;
            if (hh, ww) != (h, w) {
                return Err(Self::shape_err(
                    &name,
                    format!("spatial sizes differ: {h}×{w} vs {hh}×{ww}"),
                ));
            }
            c_total += c;
        }
        Ok(self.push(
            name,
            LayerKind::ConcatChannels,
            xs.to_vec(),
            vec![c_total, h, w],
        ))
    }

    pub fn global_mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("global_mean");
        let (c, _, _) = self.chw(&name, x)?;
        Ok(self.push(name, LayerKind::GlobalMean, vec![x], vec![c]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let name = self.auto_name("reshape");
        let from = self.node(x, &name)?.shape.clone();
        if from.iter().product::<usize>() != shape.iter().product::<usize>() || shape.len() > 3 {
            return Err(Self::shape_err(
                &name,
                format!("cannot reshape {from:?} to {shape:?}"),
            ));
        }
        Ok(self.push(name, LayerKind::Reshape, vec![x], shape.to_vec()))
    }

    pub fn build(self, output: NodeId) -> Result<Graph, AutodiffError> {
        if output >= self.nodes.len() {
            return Err(Self::shape_err("output", format!("unknown node {output}")));
        }
        Ok(Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes,
            params: self.params,
            output,
            check_finite: false,
        })
    }
}

/// Activations recorded by [`Graph::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    graph_id: u64,
    generation: u64,
    batch: usize,
    activations: Vec<Tensor<T>>,
    argmax: Vec<Vec<u32>>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("tape has activations")
    }
}

/// Gradients of a scalar objective w.r.t. every graph parameter and the input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    /// Enables a finiteness check after every layer.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Initialises a parameter set for this graph.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<T> {
        let mut set = ParameterSet::new();
        for spec in &self.params {
            let count: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..count)
                        .map(|_| T::from_f64(normal.sample(rng)))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); count],
                Init::Constant(v) => vec![T::from_f64(v); count],
            };
            set.push(&spec.name, Tensor::new(spec.shape.clone(), data));
        }
        set
    }

    fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<(), AutodiffError> {
        for (i, spec) in self.params.iter().enumerate() {
            match params.tensors().get(i) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(AutodiffError::Shape {
                        layer: spec.name.clone(),
                        msg: format!("parameter shape {:?}, expected {:?}", t.shape(), spec.shape),
                    })
                }
                None => {
                    return Err(AutodiffError::Shape {
                        layer: spec.name.clone(),
                        msg: "parameter missing".into(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Evaluates the graph on a batch `[batch, ...input_shape]`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tape<T>), AutodiffError> {
        self.check_params(params)?;
        let in_shape = input.shape();
        if in_shape.len() != self.input_shape().len() + 1 || &in_shape[1..] != self.input_shape() {
            return Err(AutodiffError::Shape {
                layer: "input".into(),
                msg: format!(
                    "expected [batch, {:?}], got {in_shape:?}",
                    self.input_shape()
                ),
            });
        }
        let batch = in_shape[0];
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut argmax: Vec<Vec<u32>> = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate().take(self.output + 1) {
            let mut shape = vec![batch];
            shape.extend_from_slice(&node.shape);
            let out = match &node.kind {
                LayerKind::Input => input.clone(),
                LayerKind::Dense { weight, bias } => {
                    let x = &acts[node.inputs[0]];
                    let w = &params.tensors()[*weight];
                    let b = &params.tensors()[*bias];
                    let (o, i) = (w.shape()[0], w.shape()[1]);
                    let mut y = Vec::with_capacity(batch * o);
                    for _ in 0..batch {
                        y.extend_from_slice(b.data());
                    }
                    // Y (B×O) += X (B×I) · Wᵀ
                    T::gemm(
                        batch,
                        i,
                        o,
                        T::one(),
                        x.data(),
                        i as isize,
                        1,
                        w.data(),
                        1,
                        i as isize,
                        T::one(),
                        &mut y,
                        o as isize,
                        1,
                    );
                    Tensor::new(shape, y)
                }
                LayerKind::Conv3x3 { weight, bias } => {
                    let x = &acts[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let wt = &params.tensors()[*weight];
                    let b = &params.tensors()[*bias];
                    let o = wt.shape()[0];
                    let hw = h * w;
                    let mut cols = vec![T::zero(); 9 * c * hw];
                    let mut y = vec![T::zero(); batch * o * hw];
                    for s in 0..batch {
                        im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                        let ys = &mut y[s * o * hw..(s + 1) * o * hw];
                        for (oc, plane) in ys.chunks_mut(hw).enumerate() {
                            plane.iter_mut().for_each(|v| *v = b.data()[oc]);
                        }
                        T::gemm(
                            o,
                            9 * c,
                            hw,
                            T::one(),
                            wt.data(),
                            9 * c as isize,
                            1,
                            &cols,
                            hw as isize,
                            1,
                            T::one(),
                            ys,
                            hw as isize,
                            1,
                        );
                    }
                    Tensor::new(shape, y)
                }
                LayerKind::Conv1x1 { weight, bias } => {
                    let x = &acts[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let wt = &params.tensors()[*weight];
                    let b = &params.tensors()[*bias];
                    let o = wt.shape()[0];
                    let hw = h * w;
                    let mut y = vec![T::zero(); batch * o * hw];
                    for s in 0..batch {
                        let ys = &mut y[s * o * hw..(s + 1) * o * hw];
                        for (oc, plane) in ys.chunks_mut(hw).enumerate() {
                            plane.iter_mut().for_each(|v| *v = b.data()[oc]);
                        }
                        T::gemm(
                            o,
                            c,
                            hw,
                            T::one(),
                            wt.data(),
                            c as isize,
                            1,
                            &x.data()[s * c * hw..(s + 1) * c * hw],
                            hw as isize,
                            1,
                            T::one(),
                            ys,
                            hw as isize,
                            1,
                        );
                    }
                    Tensor::new(shape, y)
                }
                LayerKind::MaxPool2 => {
                    let x = &acts[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let (ho, wo) = (h / 2, w / 2);
                    let mut y = vec![T::zero(); batch * c * ho * wo];
                    let mut idx = vec![0u32; batch * c * ho * wo];
                    for sc in 0..batch * c {
                        let plane = &x.data()[sc * h * w..(sc + 1) * h * w];
                        for yy in 0..ho {
                            for xx in 0..wo {
                                let mut best = 2 * yy * w + 2 * xx;
                                for cand in [
                                    2 * yy * w + 2 * xx + 1,
                                    (2 * yy + 1) * w + 2 * xx,
                                    (2 * yy + 1) * w + 2 * xx + 1,
                                ] {
                                    if plane[cand] > plane[best] {
                                        best = cand;
                                    }
                                }
                                let k = sc * ho * wo + yy * wo + xx;
                                y[k] = plane[best];
                                idx[k] = best as u32;
                            }
                        }
                    }
                    argmax[id] = idx;
                    Tensor::new(shape, y)
                }
                LayerKind::Upsample2 => {
                    let x = &acts[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut y = vec![T::zero(); batch * c * ho * wo];
                    for sc in 0..batch * c {
                        let plane = &x.data()[sc * h * w..(sc + 1) * h * w];
                        let out = &mut y[sc * ho * wo..(sc + 1) * ho * wo];
                        for yy in 0..ho {
                            for xx in 0..wo {
                                out[yy * wo + xx] = plane[(yy / 2) * w + xx / 2];
                            }
                        }
                    }
                    Tensor::new(shape, y)
                }
                LayerKind::Relu => {
                    let x = &acts[node.inputs[0]];
                    Tensor::new(
                        shape,
                        x.data()
                            .iter()
                            .map(|&v| if v > T::zero() { v } else { T::zero() })
                            .collect(),
                    )
                }
                LayerKind::ConcatChannels => {
                    let mut y = Vec::with_capacity(shape.iter().product());
                    let sizes: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&i| self.nodes[i].shape.iter().product())
                        .collect();
                    for s in 0..batch {
                        for (&inp, &sz) in node.inputs.iter().zip(&sizes) {
                            y.extend_from_slice(&acts[inp].data()[s * sz..(s + 1) * sz]);
                        }
                    }
                    Tensor::new(shape, y)
                }
                LayerKind::GlobalMean => {
                    let x = &acts[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    let y = (0..batch * c)
                        .map(|sc| {
                            x.data()[sc * h * w..(sc + 1) * h * w]
                                .iter()
                                .copied()
                                .sum::<T>()
                                * inv
                        })
                        .collect();
                    Tensor::new(shape, y)
                }
                LayerKind::Reshape => acts[node.inputs[0]].clone().reshaped(&shape),
            };
            if self.check_finite && !out.is_finite() {
                return Err(AutodiffError::NonFinite {
                    layer: node.name.clone(),
                });
            }
            acts.push(out);
        }
        let output = acts[self.output].clone();
        Ok((
            output,
            Tape {
                graph_id: self.id,
                generation: params.generation(),
                batch,
                activations: acts,
                argmax,
            },
        ))
    }

    /// Reverse pass from `upstream = ∂L/∂output`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: &Tape<T>,
        upstream: &Tensor<T>,
    ) -> Result<Gradients<T>, AutodiffError> {
        if tape.graph_id != self.id || tape.generation != params.generation() {
            return Err(AutodiffError::StaleTape);
        }
        let out_act = &tape.activations[self.output];
        if upstream.shape() != out_act.shape() {
            return Err(AutodiffError::Shape {
                layer: self.nodes[self.output].name.clone(),
                msg: format!(
                    "upstream gradient {:?} does not match output {:?}",
                    upstream.shape(),
                    out_act.shape()
                ),
            });
        }
        let batch = tape.batch;
        let mut pgrads: Vec<Tensor<T>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.output + 1];
        grads[self.output] = Some(upstream.clone());

        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += *b),
            None => *slot = Some(g),
        };

        for id in (1..=self.output).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let in_shape = |k: usize| -> Vec<usize> {
                let mut s = vec![batch];
                s.extend_from_slice(&self.nodes[node.inputs[k]].shape);
                s
            };
            match &node.kind {
                LayerKind::Input => {}
                LayerKind::Dense { weight, bias } => {
                    let x = &tape.activations[node.inputs[0]];
                    let w = &params.tensors()[*weight];
                    let (o, i) = (w.shape()[0], w.shape()[1]);
                    // dW (O×I) += dYᵀ (O×B) · X (B×I)
                    T::gemm(
                        o,
                        batch,
                        i,
                        T::one(),
                        gy.data(),
                        1,
                        o as isize,
                        x.data(),
                        i as isize,
                        1,
                        T::one(),
                        pgrads[*weight].data_mut(),
                        i as isize,
                        1,
                    );
                    let db = pgrads[*bias].data_mut();
                    for s in 0..batch {
                        db.iter_mut()
                            .zip(&gy.data()[s * o..(s + 1) * o])
                            .for_each(|(a, b)| *a += *b);
                    }
                    // dX (B×I) = dY (B×O) · W (O×I)
                    let mut dx = vec![T::zero(); batch * i];
                    T::gemm(
                        batch,
                        o,
                        i,
                        T::one(),
                        gy.data(),
                        o as isize,
                        1,
                        w.data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        i as isize,
                        1,
                    );
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::Conv3x3 { weight, bias } => {
                    let x = &tape.activations[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let wt = &params.tensors()[*weight];
                    let o = wt.shape()[0];
                    let hw = h * w;
                    let mut cols = vec![T::zero(); 9 * c * hw];
                    let mut dcols = vec![T::zero(); 9 * c * hw];
                    let mut dx = vec![T::zero(); batch * c * hw];
                    for s in 0..batch {
                        let gys = &gy.data()[s * o * hw..(s + 1) * o * hw];
                        im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
                        // dW (O×9C) += dY (O×HW) · colsᵀ (HW×9C)
                        T::gemm(
                            o,
                            hw,
                            9 * c,
                            T::one(),
                            gys,
                            hw as isize,
                            1,
                            &cols,
                            1,
                            hw as isize,
                            T::one(),
                            pgrads[*weight].data_mut(),
                            9 * c as isize,
                            1,
                        );
                        let db = pgrads[*bias].data_mut();
                        for (oc, plane) in gys.chunks(hw).enumerate() {
                            db[oc] += plane.iter().copied().sum::<T>();
                        }
                        // dcols (9C×HW) = Wᵀ (9C×O) · dY (O×HW)
                        T::gemm(
                            9 * c,
                            o,
                            hw,
                            T::one(),
                            wt.data(),
                            1,
                            9 * c as isize,
                            gys,
                            hw as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            hw as isize,
                            1,
                        );
                        col2im(&dcols, c, h, w, &mut dx[s * c * hw..(s + 1) * c * hw]);
                    }
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::Conv1x1 { weight, bias } => {
                    let x = &tape.activations[node.inputs[0]];
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let wt = &params.tensors()[*weight];
                    let o = wt.shape()[0];
                    let hw = h * w;
                    let mut dx = vec![T::zero(); batch * c * hw];
                    for s in 0..batch {
                        let gys = &gy.data()[s * o * hw..(s + 1) * o * hw];
                        let xs = &x.data()[s * c * hw..(s + 1) * c * hw];
                        T::gemm(
                            o,
                            hw,
                            c,
                            T::one(),
                            gys,
                            hw as isize,
                            1,
                            xs,
                            1,
                            hw as isize,
                            T::one(),
                            pgrads[*weight].data_mut(),
                            c as isize,
                            1,
                        );
                        let db = pgrads[*bias].data_mut();
                        for (oc, plane) in gys.chunks(hw).enumerate() {
                            db[oc] += plane.iter().copied().sum::<T>();
                        }
                        T::gemm(
                            c,
                            o,
                            hw,
                            T::one(),
                            wt.data(),
                            1,
                            c as isize,
                            gys,
                            hw as isize,
                            1,
                            T::zero(),
                            &mut dx[s * c * hw..(s + 1) * c * hw],
                            hw as isize,
                            1,
                        );
                    }
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::MaxPool2 => {
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let (ho, wo) = (h / 2, w / 2);
                    let idx = &tape.argmax[id];
                    let mut dx = vec![T::zero(); batch * c * h * w];
                    for sc in 0..batch * c {
                        for k in 0..ho * wo {
                            let flat = sc * ho * wo + k;
                            dx[sc * h * w + idx[flat] as usize] += gy.data()[flat];
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::Upsample2 => {
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); batch * c * h * w];
                    for sc in 0..batch * c {
                        let g = &gy.data()[sc * ho * wo..(sc + 1) * ho * wo];
                        let d = &mut dx[sc * h * w..(sc + 1) * h * w];
                        for yy in 0..ho {
                            for xx in 0..wo {
                                d[(yy / 2) * w + xx / 2] += g[yy * wo + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::Relu => {
                    let x = &tape.activations[node.inputs[0]];
                    let dx = x
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::ConcatChannels => {
                    let sizes: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&i| self.nodes[i].shape.iter().product())
                        .collect();
                    let total: usize = sizes.iter().sum();
                    let mut offset = 0;
                    for (k, (&inp, &sz)) in node.inputs.iter().zip(&sizes).enumerate() {
                        let mut dx = Vec::with_capacity(batch * sz);
                        for s in 0..batch {
                            dx.extend_from_slice(
                                &gy.data()[s * total + offset..s * total + offset + sz],
                            );
                        }
                        offset += sz;
                        accumulate(&mut grads[inp], Tensor::new(in_shape(k), dx));
                    }
                }
                LayerKind::GlobalMean => {
                    let [c, h, w] = self.nodes[node.inputs[0]].shape[..] else {
                        unreachable!()
                    };
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    let mut dx = vec![T::zero(); batch * c * h * w];
                    for sc in 0..batch * c {
                        let g = gy.data()[sc] * inv;
                        dx[sc * h * w..(sc + 1) * h * w]
                            .iter_mut()
                            .for_each(|v| *v = g);
                    }
                    accumulate(&mut grads[node.inputs[0]], Tensor::new(in_shape(0), dx));
                }
                LayerKind::Reshape => {
                    accumulate(&mut grads[node.inputs[0]], gy.reshaped(&in_shape(0)));
                }
            }
        }
        let input = grads[0].take().unwrap_or_else(|| {
            let mut s = vec![batch];
            s.extend_from_slice(self.input_shape());
            Tensor::zeros(&s)
        });
        Ok(Gradients {
            params: pgrads,
            input,
        })
    }
}
