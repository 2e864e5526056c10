//! Convolutional encoder-decoder with exact first derivatives.
//!
//! The network is a fixed graph of convolution, leaky-ReLU, bilinear
//! upsampling, concatenation and output-activation nodes. A forward pass
//! records a [`Tape`] holding every node value and the unfolded convolution
//! inputs; reverse-mode products (`vᵀ J`) and forward-mode products (`J u`)
//! are then evaluated against the tape, optionally for a batch of
//! cotangents/tangents sharing the same forward pass.

mod kernels;

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::gemm;
use crate::operators::Image;
use crate::rng::{stream, stream_rng};
use kernels::{col2im_add, conv_out_size, im2col, upsample2, upsample2_adjoint_add};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub scales: usize,
    pub channels: Vec<usize>,
    /// Whether the decoder at scale `s` concatenates the encoder features of
    /// that scale. The coarsest scale has no decoder stage, so its entry is
    /// ignored.
    pub skip: Vec<bool>,
    pub kernel_size: usize,
    pub activation: Activation,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    pub output_activation: OutputActivation,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
}

fn default_slope() -> f64 {
    0.01
}

fn one() -> usize {
    1
}

impl ArchConfig {
    /// 3 scales x `channels` channels, 3x3 convolutions, leaky-ReLU, skips on
    /// the two finer scales, sigmoid output.
    pub fn reference(channels: usize) -> Self {
        ArchConfig {
            scales: 3,
            channels: vec![channels; 3],
            skip: vec![true, true, false],
            kernel_size: 3,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.01,
            output_activation: OutputActivation::Sigmoid,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.scales == 0 {
            return bad("at least one scale is required");
        }
        if self.channels.len() != self.scales || self.skip.len() != self.scales {
            return bad("channels and skip need one entry per scale");
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky slope must be finite");
        }
        Ok(())
    }

    fn slope(&self) -> f64 {
        match self.activation {
            Activation::LeakyRelu => self.leaky_slope,
            Activation::Relu => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, contiguous placement of named parameter tensors in a flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total_len();
        self.entries.push(LayoutEntry {
            name,
            shape,
            offset,
        });
        offset
    }

    /// Checks that offsets are contiguous and non-overlapping.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return Err(Error::Config(format!(
                    "layout entry {} starts at {} but {} was expected",
                    e.name, e.offset, next
                )));
            }
            next += e.len();
        }
        Ok(())
    }

    /// One line per entry: `name offset dim0xdim1x...`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            s.push_str(&format!("{} {} {}\n", e.name, e.offset, dims.join("x")));
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut layout = ParamLayout::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = || Error::Config(format!("bad layout line: {line}"));
            if parts.len() != 3 {
                return Err(err());
            }
            let offset: usize = parts[1].parse().map_err(|_| err())?;
            let shape = parts[2]
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| err()))
                .collect::<Result<Vec<_>>>()?;
            layout.entries.push(LayoutEntry {
                name: parts[0].to_string(),
                shape,
                offset,
            });
        }
        layout.validate()?;
        Ok(layout)
    }
}

/// Flat network parameters with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(data: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        check_len("parameter vector", layout.total_len(), data.len())?;
        Ok(ParamVector { data, layout })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Splits into named tensors.
    pub fn unflatten(&self) -> Vec<(&str, &[usize], &[f64])> {
        self.layout
            .entries
            .iter()
            .map(|e| {
                (
                    e.name.as_str(),
                    e.shape.as_slice(),
                    &self.data[e.offset..e.offset + e.len()],
                )
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(layout: Arc<ParamLayout>, tensors: &[(&str, &[usize], &[f64])]) -> Result<Self> {
        check_len("tensor count", layout.entries.len(), tensors.len())?;
        let mut data = Vec::with_capacity(layout.total_len());
        for (e, (name, shape, values)) in layout.entries.iter().zip(tensors) {
            if e.name != *name || e.shape.as_slice() != *shape {
                return Err(Error::Config(format!("tensor {name} does not match layout entry {}", e.name)));
            }
            check_len("tensor values", e.len(), values.len())?;
            data.extend_from_slice(values);
        }
        ParamVector::new(data, layout)
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvLayer {
    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Conv { layer: usize, src: usize },
    Act { src: usize },
    Upsample { src: usize },
    Concat { a: usize, b: usize },
    Output { src: usize },
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    c: usize,
    h: usize,
    w: usize,
}

impl Node {
    fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// A U-Net instantiated for a fixed input size.
#[derive(Clone, Debug)]
pub struct Unet {
    cfg: ArchConfig,
    height: usize,
    width: usize,
    layers: Vec<ConvLayer>,
    nodes: Vec<Node>,
    layout: Arc<ParamLayout>,
}

struct Builder {
    k: usize,
    layers: Vec<ConvLayer>,
    nodes: Vec<Node>,
    layout: ParamLayout,
}

impl Builder {
    fn node(&mut self, op: Op, c: usize, h: usize, w: usize) -> usize {
        self.nodes.push(Node { op, c, h, w });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: &str, src: usize, cout: usize, k: usize, stride: usize) -> usize {
        let s = self.nodes[src];
        let w_off = self.layout.push(format!("{name}.weight"), vec![cout, s.c, k, k]);
        let b_off = self.layout.push(format!("{name}.bias"), vec![cout]);
        self.layers.push(ConvLayer {
            cin: s.c,
            cout,
            k,
            stride,
            w_off,
            b_off,
        });
        let layer = self.layers.len() - 1;
        let (h, w) = (conv_out_size(s.h, k, stride), conv_out_size(s.w, k, stride));
        self.node(Op::Conv { layer, src }, cout, h, w)
    }

    fn conv_act(&mut self, name: &str, src: usize, cout: usize, stride: usize) -> usize {
        let k = self.k;
        let c = self.conv(name, src, cout, k, stride);
        let n = self.nodes[c];
        self.node(Op::Act { src: c }, n.c, n.h, n.w)
    }
}

impl Unet {
    pub fn new(cfg: &ArchConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        let factor = 1usize << (cfg.scales - 1);
        if height == 0 || width == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::Config(format!(
                "image size {height}x{width} must be a positive multiple of {factor} for {} scales",
                cfg.scales
            )));
        }
        let mut b = Builder {
            k: cfg.kernel_size,
            layers: Vec::new(),
            nodes: Vec::new(),
            layout: ParamLayout::default(),
        };
        let input = b.node(Op::Input, cfg.in_channels, height, width);

        let mut enc = Vec::with_capacity(cfg.scales);
        let mut x = b.conv_act("enc0.conv0", input, cfg.channels[0], 1);
        x = b.conv_act("enc0.conv1", x, cfg.channels[0], 1);
        enc.push(x);
        for s in 1..cfg.scales {
            x = b.conv_act(&format!("enc{s}.down"), x, cfg.channels[s], 2);
            x = b.conv_act(&format!("enc{s}.conv"), x, cfg.channels[s], 1);
            enc.push(x);
        }
        for s in (0..cfg.scales - 1).rev() {
            let n = b.nodes[x];
            let up = b.node(Op::Upsample { src: x }, n.c, 2 * n.h, 2 * n.w);
            let merged = if cfg.skip[s] {
                let e = b.nodes[enc[s]];
                b.node(Op::Concat { a: up, b: enc[s] }, n.c + e.c, e.h, e.w)
            } else {
                up
            };
            x = b.conv_act(&format!("dec{s}.conv0"), merged, cfg.channels[s], 1);
            x = b.conv_act(&format!("dec{s}.conv1"), x, cfg.channels[s], 1);
        }
        let head = b.conv("head", x, cfg.out_channels, 1, 1);
        let n = b.nodes[head];
        b.node(Op::Output { src: head }, n.c, n.h, n.w);

        Ok(Unet {
            cfg: cfg.clone(),
            height,
            width,
            layers: b.layers,
            nodes: b.nodes,
            layout: Arc::new(b.layout),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_len()
    }

    pub fn output_len(&self) -> usize {
        self.nodes.last().map_or(0, Node::len)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.cfg.in_channels, self.height, self.width)
    }

    /// Fan-in scaled Gaussian weights (He initialisation), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = stream_rng(seed, stream::INIT);
        let mut data = vec![0.0; self.num_params()];
        for layer in &self.layers {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = layer.cout * layer.fan_in();
            for v in &mut data[layer.w_off..layer.w_off + n] {
                *v = normal.sample(&mut rng);
            }
        }
        ParamVector {
            data,
            layout: self.layout.clone(),
        }
    }

    /// Evaluates the network and records everything needed for derivatives.
    pub fn tape(&self, theta: &[f64], x0: &Image) -> Result<Tape> {
        check_len("parameter vector", self.num_params(), theta.len())?;
        let (c, h, w) = self.input_shape();
        check_len("network input", c * h * w, x0.len())?;
        if x0.height != h {
            return Err(Error::DimensionMismatch {
                context: "network input height",
                expected: h,
                actual: x0.height,
            });
        }
        let slope = self.cfg.slope();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for node in &self.nodes {
            let v = match node.op {
                Op::Input => x0.data.clone(),
                Op::Conv { layer, src } => {
                    let l = &self.layers[layer];
                    let s = self.nodes[src];
                    let p = node.h * node.w;
                    let mut col = vec![0.0; l.fan_in() * p];
                    im2col(&values[src], s.c, s.h, s.w, l.k, l.stride, &mut col);
                    let mut out = vec![0.0; l.cout * p];
                    for (o, chunk) in out.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = theta[l.b_off + o]);
                    }
                    let fan = l.fan_in();
                    gemm(
                        l.cout,
                        fan,
                        p,
                        1.0,
                        &theta[l.w_off..l.w_off + l.cout * fan],
                        fan as isize,
                        1,
                        &col,
                        p as isize,
                        1,
                        1.0,
                        &mut out,
                        p as isize,
                    );
                    cols[layer] = col;
                    out
                }
                Op::Act { src } => values[src]
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect(),
                Op::Upsample { src } => {
                    let s = self.nodes[src];
                    let mut out = vec![0.0; node.len()];
                    upsample2(&values[src], s.c, s.h, s.w, &mut out);
                    out
                }
                Op::Concat { a, b } => {
                    let mut out = values[a].clone();
                    out.extend_from_slice(&values[b]);
                    out
                }
                Op::Output { src } => match self.cfg.output_activation {
                    OutputActivation::Sigmoid => {
                        values[src].iter().map(|&v| sigmoid(v)).collect()
                    }
                    OutputActivation::Identity => values[src].clone(),
                },
            };
            values.push(v);
        }
        let out = values.last().expect("graph has an output");
        if out.iter().any(|v| !v.is_finite()) {
            let norm = crate::linalg::norm(theta);
            return Err(Error::Numerical(format!(
                "network output is non-finite (parameter norm {norm:.3e})"
            )));
        }
        Ok(Tape {
            theta: theta.to_vec(),
            values,
            cols,
        })
    }

    pub fn forward(&self, theta: &[f64], x0: &Image) -> Result<Image> {
        let tape = self.tape(theta, x0)?;
        Ok(self.output_image(&tape))
    }

    pub fn output_image(&self, tape: &Tape) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: tape.output().to_vec(),
        }
    }

    /// `vᵀ J_f` for a single cotangent image.
    pub fn vjp(&self, tape: &Tape, v: &[f64]) -> Result<Vec<f64>> {
        self.vjp_batch(tape, v, 1)
    }

    /// Reverse-mode products for `batch` cotangents stored back to back in
    /// `vs`. Returns `batch` parameter gradients back to back.
    pub fn vjp_batch(&self, tape: &Tape, vs: &[f64], batch: usize) -> Result<Vec<f64>> {
        check_len("cotangent batch", batch * self.output_len(), vs.len())?;
        let n_params = self.num_params();
        let mut grad = vec![0.0; batch * n_params];
        if batch == 0 {
            return Ok(grad);
        }
        let slope = self.cfg.slope();
        let theta = &tape.theta[..];
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[self.nodes.len() - 1] = Some(vs.to_vec());

        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = g[idx].take() else { continue };
            let node = self.nodes[idx];
            let len = node.len();
            match node.op {
                Op::Input => {}
                Op::Output { src } => {
                    let mut gs = gy;
                    if let OutputActivation::Sigmoid = self.cfg.output_activation {
                        let y = &tape.values[idx];
                        for chunk in gs.chunks_mut(len) {
                            for (gv, &yv) in chunk.iter_mut().zip(y) {
                                *gv *= yv * (1.0 - yv);
                            }
                        }
                    }
                    accumulate(&mut g[src], gs);
                }
                Op::Act { src } => {
                    let mut gs = gy;
                    let x = &tape.values[src];
                    for chunk in gs.chunks_mut(len) {
                        for (gv, &xv) in chunk.iter_mut().zip(x) {
                            if xv <= 0.0 {
                                *gv *= slope;
                            }
                        }
                    }
                    accumulate(&mut g[src], gs);
                }
                Op::Upsample { src } => {
                    let s = self.nodes[src];
                    let mut gs = vec![0.0; batch * s.len()];
                    for (gb, ob) in gy.chunks(len).zip(gs.chunks_mut(s.len())) {
                        upsample2_adjoint_add(gb, s.c, s.h, s.w, ob);
                    }
                    accumulate(&mut g[src], gs);
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[a].len();
                    let lb = self.nodes[b].len();
                    let mut ga = Vec::with_capacity(batch * la);
                    let mut gb = Vec::with_capacity(batch * lb);
                    for chunk in gy.chunks(len) {
                        ga.extend_from_slice(&chunk[..la]);
                        gb.extend_from_slice(&chunk[la..]);
                    }
                    accumulate(&mut g[a], ga);
                    accumulate(&mut g[b], gb);
                }
                Op::Conv { layer, src } => {
                    let l = &self.layers[layer];
                    let p = node.h * node.w;
                    let fan = l.fan_in();
                    let col = &tape.cols[layer];
                    // All weight gradients at once: (batch·cout x p)(p x fan).
                    let mut gw = vec![0.0; batch * l.cout * fan];
                    gemm(
                        batch * l.cout,
                        p,
                        fan,
                        1.0,
                        &gy,
                        p as isize,
                        1,
                        col,
                        1,
                        p as isize,
                        0.0,
                        &mut gw,
                        fan as isize,
                    );
                    for bi in 0..batch {
                        let dst = &mut grad[bi * n_params..(bi + 1) * n_params];
                        let src_w = &gw[bi * l.cout * fan..(bi + 1) * l.cout * fan];
                        for (d, s) in dst[l.w_off..l.w_off + l.cout * fan].iter_mut().zip(src_w) {
                            *d += s;
                        }
                        let gyb = &gy[bi * len..(bi + 1) * len];
                        for o in 0..l.cout {
                            dst[l.b_off + o] += gyb[o * p..(o + 1) * p].iter().sum::<f64>();
                        }
                    }
                    if matches!(self.nodes[src].op, Op::Input) {
                        continue;
                    }
                    let s = self.nodes[src];
                    let w = &theta[l.w_off..l.w_off + l.cout * fan];
                    let mut gs = vec![0.0; batch * s.len()];
                    let mut gcol = vec![0.0; fan * p];
                    for bi in 0..batch {
                        gemm(
                            fan,
                            l.cout,
                            p,
                            1.0,
                            w,
                            1,
                            fan as isize,
                            &gy[bi * len..(bi + 1) * len],
                            p as isize,
                            1,
                            0.0,
                            &mut gcol,
                            p as isize,
                        );
                        col2im_add(
                            &gcol,
                            s.c,
                            s.h,
                            s.w,
                            l.k,
                            l.stride,
                            &mut gs[bi * s.len()..(bi + 1) * s.len()],
                        );
                    }
                    accumulate(&mut g[src], gs);
                }
            }
        }
        Ok(grad)
    }

    /// `J_f u` for a single parameter direction.
    pub fn jvp(&self, tape: &Tape, u: &[f64]) -> Result<Vec<f64>> {
        self.jvp_batch(tape, u, 1)
    }

    /// Forward-mode products for `batch` parameter directions stored back to
    /// back in `us`. Returns `batch` output tangents back to back.
    pub fn jvp_batch(&self, tape: &Tape, us: &[f64], batch: usize) -> Result<Vec<f64>> {
        let n_params = self.num_params();
        check_len("tangent batch", batch * n_params, us.len())?;
        let slope = self.cfg.slope();
        let theta = &tape.theta[..];
        // `None` marks an identically zero tangent (the network input).
        let mut t: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let len = node.len();
            let v = match node.op {
                Op::Input => None,
                Op::Conv { layer, src } => {
                    let l = &self.layers[layer];
                    let s = self.nodes[src];
                    let p = node.h * node.w;
                    let fan = l.fan_in();
                    // Stack per-direction weight tangents: (batch·cout x fan).
                    let mut dw = Vec::with_capacity(batch * l.cout * fan);
                    for bi in 0..batch {
                        let ub = &us[bi * n_params..(bi + 1) * n_params];
                        dw.extend_from_slice(&ub[l.w_off..l.w_off + l.cout * fan]);
                    }
                    let mut out = vec![0.0; batch * len];
                    for bi in 0..batch {
                        let ub = &us[bi * n_params..(bi + 1) * n_params];
                        for o in 0..l.cout {
                            let db = ub[l.b_off + o];
                            out[bi * len + o * p..bi * len + (o + 1) * p]
                                .iter_mut()
                                .for_each(|v| *v = db);
                        }
                    }
                    gemm(
                        batch * l.cout,
                        fan,
                        p,
                        1.0,
                        &dw,
                        fan as isize,
                        1,
                        &tape.cols[layer],
                        p as isize,
                        1,
                        1.0,
                        &mut out,
                        p as isize,
                    );
                    if let Some(ts) = &t[src] {
                        let w = &theta[l.w_off..l.w_off + l.cout * fan];
                        let mut col = vec![0.0; fan * p];
                        for bi in 0..batch {
                            im2col(&ts[bi * s.len()..(bi + 1) * s.len()], s.c, s.h, s.w, l.k, l.stride, &mut col);
                            gemm(
                                l.cout,
                                fan,
                                p,
                                1.0,
                                w,
                                fan as isize,
                                1,
                                &col,
                                p as isize,
                                1,
                                1.0,
                                &mut out[bi * len..(bi + 1) * len],
                                p as isize,
                            );
                        }
                    }
                    Some(out)
                }
                Op::Act { src } => t[src].as_ref().map(|ts| {
                    let x = &tape.values[src];
                    let mut out = ts.clone();
                    for chunk in out.chunks_mut(len) {
                        for (o, &xv) in chunk.iter_mut().zip(x) {
                            if xv <= 0.0 {
                                *o *= slope;
                            }
                        }
                    }
                    out
                }),
                Op::Upsample { src } => t[src].as_ref().map(|ts| {
                    let s = self.nodes[src];
                    let mut out = vec![0.0; batch * len];
                    for (tb, ob) in ts.chunks(s.len()).zip(out.chunks_mut(len)) {
                        upsample2(tb, s.c, s.h, s.w, ob);
                    }
                    out
                }),
                Op::Concat { a, b } => {
                    if t[a].is_none() && t[b].is_none() {
                        None
                    } else {
                        let (la, lb) = (self.nodes[a].len(), self.nodes[b].len());
                        let mut out = Vec::with_capacity(batch * len);
                        for bi in 0..batch {
                            match &t[a] {
                                Some(ta) => out.extend_from_slice(&ta[bi * la..(bi + 1) * la]),
                                None => out.extend(std::iter::repeat_n(0.0, la)),
                            }
                            match &t[b] {
                                Some(tb) => out.extend_from_slice(&tb[bi * lb..(bi + 1) * lb]),
                                None => out.extend(std::iter::repeat_n(0.0, lb)),
                            }
                        }
                        Some(out)
                    }
                }
                Op::Output { src } => t[src].as_ref().map(|ts| {
                    let mut out = ts.clone();
                    if let OutputActivation::Sigmoid = self.cfg.output_activation {
                        let y = &tape.values[idx];
                        for chunk in out.chunks_mut(len) {
                            for (o, &yv) in chunk.iter_mut().zip(y) {
                                *o *= yv * (1.0 - yv);
                            }
                        }
                    }
                    out
                }),
            };
            t.push(v);
        }
        Ok(t
            .pop()
            .flatten()
            .unwrap_or_else(|| vec![0.0; batch * self.output_len()]))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Recorded forward pass at fixed parameters.
pub struct Tape {
    theta: Vec<f64>,
    values: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("graph has an output")
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}
