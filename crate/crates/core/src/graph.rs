//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter it as
//! leaves copied out of a [`ParamStore`]; [`Graph::backward`] walks the tape
//! in reverse and accumulates into the store's gradient buffers.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry, PoolKind};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution hyperparameters. Two spatial axes for 2D, three for 3D.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Follow the convolution with per-sample standardisation and a learnable
    /// per-channel scale and shift.
    pub has_batchnorm_affine: bool,
}

impl ConvSpec {
    /// Cubic/square kernel of extent `k` on `axes` spatial axes, "same"-style padding `k / 2`.
    pub fn new(axes: usize, in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            kernel: vec![k; axes],
            stride: vec![1; axes],
            padding: vec![k / 2; axes],
            dilation: vec![1; axes],
            in_channels,
            out_channels,
            groups: 1,
            has_batchnorm_affine: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = vec![s; self.kernel.len()];
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = vec![p; self.kernel.len()];
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = vec![d; self.kernel.len()];
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn affine(mut self, on: bool) -> Self {
        self.has_batchnorm_affine = on;
        self
    }

    pub fn spatial_axes(&self) -> usize {
        self.kernel.len()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels / self.groups];
        s.extend(&self.kernel);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let axes = self.kernel.len();
        if !(axes == 2 || axes == 3)
            || self.stride.len() != axes
            || self.padding.len() != axes
            || self.dilation.len() != axes
        {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs 2 or 3 consistent spatial axes: {self:?}"
            )));
        }
        if self.kernel.iter().chain(&self.stride).chain(&self.dilation).any(|&v| v == 0)
            || self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidArgument(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                let padded = n + 2 * self.padding[a];
                if padded < span {
                    shape_err(format!(
                        "spatial extent {n} with padding {} is smaller than kernel span {span}",
                        self.padding[a]
                    ))
                } else {
                    Ok((padded - span) / self.stride[a] + 1)
                }
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Vec<Var>),
    Scale(Var, f64),
    Mul(Var, Var),
    Sum(Var),
    Mix {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
    Conv {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Interpolate {
        x: Var,
        planes: usize,
        input: [usize; 3],
        output: [usize; 3],
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat(Vec<Var>),
    ChannelResize(Var),
    Pool {
        x: Var,
        planes: usize,
        dims: [usize; 3],
        window: [usize; 3],
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    FeatureVolume {
        left: Var,
        right: Var,
        shifts: usize,
    },
    DisparityExpectation(Var),
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Reshape(Var),

}

/// Added to the variance before normalising.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// `(n, c, [d, h, w])` view of a 4D or 5D shape.
fn split_spatial(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, h, w] => Ok((n, c, [1, h, w])),
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => shape_err(format!("expected a 4D or 5D tensor, got shape {shape:?}")),
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    trainable: Option<Vec<ParamGroup>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which only parameters of `groups` receive gradients; the
    /// others enter as constants and their gradient kernels are skipped.
    pub fn with_trainable(groups: &[ParamGroup]) -> Self {
        Self {
            trainable: Some(groups.to_vec()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            requires_grad: false,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&id) {
            return *v;
        }
        let t = store.tensor(id);
        let trainable = self
            .trainable
            .as_ref()
            .is_none_or(|groups| groups.contains(&store.get(id).group));
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            requires_grad: t.requires_grad() && trainable,
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.leaves.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("add of zero terms".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        for x in &xs[1..] {
            self.same_shape(first, *x, "add")?;
        }
        let mut value = self.value(first).to_vec();
        for x in &xs[1..] {
            for (a, b) in value.iter_mut().zip(self.value(*x)) {
                *a += *b;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, value, Op::Add(xs.to_vec()), xs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Scale(x, factor), &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x), &[x]))
    }

    /// `Σ_k weights[index_k] · term_k` for same-shaped terms.
    pub fn mix(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("mix of zero terms".into()))?;
        let nw = self.value(weights).len();
        for &(r, t) in terms {
            if r >= nw {
                return Err(Error::InvalidArgument(format!(
                    "mix index {r} out of range for {nw} weights"
                )));
            }
            self.same_shape(first, t, "mix")?;
        }
        let mut value = vec![0.0; self.value(first).len()];
        for &(r, t) in terms {
            let w = self.value(weights)[r];
            for (a, b) in value.iter_mut().zip(self.value(t)) {
                *a += w * b;
            }
        }
        let shape = self.shape(first).to_vec();
        let mut parents = vec![weights];
        parents.extend(terms.iter().map(|t| t.1));
        Ok(self.push(
            shape,
            value,
            Op::Mix {
                weights,
                terms: terms.to_vec(),
            },
            &parents,
        ))
    }

    /// Convolution without bias. `x` is `[N, C, H, W]` for 2D specs and
    /// `[N, C, D, H, W]` for 3D specs; the affine flag of `spec` is ignored here.
    pub fn conv(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let axes = spec.spatial_axes();
        if xs.len() != axes + 2 {
            return shape_err(format!(
                "conv{axes}d expects a {}D input, got {xs:?}",
                axes + 2
            ));
        }
        if self.shape(w) != spec.weight_shape().as_slice() {
            return shape_err(format!(
                "weights {:?} do not match spec weight shape {:?}",
                self.shape(w),
                spec.weight_shape()
            ));
        }
        if xs[1] != spec.in_channels {
            return shape_err(format!(
                "input {xs:?} has {} channels, spec expects {}",
                xs[1], spec.in_channels
            ));
        }
        let out_sp = spec.output_extent(&xs[2..])?;
        let pad3 = |v: &[usize], fill: usize| -> [usize; 3] {
            if v.len() == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let geo = ConvGeometry {
            n: xs[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: spec.groups,
            input: pad3(&xs[2..], 1),
            kernel: pad3(&spec.kernel, 1),
            stride: pad3(&spec.stride, 1),
            padding: pad3(&spec.padding, 0),
            dilation: pad3(&spec.dilation, 1),
            output: pad3(&out_sp, 1),
        };
        let value = kernels::conv_forward(&geo, self.value(x), self.value(w));
        let mut shape = vec![xs[0], spec.out_channels];
        shape.extend(out_sp);
        Ok(self.push(shape, value, Op::Conv { x, w, geo }, &[x, w]))
    }

    /// Per-channel `x · scale[c] + shift[c]` along axis 1.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.get(1).ok_or_else(|| Error::Shape("affine needs a channel axis".into()))?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err(format!(
                "affine on {xs:?} needs [{c}] scale/shift, got {:?}/{:?}",
                self.shape(scale),
                self.shape(shift)
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let (sv, tv) = (self.value(scale), self.value(shift));
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / inner) % c;
                v * sv[ch] + tv[ch]
            })
            .collect();
        Ok(self.push(xs, value, Op::Affine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Per-sample standardisation over channels and spatial axes with the
    /// statistics of the current input (no running averages). Per-channel
    /// batch statistics degenerate on the 1x2 maps of the coarsest level.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, _, _) = split_spatial(&xs)?;
        let xv = self.value(x);
        let group = xv.len() / n;
        let mut inv_std = Vec::with_capacity(n);
        let mut value = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(group) {
            let mean = chunk.iter().sum::<f64>() / group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            value.extend(chunk.iter().map(|v| (v - mean) * is));
        }
        Ok(self.push(xs, value, Op::Normalize { x, inv_std }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::LeakyRelu(x, slope), &[x])
    }

    /// Endpoint-aligned bilinear (4D) or trilinear (5D) resampling to `target`
    /// spatial extents. Returns `x` itself when the extents already match.
    pub fn interpolate(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, input) = split_spatial(&xs)?;
        if target.len() != xs.len() - 2 {
            return shape_err(format!(
                "interpolate target {target:?} does not match input rank {xs:?}"
            ));
        }
        if target.iter().any(|&t| t == 0) {
            return Err(Error::InvalidArgument(format!(
                "interpolate target {target:?} has a zero extent"
            )));
        }
        if target == &xs[2..] {
            return Ok(x);
        }
        let output = if target.len() == 2 {
            [1, target[0], target[1]]
        } else {
            [target[0], target[1], target[2]]
        };
        let value = kernels::interpolate_forward(self.value(x), n * c, input, output);
        let mut shape = vec![n, c];
        shape.extend(target);
        Ok(self.push(
            shape,
            value,
            Op::Interpolate {
                x,
                planes: n * c,
                input,
                output,
            },
            &[x],
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return shape_err(format!("softmax axis {axis} out of range for {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    value[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    value[at(k)] /= z;
                }
            }
        }
        Ok(self.push(
            xs,
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return shape_err(format!("concat needs a channel axis, got {s0:?}"));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return shape_err(format!("concat of {s0:?} with {s:?}"));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut value = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                value.extend_from_slice(&self.value(x)[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        Ok(self.push(shape, value, Op::Concat(xs.to_vec()), xs))
    }

    /// Parameter-free channel change: zero-pads or truncates axis 1.
    pub fn resize_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || channels == 0 {
            return shape_err(format!("cannot resize channels of {xs:?} to {channels}"));
        }
        if xs[1] == channels {
            return Ok(x);
        }
        let inner: usize = xs[2..].iter().product();
        let keep = xs[1].min(channels);
        let mut value = vec![0.0; xs[0] * channels * inner];
        let src = self.value(x);
        for b in 0..xs[0] {
            value[b * channels * inner..][..keep * inner]
                .copy_from_slice(&src[b * xs[1] * inner..][..keep * inner]);
        }
        let mut shape = xs;
        shape[1] = channels;
        Ok(self.push(shape, value, Op::ChannelResize(x), &[x]))
    }

    /// Stride-1 pooling over a `k`-wide window on each spatial axis.
    pub fn pool(&mut self, x: Var, k: usize, kind: PoolKind) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, dims) = split_spatial(&xs)?;
        let window = if xs.len() == 4 { [1, k, k] } else { [k, k, k] };
        let (value, argmax) = kernels::pool_forward(self.value(x), n * c, dims, window, kind);
        Ok(self.push(
            xs,
            value,
            Op::Pool {
                x,
                planes: n * c,
                dims,
                window,
                kind,
                argmax,
            },
            &[x],
        ))
    }

    /// `V[n, c, d, h, w] = L[n, c, h, w]` and `V[n, C + c, d, h, w] = R[n, c, h, w - d]`
    /// (zero when `w - d < 0`), for `d < shifts`.
    pub fn feature_volume(&mut self, left: Var, right: Var, shifts: usize) -> Result<Var> {
        self.same_shape(left, right, "feature volume left/right")?;
        let s = self.shape(left).to_vec();
        let [n, c, h, w] = s[..] else {
            return shape_err(format!("feature volume needs 4D features, got {s:?}"));
        };
        if shifts == 0 || shifts > w {
            return Err(Error::InvalidArgument(format!(
                "disparity shift count {shifts} must lie in 1..={w}"
            )));
        }
        let (lv, rv) = (self.value(left), self.value(right));
        let mut value = vec![0.0; n * 2 * c * shifts * h * w];
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let lsrc = &lv[(b * c + ch) * plane..][..plane];
                let rsrc = &rv[(b * c + ch) * plane..][..plane];
                for d in 0..shifts {
                    let lo = ((b * 2 * c + ch) * shifts + d) * plane;
                    value[lo..lo + plane].copy_from_slice(lsrc);
                    let ro = ((b * 2 * c + c + ch) * shifts + d) * plane;
                    for y in 0..h {
                        for x in d..w {
                            value[ro + y * w + x] = rsrc[y * w + x - d];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, 2 * c, shifts, h, w],
            value,
            Op::FeatureVolume {
                left,
                right,
                shifts,
            },
            &[left, right],
        ))
    }

    /// `out[n, h, w] = Σ_d d · p[n, 0, d, h, w]` for a `[N, 1, D, H, W]` distribution.
    pub fn disparity_expectation(&mut self, p: Var) -> Result<Var> {
        let s = self.shape(p).to_vec();
        let [n, 1, d, h, w] = s[..] else {
            return shape_err(format!("expected [N, 1, D, H, W], got {s:?}"));
        };
        let pv = self.value(p);
        let plane = h * w;
        let mut value = vec![0.0; n * plane];
        for b in 0..n {
            for k in 0..d {
                let src = &pv[(b * d + k) * plane..][..plane];
                for (o, v) in value[b * plane..][..plane].iter_mut().zip(src) {
                    *o += k as f64 * v;
                }
            }
        }
        Ok(self.push(vec![n, h, w], value, Op::DisparityExpectation(p), &[p]))
    }

    /// Mean smooth-ℓ1 of `pred - target` over pixels where `mask` is set.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.len() != mask.len() {
            return shape_err(format!(
                "smooth-l1 prediction {:?} vs {} targets / {} mask entries",
                self.shape(pred),
                target.len(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "smooth-l1 over an empty validity mask".into(),
            ));
        }
        let total: f64 = pv
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((p, t), _)| smooth_l1_value(p - t))
            .sum();
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[pred],
        ))
    }

    /// Accumulates `d loss / d leaf` into every parameter leaf of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                store.tensor_mut(id).accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(xs) => {
                for &x in xs {
                    if let Some(b) = self.grad_buf(grads, x) {
                        add_into(b, g);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(b) = self.grad_buf(grads, *x) {
                    for (a, v) in b.iter_mut().zip(g) {
                        *a += f * v;
                    }
                }
            }
            Op::Mul(a, c) => {
                let (av, cv) = (self.value(*a).to_vec(), self.value(*c).to_vec());
                if let Some(b) = self.grad_buf(grads, *a) {
                    for ((o, gv), y) in b.iter_mut().zip(g).zip(&cv) {
                        *o += gv * y;
                    }
                }
                if let Some(b) = self.grad_buf(grads, *c) {
                    for ((o, gv), y) in b.iter_mut().zip(g).zip(&av) {
                        *o += gv * y;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(b) = self.grad_buf(grads, *x) {
                    b.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(b) = self.grad_buf(grads, *x) {
                    add_into(b, g);
                }
            }
            Op::ChannelResize(x) => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[2..].iter().product();
                let out_c = g.len() / (xs[0] * inner);
                let keep = xs[1].min(out_c);
                if let Some(b) = self.grad_buf(grads, *x) {
                    for n in 0..xs[0] {
                        add_into(
                            &mut b[n * xs[1] * inner..][..keep * inner],
                            &g[n * out_c * inner..][..keep * inner],
                        );
                    }
                }
            }
            Op::Mix { weights, terms } => {
                let wv = self.value(*weights).to_vec();
                if self.nodes[weights.0].requires_grad {
                    let dots: Vec<(usize, f64)> = terms
                        .iter()
                        .map(|&(r, t)| (r, dot(g, self.value(t))))
                        .collect();
                    let b = self.grad_buf(grads, *weights).expect("requires grad");
                    for (r, d) in dots {
                        b[r] += d;
                    }
                }
                for &(r, t) in terms {
                    if let Some(b) = self.grad_buf(grads, t) {
                        for (o, v) in b.iter_mut().zip(g) {
                            *o += wv[r] * v;
                        }
                    }
                }
            }
            Op::Conv { x, w, geo } => {
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = need_x.then(|| vec![0.0; self.value(*x).len()]);
                let mut gw = need_w.then(|| vec![0.0; self.value(*w).len()]);
                kernels::conv_backward(
                    geo,
                    self.value(*x),
                    self.value(*w),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_into(self.grad_buf(grads, *x).expect("requires grad"), &gx);
                }
                if let Some(gw) = gw {
                    add_into(self.grad_buf(grads, *w).expect("requires grad"), &gw);
                }
            }
            Op::Affine { x, scale, shift } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let sv = self.value(*scale).to_vec();
                let xv = self.value(*x);
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for (i, (gv, v)) in g.iter().zip(xv).enumerate() {
                    let ch = (i / inner) % c;
                    gs[ch] += gv * v;
                    gt[ch] += gv;
                }
                if let Some(b) = self.grad_buf(grads, *x) {
                    for (i, (o, gv)) in b.iter_mut().zip(g).enumerate() {
                        *o += gv * sv[(i / inner) % c];
                    }
                }
                if let Some(b) = self.grad_buf(grads, *scale) {
                    add_into(b, &gs);
                }
                if let Some(b) = self.grad_buf(grads, *shift) {
                    add_into(b, &gt);
                }
            }
            Op::Normalize { x, inv_std } => {
                let Some(b) = self.grad_buf(grads, *x) else { return };
                let group = node.value.len() / inv_std.len();
                let chunks = b.chunks_mut(group).zip(g.chunks(group)).zip(node.value.chunks(group));
                for (((o, gv), y), is) in chunks.zip(inv_std) {
                    let g_mean = gv.iter().sum::<f64>() / group as f64;
                    let gy_mean = gv.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / group as f64;
                    for ((o, gv), y) in o.iter_mut().zip(gv).zip(y) {
                        *o += is * (gv - g_mean - y * gy_mean);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).to_vec();
                if let Some(b) = self.grad_buf(grads, *x) {
                    for ((o, gv), v) in b.iter_mut().zip(g).zip(&xv) {
                        *o += if *v > 0.0 { *gv } else { slope * gv };
                    }
                }
            }
            Op::Interpolate {
                x,
                planes,
                input,
                output,
            } => {
                if let Some(b) = self.grad_buf(grads, *x) {
                    kernels::interpolate_backward(g, *planes, *input, *output, b);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let yv = &node.value;
                if let Some(b) = self.grad_buf(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let s: f64 = (0..*len).map(|k| g[at(k)] * yv[at(k)]).sum();
                            for k in 0..*len {
                                b[at(k)] += yv[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let n = self.shape(xs[0])[0];
                let inner: usize = self.shape(xs[0])[2..].iter().product();
                let total_c: usize = xs.iter().map(|x| self.shape(*x)[1]).sum();
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if let Some(b) = self.grad_buf(grads, x) {
                        for bn in 0..n {
                            add_into(
                                &mut b[bn * c * inner..][..c * inner],
                                &g[(bn * total_c + offset) * inner..][..c * inner],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::Pool {
                x,
                planes,
                dims,
                window,
                kind,
                argmax,
            } => {
                if let Some(b) = self.grad_buf(grads, *x) {
                    kernels::pool_backward(g, *planes, *dims, *window, *kind, argmax, b);
                }
            }
            Op::FeatureVolume {
                left,
                right,
                shifts,
            } => {
                let s = self.shape(*left).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let plane = h * w;
                if let Some(b) = self.grad_buf(grads, *left) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let dst = &mut b[(bn * c + ch) * plane..][..plane];
                            for d in 0..*shifts {
                                let src = &g[((bn * 2 * c + ch) * shifts + d) * plane..][..plane];
                                add_into(dst, src);
                            }
                        }
                    }
                }
                if let Some(b) = self.grad_buf(grads, *right) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let dst = &mut b[(bn * c + ch) * plane..][..plane];
                            for d in 0..*shifts {
                                let src =
                                    &g[((bn * 2 * c + c + ch) * shifts + d) * plane..][..plane];
                                for y in 0..h {
                                    for xx in d..w {
                                        dst[y * w + xx - d] += src[y * w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::DisparityExpectation(p) => {
                let s = self.shape(*p).to_vec();
                let (n, d, plane) = (s[0], s[2], s[3] * s[4]);
                if let Some(b) = self.grad_buf(grads, *p) {
                    for bn in 0..n {
                        for k in 0..d {
                            let dst = &mut b[(bn * d + k) * plane..][..plane];
                            for (o, gv) in dst.iter_mut().zip(&g[bn * plane..][..plane]) {
                                *o += k as f64 * gv;
                            }
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred).to_vec();
                if let Some(b) = self.grad_buf(grads, *pred) {
                    let scale = g[0] / *count as f64;
                    for (i, o) in b.iter_mut().enumerate() {
                        if mask[i] {
                            *o += scale * smooth_l1_slope(pv[i] - target[i]);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `0.5 x²` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
