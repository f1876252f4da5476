//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations in execution order; [`Graph::backward`]
//! replays them in reverse, accumulating gradients with `+=` so fan-out sums
//! contributions. Exactly the operations the encoder, pooling unit, and toy
//! network need are provided — no broadcasting, all shapes explicit.
//!
//! Convolution uses the cross-correlation convention (no kernel flip), as is
//! usual for learned kernels. Where true convolution is required, the data
//! synthesizer flips its kernels explicitly.

use crate::error::{Error, Result};
use crate::mask::MaskStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize },
    Relu { input: usize },
    Add { a: usize, b: usize },
    MulScalar { input: usize, s: T },
    ConcatChannels { a: usize, b: usize },
    AvgPool2 { input: usize },
    UpsampleNearest { input: usize },
    L1Loss { pred: usize, target: usize },
    MaskPool { input: usize, segments: Vec<Vec<usize>> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient populated by the latest [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// 2-D convolution: stride 1, zero "same" padding, odd kernel extents,
    /// cross-correlation convention.
    ///
    /// `out[y,x,o] = bias[o] + sum over (dy,dx,i) of in[y+dy-ph, x+dx-pw, i] *
    /// kernel[dy,dx,i,o]` with out-of-bounds input reads contributing zero.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, cin) = self.value(input).hwc()?;
        let (kh, kw, kcin, cout) = self.value(kernel).kernel4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "kernel expects {kcin} input channels, image has {cin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            )));
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            (h, w, cin, kh, kw, cout),
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        ))
    }

    /// Elementwise max(0, x). Ties at exactly 0 get gradient 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { input: input.0 })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul_scalar(&mut self, input: NodeId, s: T) -> NodeId {
        let out = self.value(input).map(|v| v * s);
        self.push(out, Op::MulScalar { input: input.0, s })
    }

    /// Channel-axis concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ha, wa, ca) = self.value(a).hwc()?;
        let (hb, wb, cb) = self.value(b).hwc()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut data = Vec::with_capacity(ha * wa * (ca + cb));
        let da = self.value(a).data();
        let db = self.value(b).data();
        for p in 0..ha * wa {
            data.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let out = Tensor::from_vec(&[ha, wa, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatChannels { a: a.0, b: b.0 }))
    }

    /// 2x2 mean pooling; requires even spatial extents.
    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool2 requires even extents, got {h}x{w}"
            )));
        }
        let src = self.value(input);
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros(&[h / 2, w / 2, c]);
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let s = src.at3(2 * y, 2 * x, ch)
                        + src.at3(2 * y, 2 * x + 1, ch)
                        + src.at3(2 * y + 1, 2 * x, ch)
                        + src.at3(2 * y + 1, 2 * x + 1, ch);
                    out.set3(y, x, ch, s * quarter);
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2 { input: input.0 }))
    }

    /// 2x nearest-neighbor upsampling (each pixel replicated 2x2).
    pub fn upsample_nearest(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        let src = self.value(input);
        let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ch in 0..c {
                    out.set3(y, x, ch, src.at3(y / 2, x / 2, ch));
                }
            }
        }
        Ok(self.push(out, Op::UpsampleNearest { input: input.0 }))
    }

    /// Mean absolute error; subgradient 0 where pred == target exactly.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::ShapeMismatch(format!(
                "l1_loss: {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        let n = T::from_f64(self.value(pred).len() as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            acc += (p - t).abs();
        }
        let out = Tensor::scalar(acc / n);
        Ok(self.push(
            out,
            Op::L1Loss {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Per-mask mean-and-broadcast accumulation over the enc tensor. For each
    /// mask region, the per-channel mean over the region's pixels is added to
    /// every pixel of that region; overlapping regions therefore sum their
    /// means. Empty masks contribute nothing.
    ///
    /// The operator is self-adjoint (a sum of symmetric projections), so the
    /// backward pass applies the same pooling to the upstream gradient.
    pub fn masked_average_pool(&mut self, input: NodeId, stack: &MaskStack) -> Result<NodeId> {
        let (h, w, _) = self.value(input).hwc()?;
        if (stack.height(), stack.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask stack {}x{} vs tensor {h}x{w}",
                stack.height(),
                stack.width()
            )));
        }
        let mut segments = Vec::with_capacity(stack.len());
        for i in 0..stack.len() {
            let plane = stack.plane(i);
            if plane.len() != h * w {
                return Err(Error::ShapeMismatch(format!(
                    "mask {i} has {} entries, expected {}",
                    plane.len(),
                    h * w
                )));
            }
            segments.push(
                plane
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(p, _)| p)
                    .collect::<Vec<usize>>(),
            );
        }
        let out = mask_pool_apply(self.value(input), &segments)?;
        Ok(self.push(
            out,
            Op::MaskPool {
                input: input.0,
                segments,
            },
        ))
    }

    /// Smallest distance from any recorded nondifferentiable tie: relu input
    /// coordinates and l1 residuals, both kinked at zero. Finite-difference
    /// fixtures use this to reject probe points whose +/- eps evaluations
    /// would straddle a kink and corrupt the numeric gradient.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[*input].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::L1Loss { pred, target } => {
                    let p = self.nodes[*pred].value.data();
                    let t = self.nodes[*target].value.data();
                    for (&a, &b) in p.iter().zip(t) {
                        margin = margin.min((a - b).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse-order gradient accumulation from a scalar loss. Seeds the loss
    /// gradient with 1.0 and visits nodes in reverse recording order exactly
    /// once; every node reachable from the loss gets a populated gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Tensor<T>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = T::one();

        for i in (0..=loss.0).rev() {
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(&[]));
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let (input, kernel, bias) = (*input, *kernel, *bias);
                    let (h, w, cin) = self.nodes[input].value.hwc()?;
                    let (kh, kw, _, cout) = self.nodes[kernel].value.kernel4()?;
                    conv2d_backward(
                        &g,
                        &self.nodes[input].value,
                        &self.nodes[kernel].value,
                        &mut grads,
                        (input, kernel, bias),
                        (h, w, cin, kh, kw, cout),
                    );
                }
                Op::Relu { input } => {
                    let input = *input;
                    let src = self.nodes[input].value.data();
                    for ((d, &gv), &x) in grads[input]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(src)
                    {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (d, &gv) in grads[a].data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                    for (d, &gv) in grads[b].data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
                Op::MulScalar { input, s } => {
                    let (input, s) = (*input, *s);
                    for (d, &gv) in grads[input].data_mut().iter_mut().zip(g.data()) {
                        *d += gv * s;
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a].value.shape()[2];
                    let cb = self.nodes[b].value.shape()[2];
                    let n = self.nodes[a].value.shape()[0] * self.nodes[a].value.shape()[1];
                    for p in 0..n {
                        let gbase = p * (ca + cb);
                        for ch in 0..ca {
                            grads[a].data_mut()[p * ca + ch] += g.data()[gbase + ch];
                        }
                        for ch in 0..cb {
                            grads[b].data_mut()[p * cb + ch] += g.data()[gbase + ca + ch];
                        }
                    }
                }
                Op::AvgPool2 { input } => {
                    let input = *input;
                    let (h2, w2, c) = g.hwc()?;
                    let quarter = T::from_f64(0.25);
                    let din = grads[input].data_mut();
                    let w = 2 * w2;
                    for y in 0..h2 {
                        for x in 0..w2 {
                            for ch in 0..c {
                                let gv = g.at3(y, x, ch) * quarter;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    din[((2 * y + dy) * w + 2 * x + dx) * c + ch] += gv;
                                }
                            }
                        }
                    }
                }
                Op::UpsampleNearest { input } => {
                    let input = *input;
                    let (h2, w2, c) = g.hwc()?;
                    let w = w2 / 2;
                    let din = grads[input].data_mut();
                    for y in 0..h2 {
                        for x in 0..w2 {
                            for ch in 0..c {
                                din[((y / 2) * w + x / 2) * c + ch] += g.at3(y, x, ch);
                            }
                        }
                    }
                }
                Op::L1Loss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let n = T::from_f64(self.nodes[pred].value.len() as f64);
                    let gv = g.data()[0] / n;
                    let pd = self.nodes[pred].value.data();
                    let td = self.nodes[target].value.data();
                    for p in 0..pd.len() {
                        let s = if pd[p] > td[p] {
                            gv
                        } else if pd[p] < td[p] {
                            -gv
                        } else {
                            T::zero()
                        };
                        grads[pred].data_mut()[p] += s;
                        grads[target].data_mut()[p] -= s;
                    }
                }
                Op::MaskPool { input, segments } => {
                    let input = *input;
                    let pooled = mask_pool_apply(&g, segments)?;
                    for (d, &gv) in grads[input].data_mut().iter_mut().zip(pooled.data()) {
                        *d += gv;
                    }
                }
            }
            grads[i] = g;
        }
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = Some(grad);
        }
        Ok(())
    }
}

fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    (h, w, cin, kh, kw, cout): (usize, usize, usize, usize, usize, usize),
) -> Tensor<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Tensor::zeros(&[h, w, cout]);
    let id = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    let od = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let obase = (y * w + x) * cout;
            let acc = &mut od[obase..obase + cout];
            acc.copy_from_slice(bd);
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ph || sy >= h + ph {
                    continue;
                }
                let sy = sy - ph;
                for dx in 0..kw {
                    let sx = x + dx;
                    if sx < pw || sx >= w + pw {
                        continue;
                    }
                    let sx = sx - pw;
                    let ibase = (sy * w + sx) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for i in 0..cin {
                        let v = id[ibase + i];
                        let krow = &kd[kbase + i * cout..kbase + (i + 1) * cout];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Scalar>(
    g: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grads: &mut [Tensor<T>],
    (iid, kid, bid): (usize, usize, usize),
    (h, w, cin, kh, kw, cout): (usize, usize, usize, usize, usize, usize),
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let gd = g.data();
    let id = input.data();
    let kd = kernel.data();
    // bias grad: sum of upstream over all spatial positions
    {
        let db = grads[bid].data_mut();
        for p in 0..h * w {
            for o in 0..cout {
                db[o] += gd[p * cout + o];
            }
        }
    }
    // input and kernel grads share the same loop structure as the forward
    let (lo, hi) = if iid < kid {
        let (a, b) = grads.split_at_mut(kid);
        (&mut a[iid], &mut b[0])
    } else {
        let (a, b) = grads.split_at_mut(iid);
        (&mut b[0], &mut a[kid])
    };
    let (din, dk) = (lo.data_mut(), hi.data_mut());
    for y in 0..h {
        for x in 0..w {
            let gbase = (y * w + x) * cout;
            let gslice = &gd[gbase..gbase + cout];
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ph || sy >= h + ph {
                    continue;
                }
                let sy = sy - ph;
                for dx in 0..kw {
                    let sx = x + dx;
                    if sx < pw || sx >= w + pw {
                        continue;
                    }
                    let sx = sx - pw;
                    let ibase = (sy * w + sx) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for i in 0..cin {
                        let v = id[ibase + i];
                        let krow = &kd[kbase + i * cout..kbase + (i + 1) * cout];
                        let dkrow = &mut dk[kbase + i * cout..kbase + (i + 1) * cout];
                        let mut s = T::zero();
                        for o in 0..cout {
                            let gv = gslice[o];
                            dkrow[o] += v * gv;
                            s += krow[o] * gv;
                        }
                        din[ibase + i] += s;
                    }
                }
            }
        }
    }
}

/// Shared forward/adjoint kernel for masked average pooling: per-channel mean
/// over each segment's pixels, broadcast back and summed over segments. Fixed
/// iteration order (segments in stack order, pixels ascending) keeps results
/// bitwise deterministic.
fn mask_pool_apply<T: Scalar>(src: &Tensor<T>, segments: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (h, w, c) = src.hwc()?;
    let mut out = Tensor::zeros(&[h, w, c]);
    let sd = src.data();
    let od = out.data_mut();
    let mut means = vec![T::zero(); c];
    for seg in segments {
        if seg.is_empty() {
            continue;
        }
        let inv = T::from_f64(1.0 / seg.len() as f64);
        means.iter_mut().for_each(|m| *m = T::zero());
        for &p in seg {
            let base = p * c;
            for (m, &v) in means.iter_mut().zip(&sd[base..base + c]) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m = *m * inv);
        for &p in seg {
            let base = p * c;
            for (o, &m) in od[base..base + c].iter_mut().zip(&means) {
                *o += m;
            }
        }
    }
    Ok(out)
}

/// Max relative error between recorded gradients and central finite
/// differences, `|a - n| / max(1e-12, |a| + |n|)` over all coordinates of `x`.
///
/// `build` must construct the same scalar-valued computation each call; it
/// receives a fresh graph and the node holding (possibly perturbed) `x`.
pub fn grad_check<T, F>(x: &Tensor<T>, eps: T, build: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone());
    let loss = build(&mut graph, xid)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(xid)
        .cloned()
        .ok_or_else(|| Error::Contract("input gradient missing after backward".into()))?;

    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let id = g.leaf(probe.clone());
        let loss = build(&mut g, id)?;
        g.value(loss).scalar_value()
    };

    let two = T::from_f64(2.0);
    let floor = T::from_f64(1e-12);
    let mut max_rel = T::zero();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        let orig = xm.data()[i];
        xm.data_mut()[i] = orig - eps;
        let numeric = (eval(&xp)? - eval(&xm)?) / (two * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
