//! Small encoder/decoder restoration network with a global residual
//! connection, sized for CPU-only training runs.
//!
//! Layout for `levels = L`, channel width `W`:
//!
//! ```text
//! x = relu(conv3x3(input))            # in_channels -> W
//! repeat L times:  x = relu(conv3x3(x)); keep as skip; x = avg_pool2(x)
//! x = relu(conv3x3(x))                # bottleneck
//! repeat L times:  x = upsample(x) + skip; x = relu(conv3x3(x))
//! out = conv3x3(x) + residual         # W -> out_channels, zero-initialized
//! ```
//!
//! The output convolution starts at zero, so a freshly initialized network
//! reproduces its residual input bit for bit.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architectural hyperparameters; shapes of every tensor follow from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub levels: usize,
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 {
            return Err(Error::InvalidParameter(
                "channel counts must be positive".into(),
            ));
        }
        if self.levels > 8 {
            return Err(Error::InvalidParameter(format!(
                "levels = {} is unreasonably deep",
                self.levels
            )));
        }
        Ok(())
    }

    /// Required divisor of both spatial dimensions (one halving per level).
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }
}

/// All learnable tensors of the network, in the canonical order used for
/// optimizer state, checkpoints, and recorded graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub arch: NetArch,
    pub k_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub enc: Vec<(Tensor<T>, Tensor<T>)>,
    pub k_bot: Tensor<T>,
    pub b_bot: Tensor<T>,
    pub dec: Vec<(Tensor<T>, Tensor<T>)>,
    pub k_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Scalar> NetParams<T> {
    /// Seeded Kaiming-uniform initialization (weights uniform in
    /// +/- sqrt(6 / fan_in), biases zero). The output convolution is zeroed
    /// so the untrained network is the identity on its residual path. Draw
    /// order follows the canonical tensor order, so a seed fully determines
    /// the parameters.
    pub fn init(arch: NetArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let w = arch.width;
        let draw = |cin: usize, cout: usize, rng: &mut Rng| {
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let data = (0..9 * cin * cout)
                .map(|_| T::from_f64(rng.next_range(-bound, bound)))
                .collect();
            Tensor::from_vec(&[3, 3, cin, cout], data).expect("sized draw")
        };
        let k_in = draw(arch.in_channels, w, rng);
        let enc = (0..arch.levels)
            .map(|_| (draw(w, w, rng), Tensor::zeros(&[w])))
            .collect();
        let k_bot = draw(w, w, rng);
        let dec = (0..arch.levels)
            .map(|_| (draw(w, w, rng), Tensor::zeros(&[w])))
            .collect();
        Ok(Self {
            arch,
            k_in,
            b_in: Tensor::zeros(&[w]),
            enc,
            k_bot,
            b_bot: Tensor::zeros(&[w]),
            dec,
            k_out: Tensor::zeros(&[3, 3, w, arch.out_channels]),
            b_out: Tensor::zeros(&[arch.out_channels]),
        })
    }

    /// Expected shape of each named tensor, in canonical order.
    pub fn tensor_specs(arch: &NetArch) -> Vec<(String, Vec<usize>)> {
        let w = arch.width;
        let mut specs = vec![
            ("in_k".to_string(), vec![3, 3, arch.in_channels, w]),
            ("in_b".to_string(), vec![w]),
        ];
        for l in 0..arch.levels {
            specs.push((format!("enc{l}_k"), vec![3, 3, w, w]));
            specs.push((format!("enc{l}_b"), vec![w]));
        }
        specs.push(("bot_k".to_string(), vec![3, 3, w, w]));
        specs.push(("bot_b".to_string(), vec![w]));
        for l in 0..arch.levels {
            specs.push((format!("dec{l}_k"), vec![3, 3, w, w]));
            specs.push((format!("dec{l}_b"), vec![w]));
        }
        specs.push(("out_k".to_string(), vec![3, 3, w, arch.out_channels]));
        specs.push(("out_b".to_string(), vec![arch.out_channels]));
        specs
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Tensors with their names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("in_k".to_string(), &self.k_in),
            ("in_b".to_string(), &self.b_in),
        ];
        for (l, (k, b)) in self.enc.iter().enumerate() {
            out.push((format!("enc{l}_k"), k));
            out.push((format!("enc{l}_b"), b));
        }
        out.push(("bot_k".to_string(), &self.k_bot));
        out.push(("bot_b".to_string(), &self.b_bot));
        for (l, (k, b)) in self.dec.iter().enumerate() {
            out.push((format!("dec{l}_k"), k));
            out.push((format!("dec{l}_b"), b));
        }
        out.push(("out_k".to_string(), &self.k_out));
        out.push(("out_b".to_string(), &self.b_out));
        out
    }

    /// Mutable references in canonical order (for optimizer updates).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.k_in, &mut self.b_in];
        for (k, b) in self.enc.iter_mut() {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.k_bot);
        out.push(&mut self.b_bot);
        for (k, b) in self.dec.iter_mut() {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.k_out);
        out.push(&mut self.b_out);
        out
    }

    /// Rebuild parameters from named tensors (checkpoint loading), verifying
    /// every expected tensor is present with the right shape.
    pub fn from_named(
        arch: NetArch,
        mut tensors: std::collections::HashMap<String, Tensor<T>>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    shape,
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut fields = Vec::new();
        for (name, shape) in Self::tensor_specs(&arch) {
            fields.push(take(&name, &shape)?);
        }
        if !tensors.is_empty() {
            let mut extra: Vec<_> = tensors.keys().cloned().collect();
            extra.sort();
            return Err(Error::Format(format!(
                "checkpoint has unexpected tensors: {}",
                extra.join(", ")
            )));
        }
        let mut it = fields.into_iter();
        let mut next = || it.next().expect("spec-sized field list");
        let k_in = next();
        let b_in = next();
        let enc = (0..arch.levels).map(|_| (next(), next())).collect();
        let k_bot = next();
        let b_bot = next();
        let dec = (0..arch.levels).map(|_| (next(), next())).collect();
        Ok(Self {
            arch,
            k_in,
            b_in,
            enc,
            k_bot,
            b_bot,
            dec,
            k_out: next(),
            b_out: next(),
        })
    }
}

/// Graph nodes for one recorded forward pass.
pub struct NetNodes {
    /// Parameter leaves in canonical order (matches `named_tensors`).
    pub params: Vec<NodeId>,
    pub output: NodeId,
}

/// Record the network into `g`. `input` must be H x W x in_channels with H
/// and W divisible by 2^levels; `residual` must be H x W x out_channels and
/// is added to the predicted correction.
pub fn record_net<T: Scalar>(
    g: &mut Graph<T>,
    input: NodeId,
    residual: NodeId,
    p: &NetParams<T>,
) -> Result<NetNodes> {
    let (h, w, cin) = g.value(input).hwc()?;
    if cin != p.arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, image has {cin}",
            p.arch.in_channels
        )));
    }
    let m = p.arch.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} not divisible by {m} (levels = {})",
            p.arch.levels
        )));
    }
    let mut params = Vec::new();
    let conv = |g: &mut Graph<T>,
                    x: NodeId,
                    k: &Tensor<T>,
                    b: &Tensor<T>,
                    params: &mut Vec<NodeId>|
     -> Result<NodeId> {
        let kn = g.leaf(k.clone());
        let bn = g.leaf(b.clone());
        params.push(kn);
        params.push(bn);
        g.conv2d(x, kn, bn)
    };
    let mut x = conv(g, input, &p.k_in, &p.b_in, &mut params)?;
    x = g.relu(x);
    let mut skips = Vec::new();
    for (k, b) in &p.enc {
        x = conv(g, x, k, b, &mut params)?;
        x = g.relu(x);
        skips.push(x);
        x = g.avg_pool2(x)?;
    }
    x = conv(g, x, &p.k_bot, &p.b_bot, &mut params)?;
    x = g.relu(x);
    // decoder parameter leaves must appear in canonical (ascending) order
    // even though levels are consumed deepest-first
    let dec_nodes: Vec<(NodeId, NodeId)> = p
        .dec
        .iter()
        .map(|(k, b)| {
            let kn = g.leaf(k.clone());
            let bn = g.leaf(b.clone());
            params.push(kn);
            params.push(bn);
            (kn, bn)
        })
        .collect();
    for l in (0..p.arch.levels).rev() {
        x = g.upsample_nearest(x)?;
        x = g.add(x, skips[l])?;
        let (kn, bn) = dec_nodes[l];
        x = g.conv2d(x, kn, bn)?;
        x = g.relu(x);
    }
    let correction = conv(g, x, &p.k_out, &p.b_out, &mut params)?;
    let output = g.add(correction, residual)?;
    Ok(NetNodes { params, output })
}

/// Plain-tensor forward pass (no gradients retained).
pub fn net_forward<T: Scalar>(
    input: &Tensor<T>,
    residual: &Tensor<T>,
    p: &NetParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let i = g.leaf(input.clone());
    let r = g.leaf(residual.clone());
    let nodes = record_net(&mut g, i, r, p)?;
    Ok(g.value(nodes.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.next_f64())
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn arch(cin: usize, levels: usize, width: usize) -> NetArch {
        NetArch {
            in_channels: cin,
            out_channels: 3,
            width,
            levels,
        }
    }

    #[test]
    fn untrained_net_reproduces_residual_exactly() {
        let mut rng = Rng::seed_from_u64(1);
        let p = NetParams::<f64>::init(arch(5, 2, 4), &mut rng).unwrap();
        let input = rand_image(&[8, 8, 5], &mut rng);
        let residual = rand_image(&[8, 8, 3], &mut rng);
        let out = net_forward(&input, &residual, &p).unwrap();
        assert_eq!(out, residual);
    }

    #[test]
    fn output_shape_and_level_zero() {
        let mut rng = Rng::seed_from_u64(2);
        let p = NetParams::<f64>::init(arch(3, 0, 2), &mut rng).unwrap();
        let input = rand_image(&[5, 7, 3], &mut rng);
        let out = net_forward(&input, &input, &p).unwrap();
        assert_eq!(out.shape(), &[5, 7, 3]);
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let mut rng = Rng::seed_from_u64(3);
        let p = NetParams::<f64>::init(arch(3, 2, 2), &mut rng).unwrap();
        let odd = rand_image(&[6, 6, 3], &mut rng); // 6 not divisible by 4
        assert!(net_forward(&odd, &odd, &p).is_err());
        let wrong_c = rand_image(&[8, 8, 4], &mut rng);
        let res = rand_image(&[8, 8, 3], &mut rng);
        assert!(net_forward(&wrong_c, &res, &p).is_err());
    }

    #[test]
    fn named_tensor_order_matches_recorded_params() {
        let mut rng = Rng::seed_from_u64(4);
        let p = NetParams::<f64>::init(arch(4, 2, 3), &mut rng).unwrap();
        let input = rand_image(&[4, 4, 4], &mut rng);
        let residual = rand_image(&[4, 4, 3], &mut rng);
        let mut g = Graph::new();
        let i = g.leaf(input);
        let r = g.leaf(residual);
        let nodes = record_net(&mut g, i, r, &p).unwrap();
        let named = p.named_tensors();
        assert_eq!(named.len(), nodes.params.len());
        for ((name, tensor), node) in named.iter().zip(&nodes.params) {
            assert_eq!(g.value(*node), *tensor, "leaf mismatch for {name}");
        }
        let specs = NetParams::<f64>::tensor_specs(&p.arch);
        for ((name, tensor), (spec_name, spec_shape)) in named.iter().zip(&specs) {
            assert_eq!(name, spec_name);
            assert_eq!(tensor.shape(), &spec_shape[..]);
        }
    }

    #[test]
    fn from_named_roundtrip() {
        let mut rng = Rng::seed_from_u64(5);
        let p = NetParams::<f64>::init(arch(4, 1, 3), &mut rng).unwrap();
        let map: std::collections::HashMap<_, _> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let q = NetParams::from_named(p.arch, map).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn from_named_rejects_missing_and_extra() {
        let mut rng = Rng::seed_from_u64(6);
        let p = NetParams::<f64>::init(arch(3, 1, 2), &mut rng).unwrap();
        let full: std::collections::HashMap<_, _> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut missing = full.clone();
        missing.remove("bot_k");
        assert!(NetParams::from_named(p.arch, missing).is_err());
        let mut extra = full.clone();
        extra.insert("mystery".into(), Tensor::scalar(1.0));
        assert!(NetParams::from_named(p.arch, extra).is_err());
        let mut wrong = full;
        wrong.insert("bot_b".into(), Tensor::zeros(&[7]));
        assert!(NetParams::from_named(p.arch, wrong).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(7);
        let p = NetParams::<f64>::init(arch(2, 1, 2), &mut rng).unwrap();
        let input = rand_image(&[4, 4, 2], &mut rng);
        let residual = rand_image(&[4, 4, 3], &mut rng);
        let target = rand_image(&[4, 4, 3], &mut rng);

        let loss_and_grads = |p: &NetParams<f64>| {
            let mut g = Graph::new();
            let i = g.leaf(input.clone());
            let r = g.leaf(residual.clone());
            let t = g.leaf(target.clone());
            let nodes = record_net(&mut g, i, r, p).unwrap();
            let loss = g.l1_loss(nodes.output, t).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<Tensor<f64>> = nodes
                .params
                .iter()
                .map(|n| g.grad(*n).unwrap().clone())
                .collect();
            (g.value(loss).scalar_value().unwrap(), grads)
        };
        let (_, grads) = loss_and_grads(&p);

        // probe a few entries spread across tensors with central differences
        let eps = 1e-5;
        let probes = [(0usize, 3usize), (2, 0), (4, 5), (6, 1)];
        for &(ti, ei) in &probes {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[ei] += eps;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[ei] -= eps;
            let (lp, _) = loss_and_grads(&plus);
            let (lm, _) = loss_and_grads(&minus);
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[ti].data()[ei];
            let rel = (analytic - numeric).abs() / f64::max(1e-12, analytic.abs() + numeric.abs());
            assert!(
                rel < 1e-6,
                "tensor {ti} entry {ei}: analytic {analytic} numeric {numeric} rel {rel}"
            );
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = NetParams::<f64>::init(arch(3, 2, 4), &mut Rng::seed_from_u64(42)).unwrap();
        let b = NetParams::<f64>::init(arch(3, 2, 4), &mut Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let c = NetParams::<f64>::init(arch(3, 2, 4), &mut Rng::seed_from_u64(43)).unwrap();
        assert_ne!(a, c);
    }
}
