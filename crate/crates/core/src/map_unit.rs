//! The mask-average-pooling unit: a small learned encoder followed by
//! per-mask mean pooling and channel concatenation with the input image.
//!
//! The full forward pass is: encode the image (3x3 conv then 1x1 conv, no
//! intermediate nonlinearity); in training mode randomly drop masks; append
//! the uncovered-region plane so coverage is total; pool the encoding per
//! mask; concatenate the pooled tensor with the image along channels. Output
//! width is S + C_in channels.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::MaskStack;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MapUnitConfig {
    /// Encoder output channels S.
    pub s_channels: usize,
    /// Probability that each mask is dropped during training.
    pub dropout_p: f64,
    /// Dropout only runs when true; evaluation never consumes RNG draws.
    pub training: bool,
}

impl MapUnitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_channels < 1 {
            return Err(Error::InvalidParameter(
                "s_channels must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter(format!(
                "dropout_p {} outside [0, 1]",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Learned encoder parameters: a 3x3 convolution into S channels followed by
/// a 1x1 convolution over those channels, both with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub k3: Tensor<T>,
    pub b3: Tensor<T>,
    pub k1: Tensor<T>,
    pub b1: Tensor<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Seeded initialization: `k3` is Kaiming-uniform (weights uniform in
    /// +/- sqrt(6 / fan_in)), `k1` and both biases start at zero. The zero
    /// 1x1 conv gates the whole unit: pooled features contribute nothing at
    /// initialization, so adding the unit never perturbs the downstream
    /// network's starting point, and training opens the gate only where the
    /// pooled statistics reduce the loss (the standard zero-conv treatment
    /// for conditioning branches). Randomly-scaled pooled features were
    /// measured to dominate the first layer at init and cost more than they
    /// contributed over a short training budget. Draw order is fixed (k3
    /// row-major) so a seed fully determines the parameters.
    pub fn init(c_in: usize, s_channels: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (9 * c_in) as f64).sqrt();
        let data = (0..9 * c_in * s_channels)
            .map(|_| T::from_f64(rng.next_range(-bound, bound)))
            .collect();
        let k3 = Tensor::from_vec(&[3, 3, c_in, s_channels], data).expect("sized draw");
        Self {
            k3,
            b3: Tensor::zeros(&[s_channels]),
            k1: Tensor::zeros(&[1, 1, s_channels, s_channels]),
            b1: Tensor::zeros(&[s_channels]),
        }
    }
}

/// Graph nodes recorded by [`record_map_unit`]; parameter nodes are exposed
/// so the training loop can read their gradients.
pub struct MapUnitNodes {
    pub k3: NodeId,
    pub b3: NodeId,
    pub k1: NodeId,
    pub b1: NodeId,
    pub output: NodeId,
}

/// Record the encoder (two convolutions, no intermediate nonlinearity).
pub fn record_encode<T: Scalar>(
    g: &mut Graph<T>,
    image: NodeId,
    params: &EncoderParams<T>,
) -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId)> {
    let k3 = g.leaf(params.k3.clone());
    let b3 = g.leaf(params.b3.clone());
    let k1 = g.leaf(params.k1.clone());
    let b1 = g.leaf(params.b1.clone());
    let mid = g.conv2d(image, k3, b3)?;
    let enc = g.conv2d(mid, k1, b1)?;
    Ok((k3, b3, k1, b1, enc))
}

/// Record the whole unit into an existing graph so gradients flow back to the
/// encoder parameters and the image node.
pub fn record_map_unit<T: Scalar>(
    g: &mut Graph<T>,
    image: NodeId,
    masks: &MaskStack,
    params: &EncoderParams<T>,
    cfg: &MapUnitConfig,
    rng: &mut Rng,
) -> Result<MapUnitNodes> {
    cfg.validate()?;
    let report = masks.validate();
    if !report.ok() {
        return Err(Error::Contract(format!(
            "mask stack invalid: {}",
            report.issues.join("; ")
        )));
    }
    let (k3, b3, k1, b1, enc) = record_encode(g, image, params)?;
    let surviving = if cfg.training {
        masks.mask_dropout(cfg.dropout_p, rng)?
    } else {
        masks.clone()
    };
    let full = surviving.append_uncovered();
    let pooled = g.masked_average_pool(enc, &full)?;
    let output = g.concat_channels(pooled, image)?;
    Ok(MapUnitNodes {
        k3,
        b3,
        k1,
        b1,
        output,
    })
}

/// Plain-tensor encoder forward (no gradients retained).
pub fn encode<T: Scalar>(image: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let img = g.leaf(image.clone());
    let (_, _, _, _, enc) = record_encode(&mut g, img, params)?;
    Ok(g.value(enc).clone())
}

/// Plain-tensor masked average pooling (no gradients retained).
pub fn masked_average_pool<T: Scalar>(enc: &Tensor<T>, stack: &MaskStack) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let e = g.leaf(enc.clone());
    let pooled = g.masked_average_pool(e, stack)?;
    Ok(g.value(pooled).clone())
}

/// Plain-tensor full unit forward (no gradients retained).
pub fn map_unit_forward<T: Scalar>(
    image: &Tensor<T>,
    masks: &MaskStack,
    params: &EncoderParams<T>,
    cfg: &MapUnitConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let img = g.leaf(image.clone());
    let nodes = record_map_unit(&mut g, img, masks, params, cfg, rng)?;
    Ok(g.value(nodes.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;

    fn rand_image(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.next_f64())
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn row_mask(h: usize, w: usize, rows: std::ops::Range<usize>) -> Vec<u8> {
        (0..h * w)
            .map(|p| rows.contains(&(p / w)) as u8)
            .collect()
    }

    /// Independent straight-loop convolution for oracle comparisons.
    fn naive_conv(img: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, cin) = img.hwc().unwrap();
        let (kh, kw, _, cout) = k.kernel4().unwrap();
        let mut out = Tensor::zeros(&[h, w, cout]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for dy in 0..kh as isize {
                        for dx in 0..kw as isize {
                            let sy = y + dy - kh as isize / 2;
                            let sx = x + dx - kw as isize / 2;
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                acc += img.at3(sy as usize, sx as usize, i)
                                    * k.data()[(((dy * kw as isize + dx) as usize) * cin + i)
                                        * cout
                                        + o];
                            }
                        }
                    }
                    out.set3(y as usize, x as usize, o, acc);
                }
            }
        }
        out
    }

    #[test]
    fn encode_zero_params_gives_zero() {
        let mut rng = Rng::seed_from_u64(1);
        let img = rand_image(&[4, 4, 3], &mut rng);
        let params = EncoderParams {
            k3: Tensor::zeros(&[3, 3, 3, 8]),
            b3: Tensor::zeros(&[8]),
            k1: Tensor::zeros(&[1, 1, 8, 8]),
            b1: Tensor::zeros(&[8]),
        };
        let enc = encode(&img, &params).unwrap();
        assert!(enc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_identity_composition() {
        // k3 = center delta per channel, k1 = identity, C_in = S = 2
        let mut k3 = Tensor::zeros(&[3, 3, 2, 2]);
        for c in 0..2 {
            let idx = ((1 * 3 + 1) * 2 + c) * 2 + c;
            k3.data_mut()[idx] = 1.0;
        }
        let mut k1 = Tensor::zeros(&[1, 1, 2, 2]);
        k1.data_mut()[0] = 1.0;
        k1.data_mut()[3] = 1.0;
        let params = EncoderParams {
            k3,
            b3: Tensor::zeros(&[2]),
            k1,
            b1: Tensor::zeros(&[2]),
        };
        let mut rng = Rng::seed_from_u64(2);
        let img = rand_image(&[5, 4, 2], &mut rng);
        assert_eq!(encode(&img, &params).unwrap(), img);
    }

    #[test]
    fn encode_matches_two_conv_oracle() {
        let mut rng = Rng::seed_from_u64(3);
        let img = rand_image(&[6, 5, 3], &mut rng);
        let mut params = EncoderParams::<f64>::init(3, 4, &mut rng);
        // k1 initializes to zero (gated unit); randomize it so the oracle
        // comparison exercises both convolutions
        params.k1 = rand_image(&[1, 1, 4, 4], &mut rng);
        params.b1 = rand_image(&[4], &mut rng);
        let enc = encode(&img, &params).unwrap();
        let expect = naive_conv(&naive_conv(&img, &params.k3, &params.b3), &params.k1, &params.b1);
        for (a, b) in enc.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_two_by_two_example() {
        // enc [[1,2],[3,4]], top-row and bottom-row masks -> row means
        let enc = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut stack = MaskStack::new(2, 2);
        stack.push_plane(row_mask(2, 2, 0..1), "top");
        stack.push_plane(row_mask(2, 2, 1..2), "bottom");
        let pooled = masked_average_pool(&enc, &stack).unwrap();
        assert_eq!(pooled.data(), &[1.5, 1.5, 3.5, 3.5]);
    }

    #[test]
    fn overlapping_masks_sum_their_means() {
        let enc = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut stack = MaskStack::new(2, 2);
        stack.push_plane(vec![1, 1, 1, 1], "full");
        stack.push_plane(row_mask(2, 2, 0..1), "top");
        let pooled = masked_average_pool(&enc, &stack).unwrap();
        // global mean 2.5 everywhere, plus top-row mean 1.5 on the top row
        assert_eq!(pooled.data(), &[4.0, 4.0, 2.5, 2.5]);
    }

    #[test]
    fn empty_stack_pools_global_mean() {
        let mut rng = Rng::seed_from_u64(4);
        let img = rand_image(&[4, 4, 3], &mut rng);
        let params = EncoderParams::<f64>::init(3, 2, &mut rng);
        let cfg = MapUnitConfig {
            s_channels: 2,
            dropout_p: 0.0,
            training: false,
        };
        let out = map_unit_forward(&img, &MaskStack::new(4, 4), &params, &cfg, &mut rng).unwrap();
        assert_eq!(out.shape(), &[4, 4, 5]);
        let enc = encode(&img, &params).unwrap();
        for c in 0..2 {
            let mean: f64 =
                (0..16).map(|p| enc.data()[p * 2 + c]).sum::<f64>() / 16.0;
            for p in 0..16 {
                assert!((out.data()[p * 5 + c] - mean).abs() < 1e-12);
            }
        }
        // image rides along in the trailing channels
        for p in 0..16 {
            for c in 0..3 {
                assert_eq!(out.data()[p * 5 + 2 + c], img.data()[p * 3 + c]);
            }
        }
    }

    #[test]
    fn output_width_is_s_plus_cin() {
        let mut rng = Rng::seed_from_u64(5);
        let img = rand_image(&[4, 4, 3], &mut rng);
        let params = EncoderParams::<f64>::init(3, 8, &mut rng);
        let mut stack = MaskStack::new(4, 4);
        stack.push_plane(row_mask(4, 4, 0..2), "a");
        stack.push_plane(row_mask(4, 4, 2..4), "b");
        let cfg = MapUnitConfig {
            s_channels: 8,
            dropout_p: 0.0,
            training: false,
        };
        let out = map_unit_forward(&img, &stack, &params, &cfg, &mut rng).unwrap();
        assert_eq!(out.shape(), &[4, 4, 11]);
    }

    #[test]
    fn eval_mode_ignores_dropout_p() {
        let mut rng = Rng::seed_from_u64(6);
        let img = rand_image(&[4, 4, 3], &mut rng);
        let params = EncoderParams::<f64>::init(3, 4, &mut rng);
        let mut stack = MaskStack::new(4, 4);
        stack.push_plane(row_mask(4, 4, 0..2), "a");
        stack.push_plane(row_mask(4, 4, 2..4), "b");
        let run = |p: f64| {
            let cfg = MapUnitConfig {
                s_channels: 4,
                dropout_p: p,
                training: false,
            };
            let mut rng = Rng::seed_from_u64(7);
            map_unit_forward(&img, &stack, &params, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(0.0), run(0.9));
    }

    #[test]
    fn training_mode_dropout_is_seeded() {
        let mut rng = Rng::seed_from_u64(8);
        let img = rand_image(&[4, 4, 3], &mut rng);
        let params = EncoderParams::<f64>::init(3, 4, &mut rng);
        let mut stack = MaskStack::new(4, 4);
        for i in 0..4 {
            stack.push_plane(row_mask(4, 4, i..i + 1), format!("r{i}"));
        }
        let cfg = MapUnitConfig {
            s_channels: 4,
            dropout_p: 0.5,
            training: true,
        };
        let mut a = Rng::seed_from_u64(9);
        let mut b = Rng::seed_from_u64(9);
        let out_a = map_unit_forward(&img, &stack, &params, &cfg, &mut a).unwrap();
        let out_b = map_unit_forward(&img, &stack, &params, &cfg, &mut b).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn pooling_properties_on_random_partitions() {
        let mut rng = Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (h, w, c) = (
                2 + rng.next_below(5) as usize,
                2 + rng.next_below(5) as usize,
                1 + rng.next_below(3) as usize,
            );
            let enc = rand_image(&[h, w, c], &mut rng);
            // random partition: each pixel assigned to one of k groups
            let k = 1 + rng.next_below(4) as usize;
            let assign: Vec<usize> = (0..h * w).map(|_| rng.next_below(k as u64) as usize).collect();
            let mut stack = MaskStack::new(h, w);
            for g in 0..k {
                stack.push_plane(
                    assign.iter().map(|&a| (a == g) as u8).collect(),
                    format!("g{g}"),
                );
            }
            let pooled = masked_average_pool(&enc, &stack).unwrap();
            // piecewise constancy within each group (exact)
            for g in 0..k {
                let pixels: Vec<usize> =
                    (0..h * w).filter(|&p| assign[p] == g).collect();
                if let Some(&first) = pixels.first() {
                    for &p in &pixels {
                        for ch in 0..c {
                            assert_eq!(
                                pooled.data()[p * c + ch],
                                pooled.data()[first * c + ch]
                            );
                        }
                    }
                }
            }
            // mean conservation over the whole image
            for ch in 0..c {
                let m_enc: f64 =
                    (0..h * w).map(|p| enc.data()[p * c + ch]).sum::<f64>() / (h * w) as f64;
                let m_map: f64 =
                    (0..h * w).map(|p| pooled.data()[p * c + ch]).sum::<f64>() / (h * w) as f64;
                assert!((m_enc - m_map).abs() < 1e-10);
            }
            // permutation invariance
            let mut rev = MaskStack::new(h, w);
            for g in (0..k).rev() {
                rev.push_plane(
                    assign.iter().map(|&a| (a == g) as u8).collect(),
                    format!("g{g}"),
                );
            }
            let pooled_rev = masked_average_pool(&enc, &rev).unwrap();
            for (a, b) in pooled.data().iter().zip(pooled_rev.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            // linearity in enc
            let enc_b = rand_image(&[h, w, c], &mut rng);
            let (alpha, beta) = (0.7, -1.3);
            let mut combo = enc.clone();
            for (v, &b) in combo.data_mut().iter_mut().zip(enc_b.data()) {
                *v = alpha * *v + beta * b;
            }
            let lhs = masked_average_pool(&combo, &stack).unwrap();
            let rhs_a = masked_average_pool(&enc, &stack).unwrap();
            let rhs_b = masked_average_pool(&enc_b, &stack).unwrap();
            for i in 0..lhs.len() {
                let rhs = alpha * rhs_a.data()[i] + beta * rhs_b.data()[i];
                assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grad_check_full_unit() {
        let mut rng = Rng::seed_from_u64(11);
        let img = rand_image(&[4, 4, 2], &mut rng);
        let mut params = EncoderParams::<f64>::init(2, 3, &mut rng);
        // open the zero-initialized gate so the encoder path carries gradient
        params.k1 = rand_image(&[1, 1, 3, 3], &mut rng);
        let target = rand_image(&[4, 4, 5], &mut rng);
        let mut stack = MaskStack::new(4, 4);
        stack.push_plane(row_mask(4, 4, 0..2), "a");
        stack.push_plane(row_mask(4, 4, 1..4), "b");
        let cfg = MapUnitConfig {
            s_channels: 3,
            dropout_p: 0.0,
            training: false,
        };
        let err = grad_check(&img, 1e-5, |g, xid| {
            let mut rng = Rng::seed_from_u64(0);
            let nodes = record_map_unit(g, xid, &stack, &params, &cfg, &mut rng)?;
            let t = g.leaf(target.clone());
            g.l1_loss(nodes.output, t)
        })
        .unwrap();
        assert!(err <= 1e-6, "map unit rel err {err}");
    }
}
