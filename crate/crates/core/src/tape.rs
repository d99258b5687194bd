//! Reverse-mode autodiff over a recorded op tape.
//!
//! A `Tape` owns every value produced during one forward pass. Ops validate
//! shapes when recorded, so replaying the tape backward cannot fail. Nodes
//! only ever reference earlier nodes, which makes a reverse index sweep a
//! valid reverse-topological visit.
//!
//! One tape belongs to one execution context; ops parallelize internally but
//! recording is exclusive (`&mut self`).

use crate::error::{Error, Result};
use crate::ops::{conv, corr, resize, warp, ConvSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    Deconv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    LeakyRelu {
        x: NodeId,
        slope: S,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Resize {
        x: NodeId,
    },
    AbsDiff {
        a: NodeId,
        b: NodeId,
    },
    MaskedL1 {
        pred: NodeId,
        target: NodeId,
        mask: NodeId,
        valid: S,
    },
    Corr1d {
        left: NodeId,
        right: NodeId,
        max_disp: usize,
    },
    Warp1d {
        features: NodeId,
        disparity: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: S,
    },
    SumAll {
        x: NodeId,
    },
    InnerConst {
        x: NodeId,
        coeff: Tensor<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Concat { .. } => "concat_channels",
            Op::Resize { .. } => "bilinear_resize",
            Op::AbsDiff { .. } => "abs_diff",
            Op::MaskedL1 { .. } => "masked_l1",
            Op::Corr1d { .. } => "correlation1d",
            Op::Warp1d { .. } => "warp1d",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
            Op::InnerConst { .. } => "inner_const",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_nodes: Vec<(usize, NodeId)>,
    check_finite: bool,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Toggle the per-op non-finite scan (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        id
    }

    /// Record a trainable parameter as a leaf; its gradient is routed back to
    /// the owning `ParamSet` by `accumulate_param_grads`.
    pub fn param(&mut self, set: &ParamSet<S>, index: usize) -> NodeId {
        let id = self.leaf(set.get(index).value.clone());
        self.param_nodes.push((index, id));
        id
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<NodeId> {
        if self.check_finite {
            if let Some(i) = value.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value at element {i} in output of {}",
                    op.name()
                )));
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    pub fn conv2d(
        &mut self,
        layer: &str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if xs[1] != spec.in_channels {
            return Err(Error::shape(
                layer,
                format!("input has {} channels, spec expects {}", xs[1], spec.in_channels),
            ));
        }
        let expect_w = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        if ws != expect_w {
            return Err(Error::shape(
                layer,
                format!("weight shape {ws:?}, expected {expect_w:?}"),
            ));
        }
        if bs != [1, spec.out_channels, 1, 1] {
            return Err(Error::shape(
                layer,
                format!("bias shape {bs:?}, expected [1, {}, 1, 1]", spec.out_channels),
            ));
        }
        let oh = spec
            .conv_out(xs[2])
            .map_err(|e| Error::shape(layer, e.to_string()))?;
        let ow = spec
            .conv_out(xs[3])
            .map_err(|e| Error::shape(layer, e.to_string()))?;
        let out = conv::conv2d_fwd(self.value(x), self.value(w), self.value(b), spec, oh, ow);
        let value = Tensor::new([xs[0], spec.out_channels, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                spec: *spec,
            },
        )
    }

    pub fn deconv2d(
        &mut self,
        layer: &str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if xs[1] != spec.in_channels {
            return Err(Error::shape(
                layer,
                format!("input has {} channels, spec expects {}", xs[1], spec.in_channels),
            ));
        }
        let expect_w = [spec.in_channels, spec.out_channels, spec.kernel, spec.kernel];
        if ws != expect_w {
            return Err(Error::shape(
                layer,
                format!("weight shape {ws:?}, expected {expect_w:?}"),
            ));
        }
        if bs != [1, spec.out_channels, 1, 1] {
            return Err(Error::shape(
                layer,
                format!("bias shape {bs:?}, expected [1, {}, 1, 1]", spec.out_channels),
            ));
        }
        let oh = spec
            .deconv_out(xs[2])
            .map_err(|e| Error::shape(layer, e.to_string()))?;
        let ow = spec
            .deconv_out(xs[3])
            .map_err(|e| Error::shape(layer, e.to_string()))?;
        let out = conv::deconv2d_fwd(self.value(x), self.value(w), self.value(b), spec, oh, ow);
        let value = Tensor::new([xs[0], spec.out_channels, oh, ow], out)?;
        self.push(
            value,
            Op::Deconv2d {
                x,
                w,
                b,
                spec: *spec,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: S) -> Result<NodeId> {
        if slope < S::zero() || slope >= S::one() {
            return Err(Error::Config(format!("leaky_relu slope {slope} not in [0,1)")));
        }
        let value = self.value(x).map(|v| if v > S::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn concat_channels(&mut self, layer: &str, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape(layer, "concat of zero tensors".to_string()));
        }
        let first = self.value(parts[0]).shape();
        let mut channels = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if [s[0], s[2], s[3]] != [first[0], first[2], first[3]] {
                return Err(Error::shape(
                    layer,
                    format!("concat operand {s:?} incompatible with {first:?}"),
                ));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let mut data = Vec::with_capacity(n * channels * h * w);
        for bn in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.c();
                let plane = &t.data()[bn * c * h * w..][..c * h * w];
                data.extend_from_slice(plane);
            }
        }
        let value = Tensor::new([n, channels, h, w], data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        if out_h < 1 || out_w < 1 {
            return Err(Error::Config(format!(
                "bilinear_resize target {out_h}x{out_w} must be at least 1x1"
            )));
        }
        let [n, c, _, _] = self.value(x).shape();
        let out = resize::resize_fwd(self.value(x), out_h, out_w);
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        self.push(value, Op::Resize { x })
    }

    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(
                "abs_diff",
                format!("shape mismatch {sa:?} vs {sb:?}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<S> = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::AbsDiff { a, b })
    }

    /// Mean absolute error over mask=1 entries. The gradient propagates to
    /// `pred` only; `target` and `mask` are treated as constants.
    pub fn masked_l1(&mut self, pred: NodeId, target: NodeId, mask: NodeId) -> Result<NodeId> {
        let (sp, st, sm) = (
            self.value(pred).shape(),
            self.value(target).shape(),
            self.value(mask).shape(),
        );
        if sp != st || sp != sm {
            return Err(Error::shape(
                "masked_l1",
                format!("shape mismatch pred {sp:?} target {st:?} mask {sm:?}"),
            ));
        }
        let mv = self.value(mask).data();
        let valid: S = mv.iter().copied().sum();
        if valid <= S::zero() {
            return Err(Error::Config("no valid pixels".to_string()));
        }
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let mut total = S::zero();
        for i in 0..pv.len() {
            total = total + mv[i] * (pv[i] - tv[i]).abs();
        }
        let value = Tensor::scalar_value(total / valid);
        self.push(
            value,
            Op::MaskedL1 {
                pred,
                target,
                mask,
                valid,
            },
        )
    }

    pub fn correlation1d(&mut self, left: NodeId, right: NodeId, max_disp: usize) -> Result<NodeId> {
        let (sl, sr) = (self.value(left).shape(), self.value(right).shape());
        if sl != sr {
            return Err(Error::shape(
                "correlation1d",
                format!("shape mismatch {sl:?} vs {sr:?}"),
            ));
        }
        let out = corr::corr1d_fwd(self.value(left), self.value(right), max_disp);
        let value = Tensor::new([sl[0], 2 * max_disp + 1, sl[2], sl[3]], out)?;
        self.push(
            value,
            Op::Corr1d {
                left,
                right,
                max_disp,
            },
        )
    }

    pub fn warp1d(&mut self, features: NodeId, disparity: NodeId) -> Result<NodeId> {
        let (sf, sd) = (self.value(features).shape(), self.value(disparity).shape());
        if sd != [sf[0], 1, sf[2], sf[3]] {
            return Err(Error::shape(
                "warp1d",
                format!("disparity {sd:?} incompatible with features {sf:?}"),
            ));
        }
        let out = warp::warp1d_fwd(self.value(features), self.value(disparity));
        let value = Tensor::new(sf, out)?;
        self.push(
            value,
            Op::Warp1d {
                features,
                disparity,
            },
        )
    }

    /// |left - warp(right, disparity)|, the warp-based feature constancy term.
    pub fn reconstruction_error(
        &mut self,
        left_feat: NodeId,
        right_feat: NodeId,
        disparity: NodeId,
    ) -> Result<NodeId> {
        let warped = self.warp1d(right_feat, disparity)?;
        self.abs_diff(left_feat, warped)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("add", format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<S> = av.iter().zip(bv).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar_value(total), Op::SumAll { x })
    }

    /// Scalar inner product with a constant coefficient tensor.
    pub fn inner_const(&mut self, x: NodeId, coeff: &Tensor<S>) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx != coeff.shape() {
            return Err(Error::shape(
                "inner_const",
                format!("shape mismatch {sx:?} vs {:?}", coeff.shape()),
            ));
        }
        let mut total = S::zero();
        let xv = self.value(x).data();
        let cv = coeff.data();
        for i in 0..xv.len() {
            total = total + xv[i] * cv[i];
        }
        self.push(
            Tensor::scalar_value(total),
            Op::InnerConst {
                x,
                coeff: coeff.clone(),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; combine
    /// with `accumulate_param_grads` to update parameter `.grad` fields.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let gout = rest[0].as_ref().expect("checked above");
            let node = &self.nodes[id];
            self.backprop_node(node, gout, before);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|buf| {
                    Tensor::new(self.nodes[i].value.shape(), buf).expect("grad shape matches value")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    /// Add this tape's parameter gradients into the set. Calling twice
    /// without a reset accumulates.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, set: &mut ParamSet<S>) {
        for &(index, node) in &self.param_nodes {
            if let Some(g) = grads.of(node) {
                set.accumulate_grad(index, g);
            }
        }
    }

    fn backprop_node(&self, node: &Node<S>, gout: &[S], before: &mut [Option<Vec<S>>]) {
        let acc = |slot: &mut Option<Vec<S>>, contrib: Vec<S>| match slot {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(contrib) {
                    *dst += src;
                }
            }
            None => *slot = Some(contrib),
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let xv = self.value(*x);
                let [_, _, oh, ow] = node.value.shape();
                let gx = conv::conv2d_bwd_input(gout, self.value(*w), spec, xv.shape(), oh, ow);
                let gw = conv::conv2d_bwd_weight(gout, xv, spec, oh, ow);
                let gb = conv::bwd_bias(gout, xv.n(), spec.out_channels, oh, ow);
                acc(&mut before[x.0], gx);
                acc(&mut before[w.0], gw);
                acc(&mut before[b.0], gb);
            }
            Op::Deconv2d { x, w, b, spec } => {
                let xv = self.value(*x);
                let [_, _, oh, ow] = node.value.shape();
                let gx = conv::deconv2d_bwd_input(gout, self.value(*w), spec, xv.shape(), oh, ow);
                let gw = conv::deconv2d_bwd_weight(gout, xv, spec, oh, ow);
                let gb = conv::bwd_bias(gout, xv.n(), spec.out_channels, oh, ow);
                acc(&mut before[x.0], gx);
                acc(&mut before[w.0], gw);
                acc(&mut before[b.0], gb);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let gx: Vec<S> = xv
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > S::zero() { g } else { g * *slope })
                    .collect();
                acc(&mut before[x.0], gx);
            }
            Op::Concat { parts } => {
                let [n, _, h, w] = node.value.shape();
                let total_c = node.value.c();
                let mut c0 = 0usize;
                for &p in parts {
                    let pc = self.value(p).c();
                    let mut gp = vec![S::zero(); n * pc * h * w];
                    for bn in 0..n {
                        let src = &gout[(bn * total_c + c0) * h * w..][..pc * h * w];
                        gp[bn * pc * h * w..][..pc * h * w].copy_from_slice(src);
                    }
                    acc(&mut before[p.0], gp);
                    c0 += pc;
                }
            }
            Op::Resize { x } => {
                let xs = self.value(*x).shape();
                let [_, _, oh, ow] = node.value.shape();
                let gx = resize::resize_bwd(gout, xs, oh, ow);
                acc(&mut before[x.0], gx);
            }
            Op::AbsDiff { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![S::zero(); av.len()];
                let mut gb = vec![S::zero(); av.len()];
                for i in 0..av.len() {
                    let s = if av[i] > bv[i] {
                        S::one()
                    } else if av[i] < bv[i] {
                        -S::one()
                    } else {
                        S::zero()
                    };
                    ga[i] = gout[i] * s;
                    gb[i] = -gout[i] * s;
                }
                acc(&mut before[a.0], ga);
                acc(&mut before[b.0], gb);
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                valid,
            } => {
                let g = gout[0] / *valid;
                let pv = self.value(*pred).data();
                let tv = self.value(*target).data();
                let mv = self.value(*mask).data();
                let gp: Vec<S> = (0..pv.len())
                    .map(|i| {
                        let s = if pv[i] > tv[i] {
                            S::one()
                        } else if pv[i] < tv[i] {
                            -S::one()
                        } else {
                            S::zero()
                        };
                        g * mv[i] * s
                    })
                    .collect();
                acc(&mut before[pred.0], gp);
            }
            Op::Corr1d {
                left,
                right,
                max_disp,
            } => {
                let (gl, gr) = corr::corr1d_bwd(gout, self.value(*left), self.value(*right), *max_disp);
                acc(&mut before[left.0], gl);
                acc(&mut before[right.0], gr);
            }
            Op::Warp1d {
                features,
                disparity,
            } => {
                let (gf, gd) = warp::warp1d_bwd(gout, self.value(*features), self.value(*disparity));
                acc(&mut before[features.0], gf);
                acc(&mut before[disparity.0], gd);
            }
            Op::Add { a, b } => {
                acc(&mut before[a.0], gout.to_vec());
                acc(&mut before[b.0], gout.to_vec());
            }
            Op::Scale { x, factor } => {
                let gx: Vec<S> = gout.iter().map(|&g| g * *factor).collect();
                acc(&mut before[x.0], gx);
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                acc(&mut before[x.0], vec![gout[0]; n]);
            }
            Op::InnerConst { x, coeff } => {
                let gx: Vec<S> = coeff.data().iter().map(|&c| c * gout[0]).collect();
                acc(&mut before[x.0], gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{max_rel_err, oracle, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_tensor(values: &[f64]) -> Tensor<f64> {
        Tensor::new([1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn conv_box_sum_on_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 3, 3], 1.0f64));
        let w = tape.leaf(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
        let spec = ConvSpec::new(3, 1, 1, 1, 1).unwrap();
        let y = tape.conv2d("box", x, w, b, &spec).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0, 1, 1), 9.0, "center counts the full 3x3 window");
        for &(y_, x_) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at(0, 0, y_, x_), 4.0, "corner sees a 2x2 window");
        }
    }

    #[test]
    fn conv_1x1_identity_mapping() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt: Tensor<f64> = rand_tensor([1, 2, 4, 5], &mut rng, -1.0, 1.0);
        let x = tape.leaf(xt.clone());
        // 1x1 kernel selecting each input channel unchanged.
        let w = tape.leaf(Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
        let spec = ConvSpec::new(1, 1, 2, 2, 0).unwrap();
        let y = tape.conv2d("identity", x, w, b, &spec).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = rand_tensor([1, 2, 5, 5], &mut rng, -1.0, 1.0);
        let wt: Tensor<f64> = rand_tensor([3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let bt: Tensor<f64> = rand_tensor([1, 3, 1, 1], &mut rng, -1.0, 1.0);
        let spec = ConvSpec::new(3, 2, 2, 3, 1).unwrap();
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(bt.clone()));
        let y = tape.conv2d("t", xi, wi, bi, &spec).unwrap();
        let expect = oracle::conv2d(&x, &wt, &bt, &spec);
        assert!(max_rel_err(tape.value(y), &expect) < 1e-6);
    }

    #[test]
    fn deconv_output_sizes_double_and_quadruple() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = rand_tensor([1, 2, 5, 7], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);

        let s2 = ConvSpec::new(4, 2, 2, 3, 1).unwrap();
        let w2 = tape.leaf(rand_tensor([2, 3, 4, 4], &mut rng, -1.0, 1.0));
        let b2 = tape.leaf(Tensor::zeros([1, 3, 1, 1]));
        let y2 = tape.deconv2d("x2", xi, w2, b2, &s2).unwrap();
        assert_eq!(tape.value(y2).shape(), [1, 3, 10, 14]);

        let s4 = ConvSpec::new(8, 4, 2, 1, 2).unwrap();
        let w4 = tape.leaf(rand_tensor([2, 1, 8, 8], &mut rng, -1.0, 1.0));
        let b4 = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
        let y4 = tape.deconv2d("x4", xi, w4, b4, &s4).unwrap();
        assert_eq!(tape.value(y4).shape(), [1, 1, 20, 28]);
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Tensor<f64> = rand_tensor([2, 2, 3, 4], &mut rng, -1.0, 1.0);
        let wt: Tensor<f64> = rand_tensor([2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let bt: Tensor<f64> = rand_tensor([1, 3, 1, 1], &mut rng, -1.0, 1.0);
        let spec = ConvSpec::new(4, 2, 2, 3, 1).unwrap();
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(bt.clone()));
        let y = tape.deconv2d("t", xi, wi, bi, &spec).unwrap();
        let expect = oracle::deconv2d(&x, &wt, &bt, &spec);
        assert!(max_rel_err(tape.value(y), &expect) < 1e-6);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(row_tensor(&[2.0, -2.0, -1.0]));
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.2, -0.1]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 0.1, 0.1]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(row_tensor(&[1.0]));
        assert!(tape.leaky_relu(x, 1.0).is_err());
        assert!(tape.leaky_relu(x, -0.1).is_err());
    }

    #[test]
    fn concat_orders_channels_and_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full([1, 2, 1, 2], 1.0f64));
        let b = tape.leaf(Tensor::full([1, 3, 1, 2], 2.0));
        let y = tape.concat_channels("cat", &[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 5, 1, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]
        );
        // Weighted sum that differs per channel: gradient must slice back.
        let coeff = Tensor::new(
            [1, 5, 1, 2],
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0],
        )
        .unwrap();
        let loss = tape.inner_const(y, &coeff).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(a).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(grads.of(b).unwrap().data(), &[3.0, 3.0, 4.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn concat_of_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t: Tensor<f64> = rand_tensor([2, 3, 2, 2], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(t.clone());
        let y = tape.concat_channels("one", &[a]).unwrap();
        assert_eq!(tape.value(y).data(), t.data());
    }

    #[test]
    fn concat_spatial_mismatch_names_layer() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.leaf(Tensor::zeros([1, 1, 2, 3]));
        let err = tape.concat_channels("iconv5", &[a, b]).unwrap_err();
        assert!(err.to_string().contains("iconv5"), "got: {err}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let t: Tensor<f64> = rand_tensor([1, 2, 3, 4], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(t.clone());
        let same = tape.bilinear_resize(a, 3, 4).unwrap();
        assert_eq!(tape.value(same).data(), t.data());

        let c = tape.leaf(Tensor::full([1, 1, 2, 2], 0.7));
        let up = tape.bilinear_resize(c, 5, 9).unwrap();
        assert!(tape.value(up).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn resize_2x_matches_closed_form() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0f64, 2.0, 4.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let y = tape.bilinear_resize(a, 4, 4).unwrap();
        let expect = oracle::bilinear(&x, 4, 4);
        assert!(max_rel_err(tape.value(y), &expect) < 1e-12);
        // Spot values: first row interpolates 0..2 with align-corners thirds.
        let v = tape.value(y);
        assert!((v.at(0, 0, 0, 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.at(0, 0, 3, 3) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn abs_diff_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(row_tensor(&[1.0, 5.0]));
        let b = tape.leaf(row_tensor(&[3.0, 5.0]));
        let y = tape.abs_diff(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0]);
        let equal = tape.abs_diff(a, a).unwrap();
        assert_eq!(tape.value(equal).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_l1_examples() {
        let mut tape = Tape::new();
        let pred = tape.leaf(row_tensor(&[2.0, 3.0, 4.0, 5.0]));
        let target = tape.leaf(row_tensor(&[1.0, 2.0, 3.0, 4.0]));
        let full = tape.leaf(Tensor::full([1, 1, 1, 4], 1.0));
        let same = tape.masked_l1(pred, pred, full).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let off1 = tape.masked_l1(pred, target, full).unwrap();
        assert_eq!(tape.value(off1).item().unwrap(), 1.0);

        // Half mask over errors [1, 2, 3, 4]: hand sum (1+2)/2 = 1.5.
        let t2 = tape.leaf(row_tensor(&[1.0, 1.0, 1.0, 1.0]));
        let p2 = tape.leaf(row_tensor(&[2.0, 3.0, 4.0, 5.0]));
        let half = tape.leaf(Tensor::new([1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let l = tape.masked_l1(p2, t2, half).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.5);
    }

    #[test]
    fn masked_l1_empty_mask_faults() {
        let mut tape = Tape::new();
        let p = tape.leaf(row_tensor(&[1.0]));
        let m = tape.leaf(Tensor::zeros([1, 1, 1, 1]));
        let err = tape.masked_l1(p, p, m).unwrap_err();
        assert!(err.to_string().contains("no valid pixels"));
    }

    #[test]
    fn correlation_row_example() {
        // left [1,2,3], right [4,5,6], D=1 at x=1: d=-1 -> 12, 0 -> 10, +1 -> 8.
        let mut tape = Tape::new();
        let l = tape.leaf(row_tensor(&[1.0, 2.0, 3.0]));
        let r = tape.leaf(row_tensor(&[4.0, 5.0, 6.0]));
        let c = tape.correlation1d(l, r, 1).unwrap();
        let v = tape.value(c);
        assert_eq!(v.shape(), [1, 3, 1, 3]);
        assert_eq!(v.at(0, 0, 0, 1), 12.0);
        assert_eq!(v.at(0, 1, 0, 1), 10.0);
        assert_eq!(v.at(0, 2, 0, 1), 8.0);
    }

    #[test]
    fn correlation_channel_count_is_2d_plus_1() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::full([1, 128, 1, 2], 0.5f64));
        let c = tape.correlation1d(l, l, 40).unwrap();
        assert_eq!(tape.value(c).c(), 81);
        let c2 = tape.correlation1d(l, l, 20).unwrap();
        assert_eq!(tape.value(c2).c(), 41);
    }

    #[test]
    fn self_correlation_peaks_at_zero_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t: Tensor<f64> = rand_tensor([1, 4, 2, 6], &mut rng, 0.5, 1.5);
        let mut tape = Tape::new();
        let l = tape.leaf(t.clone());
        let c = tape.correlation1d(l, l, 2).unwrap();
        let v = tape.value(c);
        // d = 0 channel equals per-pixel mean square of the features.
        for y in 0..2 {
            for x in 0..6 {
                let mean_sq: f64 =
                    (0..4).map(|ch| t.at(0, ch, y, x).powi(2)).sum::<f64>() / 4.0;
                assert!((v.at(0, 2, y, x) - mean_sq).abs() < 1e-12);
            }
        }

        // On a constant (perfectly self-similar) map the zero-displacement
        // score is maximal: off-center channels lose border contributions.
        let flat = tape.leaf(Tensor::full([1, 4, 2, 6], 0.8f64));
        let cf = tape.correlation1d(flat, flat, 2).unwrap();
        let vf = tape.value(cf);
        for y in 0..2 {
            for x in 0..6 {
                for j in 0..5 {
                    assert!(vf.at(0, j, y, x) <= vf.at(0, 2, y, x) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_identity_and_clamped_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let f: Tensor<f64> = rand_tensor([1, 2, 2, 5], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let fi = tape.leaf(f.clone());
        let zero = tape.leaf(Tensor::zeros([1, 1, 2, 5]));
        let same = tape.warp1d(fi, zero).unwrap();
        assert_eq!(tape.value(same).data(), f.data());

        let row = tape.leaf(row_tensor(&[4.0, 5.0, 6.0]));
        let one = tape.leaf(Tensor::full([1, 1, 1, 3], 1.0));
        let shifted = tape.warp1d(row, one).unwrap();
        assert_eq!(tape.value(shifted).data(), &[4.0, 4.0, 5.0]);
    }

    #[test]
    fn warp_reproduces_integer_shift_away_from_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let left: Tensor<f64> = rand_tensor([1, 1, 1, 8], &mut rng, 0.0, 1.0);
        let d = 3usize;
        // right(x) = left(x + d): exact integer construction.
        let right = Tensor::from_fn([1, 1, 1, 8], |_, _, _, x| {
            left.at(0, 0, 0, (x + d).min(7))
        });
        let mut tape = Tape::new();
        let ri = tape.leaf(right);
        let disp = tape.leaf(Tensor::full([1, 1, 1, 8], d as f64));
        let warped = tape.warp1d(ri, disp).unwrap();
        // warp(right, d)(x) = right(x - d) = left(x) for x >= d (in-bounds).
        for x in d..8 {
            assert_eq!(tape.value(warped).at(0, 0, 0, x), left.at(0, 0, 0, x));
        }
    }

    #[test]
    fn reconstruction_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let left: Tensor<f64> = rand_tensor([1, 2, 1, 8], &mut rng, 0.0, 1.0);
        let d = 2usize;
        let right = Tensor::from_fn([1, 2, 1, 8], |_, c, _, x| left.at(0, c, 0, (x + d).min(7)));
        let mut tape = Tape::new();
        let (li, ri) = (tape.leaf(left.clone()), tape.leaf(right.clone()));
        let disp = tape.leaf(Tensor::full([1, 1, 1, 8], d as f64));
        let re = tape.reconstruction_error(li, ri, disp).unwrap();
        for c in 0..2 {
            for x in d..6 {
                // away from both the clamp border and the shift's replicated tail
                assert_eq!(tape.value(re).at(0, c, 0, x), 0.0);
            }
        }

        // Zero disparity on distinct features reduces to |left - right|.
        let zero = tape.leaf(Tensor::zeros([1, 1, 1, 8]));
        let re0 = tape.reconstruction_error(li, ri, zero).unwrap();
        for i in 0..16 {
            assert_eq!(
                tape.value(re0).data()[i],
                (left.data()[i] - right.data()[i]).abs()
            );
        }

        // Random case: composition of the two oracles.
        let f: Tensor<f64> = rand_tensor([1, 3, 2, 6], &mut rng, -1.0, 1.0);
        let g: Tensor<f64> = rand_tensor([1, 3, 2, 6], &mut rng, -1.0, 1.0);
        let dd: Tensor<f64> = rand_tensor([1, 1, 2, 6], &mut rng, -2.0, 7.0);
        let (fi, gi) = (tape.leaf(f.clone()), tape.leaf(g.clone()));
        let di = tape.leaf(dd.clone());
        let re2 = tape.reconstruction_error(fi, gi, di).unwrap();
        let warped = oracle::warp1d(&g, &dd);
        let expect = Tensor::from_fn([1, 3, 2, 6], |n, c, y, x| {
            (f.at(n, c, y, x) - warped.at(n, c, y, x)).abs()
        });
        assert!(max_rel_err(tape.value(re2), &expect) < 1e-12);
    }

    #[test]
    fn backward_linear_case_and_accumulation() {
        // loss = sum(w * x) elementwise: grad(w) = x.
        let x = row_tensor(&[2.0, -3.0, 4.0]);
        let mut tape = Tape::new();
        let w = tape.leaf(row_tensor(&[1.0, 1.0, 1.0]));
        let loss = tape.inner_const(w, &x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap().data(), x.data());

        // Accumulation: routing the same gradients twice doubles param grads.
        let mut set = ParamSet::new();
        let id = set.add("w", row_tensor(&[1.0, 1.0, 1.0])).unwrap();
        let mut tape2 = Tape::new();
        let wp = tape2.param(&set, id);
        let loss2 = tape2.inner_const(wp, &x).unwrap();
        let g2 = tape2.backward(loss2).unwrap();
        tape2.accumulate_param_grads(&g2, &mut set);
        tape2.accumulate_param_grads(&g2, &mut set);
        assert_eq!(set.get(id).grad.data(), &[4.0, -6.0, 8.0]);
    }

    #[test]
    fn backward_zero_loss_path_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(row_tensor(&[1.0, 2.0]));
        let zero = tape.scale(x, 0.0).unwrap();
        let loss = tape.sum_all(zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(row_tensor(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(row_tensor(&[0.0, 1.0]));
        let y = tape.leaf(row_tensor(&[f64::INFINITY, 1.0]));
        // inf - inf is NaN in abs_diff of scaled copies
        let inf = tape.scale(y, 1.0);
        assert!(inf.is_err() || tape.abs_diff(x, inf.unwrap()).is_err());
    }

    #[test]
    fn same_inputs_same_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x: Tensor<f32> = rand_tensor([1, 3, 16, 24], &mut rng, -1.0, 1.0);
        let w: Tensor<f32> = rand_tensor([4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let b: Tensor<f32> = rand_tensor([1, 4, 1, 1], &mut rng, -1.0, 1.0);
        let spec = ConvSpec::new(3, 1, 3, 4, 1).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d("det", xi, wi, bi, &spec).unwrap();
            tape.value(y).to_vec()
        };
        let (a, b2) = (run(), run());
        assert!(a.iter().zip(&b2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
