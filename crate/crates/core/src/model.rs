//! The three-part disparity network: shared feature stem, initial disparity
//! estimation (DES), and feature-constancy disparity refinement (DRS) with
//! weight-shared iterative refinement.
//!
//! Layer geometry follows the reference architecture table row by row.
//! Hidden channel counts scale by `channel_mult` (prediction heads stay at
//! one channel, correlation volumes keep their 2D+1 channels); left/right
//! stem weights are shared. Every conv/deconv gets leaky-relu(0.1) except
//! the disparity/residual heads, which stay linear so residuals can be
//! negative.

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{he_normal, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Ablation switches over the refinement inputs and the stem skip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Drop both feature-constancy terms from the refinement input.
    NoFcNoRe,
    /// Drop the reconstruction-error term.
    NoRe,
    /// Drop the fine correlation term.
    NoFc,
    /// Drop the initial disparity from the refinement input.
    NoDispIn,
    /// Replace the multi-scale fusion features with the first-scale
    /// upsampled features only.
    SingleScaleSkip,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_fc_no_re" => Ok(Variant::NoFcNoRe),
            "no_re" => Ok(Variant::NoRe),
            "no_fc" => Ok(Variant::NoFc),
            "no_disp_in" => Ok(Variant::NoDispIn),
            "single_scale_skip" => Ok(Variant::SingleScaleSkip),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFcNoRe => "no_fc_no_re",
            Variant::NoRe => "no_re",
            Variant::NoFc => "no_fc",
            Variant::NoDispIn => "no_disp_in",
            Variant::SingleScaleSkip => "single_scale_skip",
        }
    }

    fn uses_re(&self) -> bool {
        !matches!(self, Variant::NoRe | Variant::NoFcNoRe)
    }

    fn uses_fc(&self) -> bool {
        !matches!(self, Variant::NoFc | Variant::NoFcNoRe)
    }

    fn uses_disp_in(&self) -> bool {
        !matches!(self, Variant::NoDispIn)
    }

    fn multi_scale_fusion(&self) -> bool {
        !matches!(self, Variant::SingleScaleSkip)
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Multiplier in (0, 1] applied to every hidden channel count.
    pub channel_mult: f64,
    /// Max displacement of the coarse correlation (81 channels at 40).
    pub d_coarse: usize,
    /// Max displacement of the fine correlation (41 channels at 20).
    pub d_fine: usize,
    /// Refinement passes wired at build time; 0 builds the DES-only model.
    pub refine_iters: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_mult: 1.0,
            d_coarse: 40,
            d_fine: 20,
            refine_iters: 1,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.channel_mult > 0.0 && self.channel_mult <= 1.0) {
            return Err(Error::Config(format!(
                "channel_mult {} outside (0, 1]",
                self.channel_mult
            )));
        }
        Ok(())
    }

    /// Round-half-up channel scaling with a floor of one channel.
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_mult) + 0.5).floor().max(1.0) as usize
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig { variant, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: &'static str,
    pub kind: LayerKind,
    pub spec: ConvSpec,
    pub activated: bool,
    weight: usize,
    bias: usize,
}

/// Stem outputs for one stereo pair. `fuse_*` are the full-resolution skip
/// features (multi-scale fusion, or the single-scale variant's first-level
/// upsample); `c1*` feed the fine correlation when that branch exists.
#[derive(Debug)]
pub struct SharedFeatures {
    pub conv1a: NodeId,
    pub conv1b: NodeId,
    pub conv2a: NodeId,
    pub conv2b: NodeId,
    pub fuse_a: NodeId,
    pub fuse_b: NodeId,
    pub c1a: Option<NodeId>,
    pub c1b: Option<NodeId>,
}

/// One refinement pass: residuals at 1/4, 1/2 and full resolution plus the
/// refined maps they imply (refined0 = disp_in + res0 exactly).
#[derive(Debug)]
pub struct RefineStep {
    pub res2: NodeId,
    pub res1: NodeId,
    pub res0: NodeId,
    pub refined2: NodeId,
    pub refined1: NodeId,
    pub refined0: NodeId,
}

/// Disparity predictions of one forward pass. `disps[k]` sits at scale
/// 1/2^k of the input; `refined` holds one entry per refinement pass.
#[derive(Debug)]
pub struct DisparityPyramid {
    pub disps: [NodeId; 7],
    pub refined: Vec<RefineStep>,
}

impl DisparityPyramid {
    /// Full-resolution output: last refinement, or disp0 when none ran.
    pub fn final_output(&self) -> NodeId {
        self.refined.last().map(|r| r.refined0).unwrap_or(self.disps[0])
    }
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
    layers: Vec<Layer>,
    by_name: HashMap<&'static str, usize>,
}

struct Builder<S: Scalar> {
    params: ParamSet<S>,
    layers: Vec<Layer>,
    by_name: HashMap<&'static str, usize>,
    seed: u64,
}

impl<S: Scalar> Builder<S> {
    fn add(
        &mut self,
        name: &'static str,
        kind: LayerKind,
        k: usize,
        s: usize,
        pad: usize,
        cin: usize,
        cout: usize,
        activated: bool,
    ) -> Result<()> {
        let spec = ConvSpec::new(k, s, cin, cout, pad)?;
        let w_shape = match kind {
            LayerKind::Conv => [cout, cin, k, k],
            LayerKind::Deconv => [cin, cout, k, k],
        };
        let w_name = format!("{name}.weight");
        let weight = self.params.add(
            w_name.clone(),
            he_normal(w_shape, cin * k * k, self.seed, &w_name),
        )?;
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        self.by_name.insert(name, self.layers.len());
        self.layers.push(Layer {
            name,
            kind,
            spec,
            activated,
            weight,
            bias,
        });
        Ok(())
    }

    fn conv(
        &mut self,
        name: &'static str,
        k: usize,
        s: usize,
        cin: usize,
        cout: usize,
    ) -> Result<()> {
        self.add(name, LayerKind::Conv, k, s, k / 2, cin, cout, true)
    }

    /// Linear prediction head (no activation).
    fn head(&mut self, name: &'static str, cin: usize) -> Result<()> {
        self.add(name, LayerKind::Conv, 3, 1, 1, cin, 1, false)
    }

    fn deconv(
        &mut self,
        name: &'static str,
        k: usize,
        s: usize,
        pad: usize,
        cin: usize,
        cout: usize,
    ) -> Result<()> {
        self.add(name, LayerKind::Deconv, k, s, pad, cin, cout, true)
    }
}

impl<S: Scalar> Model<S> {
    /// Instantiate every layer and run a wiring dry-run on a 64-divisible
    /// input, so concat mistakes surface here with the offending row name.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let v = config.variant;
        let mut b = Builder {
            params: ParamSet::new(),
            layers: Vec::new(),
            by_name: HashMap::new(),
            seed: config.seed,
        };

        // Stem (siamese: one parameter set serves both images).
        b.conv("conv1a", 7, 2, 3, c.scaled(64))?;
        b.deconv("up_1a", 4, 2, 1, c.scaled(64), c.scaled(32))?;
        b.conv("conv2a", 5, 2, c.scaled(64), c.scaled(128))?;
        if v.multi_scale_fusion() {
            b.deconv("up_2a", 8, 4, 2, c.scaled(128), c.scaled(32))?;
            b.conv("up_1a2a", 1, 1, 2 * c.scaled(32), c.scaled(32))?;
        }

        // Initial disparity estimation.
        let corr_c = 2 * c.d_coarse + 1;
        b.conv("conv_redir", 1, 1, c.scaled(128), c.scaled(64))?;
        b.conv("conv3", 3, 2, corr_c + c.scaled(64), c.scaled(256))?;
        b.conv("conv3_1", 3, 1, c.scaled(256), c.scaled(256))?;
        b.conv("conv4", 3, 2, c.scaled(256), c.scaled(512))?;
        b.conv("conv4_1", 3, 1, c.scaled(512), c.scaled(512))?;
        b.conv("conv5", 3, 2, c.scaled(512), c.scaled(512))?;
        b.conv("conv5_1", 3, 1, c.scaled(512), c.scaled(512))?;
        b.conv("conv6", 3, 2, c.scaled(512), c.scaled(1024))?;
        b.conv("conv6_1", 3, 1, c.scaled(1024), c.scaled(1024))?;
        b.head("disp6", c.scaled(1024))?;
        b.deconv("uconv5", 4, 2, 1, c.scaled(1024), c.scaled(512))?;
        b.conv("iconv5", 3, 1, c.scaled(512) + 1 + c.scaled(512), c.scaled(512))?;
        b.head("disp5", c.scaled(512))?;
        b.deconv("uconv4", 4, 2, 1, c.scaled(512), c.scaled(256))?;
        b.conv("iconv4", 3, 1, c.scaled(256) + 1 + c.scaled(512), c.scaled(256))?;
        b.head("disp4", c.scaled(256))?;
        b.deconv("uconv3", 4, 2, 1, c.scaled(256), c.scaled(128))?;
        b.conv("iconv3", 3, 1, c.scaled(128) + 1 + c.scaled(256), c.scaled(128))?;
        b.head("disp3", c.scaled(128))?;
        b.deconv("uconv2", 4, 2, 1, c.scaled(128), c.scaled(64))?;
        b.conv("iconv2", 3, 1, c.scaled(64) + 1 + c.scaled(128), c.scaled(64))?;
        b.head("disp2", c.scaled(64))?;
        b.deconv("uconv1", 4, 2, 1, c.scaled(64), c.scaled(32))?;
        b.conv("iconv1", 3, 1, c.scaled(32) + 1 + c.scaled(64), c.scaled(32))?;
        b.head("disp1", c.scaled(32))?;
        b.deconv("uconv0", 4, 2, 1, c.scaled(32), c.scaled(32))?;
        b.conv("iconv0", 3, 1, c.scaled(32) + 1 + c.scaled(32), c.scaled(32))?;
        b.head("disp0", c.scaled(32))?;

        // Disparity refinement (absent in the DES-only configuration).
        if config.refine_iters > 0 {
            let fine_c = 2 * c.d_fine + 1;
            let r_conv0_in = if v.uses_re() { c.scaled(32) } else { 0 }
                + if v.uses_disp_in() { 1 } else { 0 }
                + c.scaled(32);
            b.conv("r_conv0", 3, 1, r_conv0_in, c.scaled(32))?;
            b.conv("r_conv1", 3, 2, c.scaled(32), c.scaled(64))?;
            if v.uses_fc() {
                b.conv("c_conv1a", 3, 1, c.scaled(64), c.scaled(16))?;
            }
            let r_conv1_1_in = c.scaled(64) + if v.uses_fc() { fine_c } else { 0 };
            b.conv("r_conv1_1", 3, 1, r_conv1_1_in, c.scaled(64))?;
            b.conv("r_conv2", 3, 2, c.scaled(64), c.scaled(128))?;
            b.conv("r_conv2_1", 3, 1, c.scaled(128), c.scaled(128))?;
            b.head("r_res2", c.scaled(128))?;
            b.deconv("r_uconv1", 4, 2, 1, c.scaled(128), c.scaled(64))?;
            b.conv("r_iconv1", 3, 1, c.scaled(64) + 1 + c.scaled(64), c.scaled(64))?;
            b.head("r_res1", c.scaled(64))?;
            b.deconv("r_uconv0", 4, 2, 1, c.scaled(64), c.scaled(32))?;
            b.conv("r_iconv0", 3, 1, c.scaled(32) + 1 + c.scaled(32), c.scaled(32))?;
            b.head("r_res0", c.scaled(32))?;
        }

        let model = Model {
            config,
            params: b.params,
            layers: b.layers,
            by_name: b.by_name,
        };
        model.dry_run()?;
        Ok(model)
    }

    /// Wiring check: one forward pass on a zero image at the smallest legal
    /// size, with at most one refinement pass.
    fn dry_run(&self) -> Result<()> {
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 64, 64]);
        let iters = self.config.refine_iters.min(1);
        self.forward(&mut tape, &img, &img, iters)?;
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.by_name
            .get(name)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::Config(format!("model has no layer `{name}`")))
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter()
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.count_scalars()
    }

    fn apply(&self, tape: &mut Tape<S>, name: &str, input: NodeId) -> Result<NodeId> {
        let layer = self.layer(name)?;
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        let y = match layer.kind {
            LayerKind::Conv => tape.conv2d(layer.name, input, w, b, &layer.spec)?,
            LayerKind::Deconv => tape.deconv2d(layer.name, input, w, b, &layer.spec)?,
        };
        if layer.activated {
            tape.leaky_relu(y, S::of_f64(LEAKY_SLOPE))
        } else {
            Ok(y)
        }
    }

    /// Multi-scale shared features for both images (shared weights).
    pub fn stem_forward(
        &self,
        tape: &mut Tape<S>,
        left: NodeId,
        right: NodeId,
    ) -> Result<SharedFeatures> {
        let ls = tape.value(left).shape();
        let rs = tape.value(right).shape();
        if ls != rs {
            return Err(Error::shape(
                "stem",
                format!("left {ls:?} vs right {rs:?}"),
            ));
        }
        if ls[1] != 3 {
            return Err(Error::shape(
                "stem",
                format!("expected 3-channel images, got {} channels", ls[1]),
            ));
        }
        if ls[2] % 64 != 0 || ls[3] % 64 != 0 {
            return Err(Error::shape(
                "stem",
                format!(
                    "input {}x{} not divisible by 64; pad images to a multiple of 64 first",
                    ls[2], ls[3]
                ),
            ));
        }

        let conv1a = self.apply(tape, "conv1a", left)?;
        let conv1b = self.apply(tape, "conv1a", right)?;
        let conv2a = self.apply(tape, "conv2a", conv1a)?;
        let conv2b = self.apply(tape, "conv2a", conv1b)?;
        let up_1a = self.apply(tape, "up_1a", conv1a)?;
        let up_1b = self.apply(tape, "up_1a", conv1b)?;

        let (fuse_a, fuse_b) = if self.config.variant.multi_scale_fusion() {
            let up_2a = self.apply(tape, "up_2a", conv2a)?;
            let up_2b = self.apply(tape, "up_2a", conv2b)?;
            let cat_a = tape.concat_channels("up_1a2a", &[up_1a, up_2a])?;
            let cat_b = tape.concat_channels("up_1b2b", &[up_1b, up_2b])?;
            (
                self.apply(tape, "up_1a2a", cat_a)?,
                self.apply(tape, "up_1a2a", cat_b)?,
            )
        } else {
            (up_1a, up_1b)
        };

        let (c1a, c1b) = if self.has_layer("c_conv1a") {
            (
                Some(self.apply(tape, "c_conv1a", conv1a)?),
                Some(self.apply(tape, "c_conv1a", conv1b)?),
            )
        } else {
            (None, None)
        };

        Ok(SharedFeatures {
            conv1a,
            conv1b,
            conv2a,
            conv2b,
            fuse_a,
            fuse_b,
            c1a,
            c1b,
        })
    }

    /// Encoder-decoder over the coarse correlation volume; emits one
    /// disparity map per scale, finest last. `disps[k]` is at scale 1/2^k.
    pub fn des_forward(&self, tape: &mut Tape<S>, feats: &SharedFeatures) -> Result<[NodeId; 7]> {
        let corr = tape.correlation1d(feats.conv2a, feats.conv2b, self.config.d_coarse)?;
        let redir = self.apply(tape, "conv_redir", feats.conv2a)?;
        let cat = tape.concat_channels("conv3", &[corr, redir])?;
        let conv3 = self.apply(tape, "conv3", cat)?;
        let conv3_1 = self.apply(tape, "conv3_1", conv3)?;
        let conv4 = self.apply(tape, "conv4", conv3_1)?;
        let conv4_1 = self.apply(tape, "conv4_1", conv4)?;
        let conv5 = self.apply(tape, "conv5", conv4_1)?;
        let conv5_1 = self.apply(tape, "conv5_1", conv5)?;
        let conv6 = self.apply(tape, "conv6", conv5_1)?;
        let conv6_1 = self.apply(tape, "conv6_1", conv6)?;

        let disp6 = self.apply(tape, "disp6", conv6_1)?;

        let levels: [(&str, &str, &str, NodeId); 6] = [
            ("uconv5", "iconv5", "disp5", conv5_1),
            ("uconv4", "iconv4", "disp4", conv4_1),
            ("uconv3", "iconv3", "disp3", conv3_1),
            ("uconv2", "iconv2", "disp2", feats.conv2a),
            ("uconv1", "iconv1", "disp1", feats.conv1a),
            ("uconv0", "iconv0", "disp0", feats.fuse_a),
        ];

        let mut disps = [disp6; 7];
        let mut top = conv6_1;
        let mut prev_disp = disp6;
        for (i, (uconv, iconv, disp, skip)) in levels.into_iter().enumerate() {
            let up = self.apply(tape, uconv, top)?;
            let [_, _, h, w] = tape.value(up).shape();
            let disp_up = tape.bilinear_resize(prev_disp, h, w)?;
            let cat = tape.concat_channels(iconv, &[up, disp_up, skip])?;
            top = self.apply(tape, iconv, cat)?;
            prev_disp = self.apply(tape, disp, top)?;
            disps[5 - i] = prev_disp;
        }
        Ok(disps)
    }

    /// One refinement pass from `disp_in` (full resolution). `fc` is the
    /// fine correlation volume, computed once per forward pass since it does
    /// not depend on the disparity.
    pub fn drs_forward(
        &self,
        tape: &mut Tape<S>,
        feats: &SharedFeatures,
        fc: Option<NodeId>,
        disp_in: NodeId,
    ) -> Result<RefineStep> {
        let v = self.config.variant;
        let mut parts: Vec<NodeId> = Vec::new();
        if v.uses_re() {
            parts.push(tape.reconstruction_error(feats.fuse_a, feats.fuse_b, disp_in)?);
        }
        if v.uses_disp_in() {
            parts.push(disp_in);
        }
        parts.push(feats.fuse_a);
        let cat0 = tape.concat_channels("r_conv0", &parts)?;
        let r_conv0 = self.apply(tape, "r_conv0", cat0)?;
        let r_conv1 = self.apply(tape, "r_conv1", r_conv0)?;

        let cat1 = match fc {
            Some(fc) => tape.concat_channels("r_conv1_1", &[r_conv1, fc])?,
            None => r_conv1,
        };
        let r_conv1_1 = self.apply(tape, "r_conv1_1", cat1)?;
        let r_conv2 = self.apply(tape, "r_conv2", r_conv1_1)?;
        let r_conv2_1 = self.apply(tape, "r_conv2_1", r_conv2)?;

        let res2 = self.apply(tape, "r_res2", r_conv2_1)?;
        let r_uconv1 = self.apply(tape, "r_uconv1", r_conv2_1)?;
        let [_, _, h1, w1] = tape.value(r_uconv1).shape();
        let res2_up = tape.bilinear_resize(res2, h1, w1)?;
        let cat_i1 = tape.concat_channels("r_iconv1", &[r_uconv1, res2_up, r_conv1_1])?;
        let r_iconv1 = self.apply(tape, "r_iconv1", cat_i1)?;

        let res1 = self.apply(tape, "r_res1", r_iconv1)?;
        let r_uconv0 = self.apply(tape, "r_uconv0", r_iconv1)?;
        let [_, _, h0, w0] = tape.value(r_uconv0).shape();
        let res1_up = tape.bilinear_resize(res1, h0, w0)?;
        let cat_i0 = tape.concat_channels("r_iconv0", &[r_uconv0, res1_up, r_conv0])?;
        let r_iconv0 = self.apply(tape, "r_iconv0", cat_i0)?;
        let res0 = self.apply(tape, "r_res0", r_iconv0)?;

        let refined0 = tape.add(disp_in, res0)?;
        let [_, _, rh2, rw2] = tape.value(res2).shape();
        let disp_q = tape.bilinear_resize(disp_in, rh2, rw2)?;
        let refined2 = tape.add(disp_q, res2)?;
        let [_, _, rh1, rw1] = tape.value(res1).shape();
        let disp_h = tape.bilinear_resize(disp_in, rh1, rw1)?;
        let refined1 = tape.add(disp_h, res1)?;

        Ok(RefineStep {
            res2,
            res1,
            res0,
            refined2,
            refined1,
            refined0,
        })
    }

    /// Full forward pass: stem once, DES once, then `iters` refinement
    /// passes reusing the identical refinement parameters each time.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        left: &Tensor<S>,
        right: &Tensor<S>,
        iters: usize,
    ) -> Result<DisparityPyramid> {
        if iters > 0 && self.config.refine_iters == 0 {
            return Err(Error::Config(
                "model was built without the refinement sub-network; rebuild with refine_iters >= 1"
                    .to_string(),
            ));
        }
        let l = tape.leaf(left.clone());
        let r = tape.leaf(right.clone());
        let feats = self.stem_forward(tape, l, r)?;
        let disps = self.des_forward(tape, &feats)?;

        let fc = match (feats.c1a, feats.c1b) {
            (Some(a), Some(b)) if iters > 0 => {
                Some(tape.correlation1d(a, b, self.config.d_fine)?)
            }
            _ => None,
        };

        let mut refined = Vec::with_capacity(iters);
        let mut disp_in = disps[0];
        for _ in 0..iters {
            let step = self.drs_forward(tape, &feats, fc, disp_in)?;
            disp_in = step.refined0;
            refined.push(step);
        }
        Ok(DisparityPyramid { disps, refined })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channel_mult: 1.0 / 8.0,
            refine_iters: 1,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_conv_param_count() {
        // One 3x3 conv mapping 2 -> 4 channels with bias: 2*4*9 + 4 = 76.
        let mut b = Builder::<f32> {
            params: ParamSet::new(),
            layers: Vec::new(),
            by_name: HashMap::new(),
            seed: 0,
        };
        b.conv("conv3_1", 3, 1, 2, 4).unwrap();
        assert_eq!(b.params.count_scalars(), 76);
    }

    #[test]
    fn conv3_input_channels_at_full_width() {
        let m: Model<f32> = Model::build(ModelConfig {
            refine_iters: 0,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(m.layer("conv3").unwrap().spec.in_channels, 145);
        assert_eq!(m.layer("iconv5").unwrap().spec.in_channels, 1025);
        assert_eq!(m.layer("iconv0").unwrap().spec.in_channels, 65);
    }

    #[test]
    fn tiny_model_builds_and_runs_forward() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 64, 128]);
        let pyr = m.forward(&mut tape, &img, &img, 1).unwrap();
        assert_eq!(tape.value(pyr.final_output()).shape(), [1, 1, 64, 128]);
        assert_eq!(tape.value(pyr.disps[6]).shape(), [1, 1, 1, 2]);
    }

    #[test]
    fn non_divisible_input_instructs_padding() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 60, 128]);
        let err = m.forward(&mut tape, &img, &img, 1).unwrap_err();
        assert!(err.to_string().contains("64"), "got: {err}");
    }

    #[test]
    fn siamese_symmetry_on_identical_inputs() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
            ((c + 1) * (y * 64 + x)) as f32 / 200.0
        });
        let l = tape.leaf(img.clone());
        let r = tape.leaf(img);
        let feats = m.stem_forward(&mut tape, l, r).unwrap();
        assert_eq!(
            tape.value(feats.conv1a).data(),
            tape.value(feats.conv1b).data()
        );
        assert_eq!(
            tape.value(feats.fuse_a).data(),
            tape.value(feats.fuse_b).data()
        );
    }

    #[test]
    fn swapping_inputs_changes_output() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let a = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
            ((c * 64 + y) * 64 + x) as f32 / 20000.0
        });
        let b = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
            ((c * 64 + y) * 64 + (63 - x)) as f32 / 20000.0
        });
        let run = |l: &Tensor<f32>, r: &Tensor<f32>| {
            let mut tape = Tape::new();
            let pyr = m.forward(&mut tape, l, r, 0).unwrap();
            tape.value(pyr.disps[0]).to_vec()
        };
        assert_ne!(run(&a, &b), run(&b, &a));
    }

    #[test]
    fn refined_minus_input_equals_residual_exactly() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
            (c as f32 * 0.1) + ((y ^ x) & 15) as f32 / 15.0
        });
        let pyr = m.forward(&mut tape, &img, &img, 2).unwrap();
        let mut disp_in = pyr.disps[0];
        for step in &pyr.refined {
            let d = tape.value(disp_in).data();
            let res = tape.value(step.res0).data();
            let refined = tape.value(step.refined0).data();
            for i in 0..d.len() {
                assert_eq!(refined[i], d[i] + res[i]);
            }
            disp_in = step.refined0;
        }
    }

    #[test]
    fn refinement_iterations_add_no_parameters() {
        let base = tiny_config();
        let counts: Vec<usize> = [1usize, 2, 3]
            .iter()
            .map(|&iters| {
                let m: Model<f32> = Model::build(ModelConfig {
                    refine_iters: iters,
                    ..base.clone()
                })
                .unwrap();
                m.count_params()
            })
            .collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
    }

    #[test]
    fn variant_channel_arithmetic() {
        let base = ModelConfig::default();
        let no_fc: Model<f32> =
            Model::build(base.with_variant(Variant::NoFc)).unwrap();
        assert_eq!(no_fc.layer("r_conv1_1").unwrap().spec.in_channels, 64);
        assert!(!no_fc.has_layer("c_conv1a"));

        let no_disp: Model<f32> =
            Model::build(base.with_variant(Variant::NoDispIn)).unwrap();
        assert_eq!(no_disp.layer("r_conv0").unwrap().spec.in_channels, 64);

        let no_re: Model<f32> = Model::build(base.with_variant(Variant::NoRe)).unwrap();
        assert_eq!(no_re.layer("r_conv0").unwrap().spec.in_channels, 33);

        let full: Model<f32> = Model::build(base.clone()).unwrap();
        assert_eq!(full.layer("r_conv0").unwrap().spec.in_channels, 65);
        assert_eq!(full.layer("r_conv1_1").unwrap().spec.in_channels, 105);
        assert_eq!(full.layer("r_iconv1").unwrap().spec.in_channels, 129);
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(Variant::parse("no_everything").is_err());
        assert_eq!(Variant::parse("no_re").unwrap(), Variant::NoRe);
    }

    #[test]
    fn single_scale_skip_drops_fusion_layers() {
        let m: Model<f32> = Model::build(
            ModelConfig {
                channel_mult: 0.25,
                refine_iters: 1,
                seed: 1,
                ..ModelConfig::default()
            }
            .with_variant(Variant::SingleScaleSkip),
        )
        .unwrap();
        assert!(!m.has_layer("up_2a"));
        assert!(!m.has_layer("up_1a2a"));
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 64, 64]);
        m.forward(&mut tape, &img, &img, 1).unwrap();
    }

    #[test]
    fn des_only_model_rejects_refinement_request() {
        let m: Model<f32> = Model::build(ModelConfig {
            channel_mult: 0.125,
            refine_iters: 0,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 64, 64]);
        assert!(m.forward(&mut tape, &img, &img, 0).is_ok());
        let mut tape2 = Tape::new();
        assert!(m.forward(&mut tape2, &img, &img, 1).is_err());
    }

    #[test]
    fn stem_scale_audit_on_tall_input() {
        let m: Model<f32> = Model::build(tiny_config()).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros([1, 3, 128, 192]);
        let l = tape.leaf(img.clone());
        let r = tape.leaf(img);
        let feats = m.stem_forward(&mut tape, l, r).unwrap();
        // conv2 sits at exactly quarter resolution; fusion at full.
        assert_eq!(tape.value(feats.conv2a).shape()[2..], [32, 48]);
        assert_eq!(tape.value(feats.fuse_a).shape()[2..], [128, 192]);
    }
}
