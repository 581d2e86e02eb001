//! Whole-network assembly: configuration, parameter registry, and the
//! forward pipeline from RGB image to metric depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conv2dParams, FeaturePyramid};
use crate::bins::{predict_bin_widths, BcpParams, BinSpec};
use crate::decoder::{
    decode, pqi_init, BaselineParams, FinalResidual, FusionMode, PixelQueryMap, PqiParams,
    SamParams, StageConfig, StageParams,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

fn default_final_residual() -> FinalResidual {
    FinalResidual::Literal
}

/// Architecture hyper-parameters. The defaults are the desk-scale preset;
/// [`ModelConfig::paper_scale`] holds the full-size schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder channels C1..C4, strictly increasing.
    #[serde(default = "ModelConfig::default_backbone_channels")]
    pub backbone_channels: Vec<usize>,
    /// Decoder stage widths D1..D4 (finest first).
    #[serde(default = "ModelConfig::default_decoder_channels")]
    pub decoder_channels: Vec<usize>,
    /// Attention heads H1..H4 per stage.
    #[serde(default = "ModelConfig::default_heads")]
    pub heads: Vec<usize>,
    #[serde(default = "ModelConfig::default_window_size")]
    pub window_size: usize,
    #[serde(default = "ModelConfig::default_n_bins")]
    pub n_bins: usize,
    #[serde(default = "ModelConfig::default_d_min")]
    pub d_min: f64,
    #[serde(default = "ModelConfig::default_d_max")]
    pub d_max: f64,
    #[serde(default = "ModelConfig::default_fusion")]
    pub fusion: FusionMode,
    #[serde(default = "default_final_residual")]
    pub final_residual: FinalResidual,
    /// Width of the initial pixel queries (defaults to D4 / 2).
    #[serde(default = "ModelConfig::default_pqi_channels")]
    pub pqi_channels: usize,
    /// Hidden width of the bin-width MLP.
    #[serde(default = "ModelConfig::default_bcp_hidden")]
    pub bcp_hidden: usize,
}

impl ModelConfig {
    fn default_backbone_channels() -> Vec<usize> {
        vec![16, 32, 64, 128]
    }
    fn default_decoder_channels() -> Vec<usize> {
        vec![16, 32, 64, 128]
    }
    fn default_heads() -> Vec<usize> {
        vec![2, 4, 8, 16]
    }
    fn default_window_size() -> usize {
        7
    }
    fn default_n_bins() -> usize {
        64
    }
    fn default_d_min() -> f64 {
        1e-3
    }
    fn default_d_max() -> f64 {
        10.0
    }
    fn default_fusion() -> FusionMode {
        FusionMode::Sam
    }
    fn default_pqi_channels() -> usize {
        64
    }
    fn default_bcp_hidden() -> usize {
        256
    }

    /// Desk-scale preset used by the self-checks and the overfit run.
    pub fn toy() -> Self {
        Self::default()
    }

    /// Full-size schedule: decoder widths 128/256/512/1024 with 4/8/16/32
    /// heads, 256 bins, query width 512.
    pub fn paper_scale() -> Self {
        ModelConfig {
            backbone_channels: vec![192, 384, 768, 1536],
            decoder_channels: vec![128, 256, 512, 1024],
            heads: vec![4, 8, 16, 32],
            window_size: 7,
            n_bins: 256,
            d_min: 1e-3,
            d_max: 10.0,
            fusion: FusionMode::Sam,
            final_residual: FinalResidual::Literal,
            pqi_channels: 512,
            bcp_hidden: 256,
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            channels: self.decoder_channels.clone(),
            heads: self.heads.clone(),
            window: self.window_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_config().validate()?;
        if self.backbone_channels.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs 4 channel counts, got {:?}",
                self.backbone_channels
            )));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "invalid depth range [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.pqi_channels == 0 || self.bcp_hidden == 0 {
            return Err(Error::Config("pqi_channels and bcp_hidden must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: Self::default_backbone_channels(),
            decoder_channels: Self::default_decoder_channels(),
            heads: Self::default_heads(),
            window_size: Self::default_window_size(),
            n_bins: Self::default_n_bins(),
            d_min: Self::default_d_min(),
            d_max: Self::default_d_max(),
            fusion: Self::default_fusion(),
            final_residual: default_final_residual(),
            pqi_channels: Self::default_pqi_channels(),
            bcp_hidden: Self::default_bcp_hidden(),
        }
    }
}

/// Everything one forward pass produces, kept on the graph so the loss can
/// reach every parameter.
pub struct ForwardOutput<T: Scalar> {
    pub pyramid: FeaturePyramid<T>,
    pub q_init: PixelQueryMap<T>,
    pub bins: BinSpec<T>,
    /// Per-pixel bin probabilities at 1/4 scale, `[H/4, W/4, n_bins]`.
    pub p_bins: Tensor<T>,
    /// Composed metric depth at 1/4 scale, `[H/4, W/4]`.
    pub depth: Tensor<T>,
}

#[derive(Clone)]
pub struct DepthModel<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub pqi: PqiParams<T>,
    pub bcp: BcpParams<T>,
    /// Stage fusion weights, index 0 = finest (stage 1).
    pub stages: Vec<StageParams<T>>,
    pub head: Conv2dParams<T>,
}

impl<T: Scalar> std::fmt::Debug for DepthModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DepthModel({} parameters, {:?})", self.parameter_count(), self.config.fusion)
    }
}

impl<T: Scalar> DepthModel<T> {
    /// Deterministic initialization from a seed: weights uniform on
    /// Xavier bounds, biases and layer-norm betas zero, gammas one,
    /// bias tables normal with sigma 0.02.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone_channels, &mut rng)?;
        let pqi = PqiParams::new("pqi", config.backbone_channels[3], config.pqi_channels, &mut rng);
        let bcp = BcpParams::new("bcp", config.pqi_channels, config.bcp_hidden, config.n_bins, &mut rng);
        let cfg = config.stage_config();
        let mut stages = Vec::with_capacity(4);
        for stage in 1..=4 {
            let dim = cfg.channels_at(stage);
            let q_in = if stage == 4 {
                config.pqi_channels
            } else {
                cfg.channels_at(stage + 1) / 4
            };
            let e_in = config.backbone_channels[stage - 1];
            let name = format!("decoder.sam{stage}");
            stages.push(match config.fusion {
                FusionMode::Sam => StageParams::Sam(SamParams::new(
                    &name,
                    q_in,
                    e_in,
                    dim,
                    cfg.heads_at(stage),
                    cfg.window,
                    &mut rng,
                )),
                FusionMode::AddConv => StageParams::AddConv(BaselineParams::new(
                    &format!("decoder.fuse{stage}"),
                    q_in,
                    e_in,
                    dim,
                    false,
                    &mut rng,
                )),
                FusionMode::CatConv => StageParams::CatConv(BaselineParams::new(
                    &format!("decoder.fuse{stage}"),
                    q_in,
                    e_in,
                    dim,
                    true,
                    &mut rng,
                )),
            });
        }
        let head = Conv2dParams::new("decoder.head", cfg.channels_at(1), config.n_bins, &mut rng);
        Ok(DepthModel { config, backbone, pqi, bcp, stages, head })
    }

    /// Full pipeline: encode, initialize queries, predict bins, decode bin
    /// probabilities, compose depth at 1/4 scale.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let pyramid = self.backbone.encode(image)?;
        let q_init = pqi_init(&pyramid.e4, &self.pqi)?;
        let bins = predict_bin_widths(&q_init.q, &self.bcp, self.config.d_min, self.config.d_max)?;
        let p_bins = decode(
            &pyramid,
            &q_init,
            &self.stages,
            &self.config.stage_config(),
            &self.head,
            self.config.final_residual,
        )?;
        let depth = crate::bins::compose_depth(&p_bins, &bins.centers)?;
        Ok(ForwardOutput { pyramid, q_init, bins, p_bins, depth })
    }

    /// Depth at input resolution: the 1/4-scale prediction bilinearly
    /// upsampled by 4 (stays differentiable for training supervision).
    pub fn forward_depth_full(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(image)?;
        let (h4, w4) = (out.depth.shape()[0], out.depth.shape()[1]);
        let q = out.depth.reshape(&[h4, w4, 1])?;
        let full = q.bilinear_resize(h4 * 4, w4 * 4)?;
        full.reshape(&[h4 * 4, w4 * 4])
    }

    pub fn visit_parameters(&self, f: &mut impl FnMut(&Parameter<T>)) {
        self.backbone.visit(f);
        self.pqi.conv.visit(f);
        self.bcp.visit(f);
        for s in &self.stages {
            s.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_parameters_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        self.backbone.visit_mut(f);
        self.pqi.conv.visit_mut(f);
        self.bcp.visit_mut(f);
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_parameters(&mut |p| n += p.tensor.numel());
        n
    }

    pub fn zero_grad(&self) {
        self.visit_parameters(&mut |p| p.tensor.zero_grad());
    }
}
