//! Query-refinement decoder: pyramid-pooled query initialisation, windowed
//! cross-attention skip fusion with two convolutional baselines, pixel
//! shuffle upsampling, and the per-pixel bin-probability head.
//!
//! The refinement walks the pyramid coarse to fine. Fusion always happens
//! at matched resolution — queries at 1/32 attend to the 1/32 encoder map,
//! then upsample, and so on down to 1/4 — because windowed cross-attention
//! needs spatially aligned query/key maps.

use rand::Rng;

use crate::attention::{windowed_cross_attention, AttentionHeads, RelativePositionBias, WindowGrid};
use crate::backbone::{Conv2dParams, FeaturePyramid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_last, xavier_uniform, Parameter, Tensor};

const LN_EPS: f64 = 1e-5;

/// Decoder-side per-pixel embedding at one pyramid scale.
pub struct PixelQueryMap<T: Scalar> {
    pub q: Tensor<T>,
    /// Denominator of the scale relative to the input image: 32, 16, 8 or 4.
    pub scale_div: usize,
}

/// Channel / head / window schedule for the four refinement stages,
/// index 0 = finest (stage 1).
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.heads.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 decoder stages, got channels {:?}, heads {:?}",
                self.channels, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        for i in 0..4 {
            if self.heads[i] == 0 || self.channels[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by heads {}",
                    i + 1,
                    self.channels[i],
                    self.heads[i]
                )));
            }
            if i > 0 && self.channels[i] % 4 != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} must be divisible by 4 for pixel shuffle",
                    i + 1,
                    self.channels[i]
                )));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.channels[stage - 1]
    }

    pub fn heads_at(&self, stage: usize) -> usize {
        self.heads[stage - 1]
    }
}

/// Which residual closes a SAM block: the literal three-residual form ends
/// on `+ q + e`; the alternative ends on the previous activation instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalResidual {
    Literal,
    Alternative,
}

/// Encoder/decoder fusion strategy per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sam,
    AddConv,
    CatConv,
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sam" => Ok(FusionMode::Sam),
            "add_conv" => Ok(FusionMode::AddConv),
            "cat_conv" => Ok(FusionMode::CatConv),
            other => Err(format!("unknown fusion mode {other:?}")),
        }
    }
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Sam => "sam",
            FusionMode::AddConv => "add_conv",
            FusionMode::CatConv => "cat_conv",
        }
    }
}

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn new(name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: Parameter {
                name: format!("{name}.gamma"),
                tensor: Tensor::leaf(&[dim], vec![T::ONE; dim]).unwrap(),
            },
            beta: Parameter {
                name: format!("{name}.beta"),
                tensor: Tensor::leaf(&[dim], vec![T::ZERO; dim]).unwrap(),
            },
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor, &self.beta.tensor, LN_EPS)
    }

    fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Two-layer position-wise MLP with 4x hidden expansion.
#[derive(Clone)]
pub struct MlpParams<T: Scalar> {
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

impl<T: Scalar> MlpParams<T> {
    fn new<R: Rng>(name: &str, dim: usize, rng: &mut R) -> Self {
        let hidden = 4 * dim;
        MlpParams {
            w1: Parameter {
                name: format!("{name}.fc1.weight"),
                tensor: xavier_uniform(&[dim, hidden], dim, hidden, rng),
            },
            b1: Parameter {
                name: format!("{name}.fc1.bias"),
                tensor: Tensor::leaf(&[hidden], vec![T::ZERO; hidden]).unwrap(),
            },
            w2: Parameter {
                name: format!("{name}.fc2.weight"),
                tensor: xavier_uniform(&[hidden, dim], hidden, dim, rng),
            },
            b2: Parameter {
                name: format!("{name}.fc2.bias"),
                tensor: Tensor::leaf(&[dim], vec![T::ZERO; dim]).unwrap(),
            },
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.w1.tensor, &self.b1.tensor)?
            .gelu()
            .linear(&self.w2.tensor, &self.b2.tensor)
    }

    fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// Weights of one SAM stage: pre-convolutions bringing both paths to the
/// stage width, layer-norm pairs, bias-free Q/K/V projections, the
/// relative-position-bias table and the two post-attention MLPs.
#[derive(Clone)]
pub struct SamParams<T: Scalar> {
    pub pre_q: Conv2dParams<T>,
    pub pre_e: Conv2dParams<T>,
    pub norm_q: LayerNormParams<T>,
    pub norm_e: LayerNormParams<T>,
    pub w_q: Parameter<T>,
    pub w_k: Parameter<T>,
    pub w_v: Parameter<T>,
    pub bias: RelativePositionBias<T>,
    pub mlp1: MlpParams<T>,
    pub mlp2: MlpParams<T>,
}

impl<T: Scalar> SamParams<T> {
    pub fn new<R: Rng>(
        name: &str,
        q_in: usize,
        e_in: usize,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        SamParams {
            pre_q: Conv2dParams::new(&format!("{name}.pre_q"), q_in, dim, rng),
            pre_e: Conv2dParams::new(&format!("{name}.pre_e"), e_in, dim, rng),
            norm_q: LayerNormParams::new(&format!("{name}.norm_q"), dim),
            norm_e: LayerNormParams::new(&format!("{name}.norm_e"), dim),
            w_q: Parameter {
                name: format!("{name}.w_q.weight"),
                tensor: xavier_uniform(&[dim, dim], dim, dim, rng),
            },
            w_k: Parameter {
                name: format!("{name}.w_k.weight"),
                tensor: xavier_uniform(&[dim, dim], dim, dim, rng),
            },
            w_v: Parameter {
                name: format!("{name}.w_v.weight"),
                tensor: xavier_uniform(&[dim, dim], dim, dim, rng),
            },
            bias: RelativePositionBias::new(format!("{name}.rel_bias.table"), window, heads, rng),
            mlp1: MlpParams::new(&format!("{name}.mlp1"), dim, rng),
            mlp2: MlpParams::new(&format!("{name}.mlp2"), dim, rng),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        self.pre_q.visit(f);
        self.pre_e.visit(f);
        self.norm_q.visit(f);
        self.norm_e.visit(f);
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.bias.table);
        self.mlp1.visit(f);
        self.mlp2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        self.pre_q.visit_mut(f);
        self.pre_e.visit_mut(f);
        self.norm_q.visit_mut(f);
        self.norm_e.visit_mut(f);
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.bias.table);
        self.mlp1.visit_mut(f);
        self.mlp2.visit_mut(f);
    }
}

/// Weights of one convolutional fusion baseline stage.
#[derive(Clone)]
pub struct BaselineParams<T: Scalar> {
    pub pre_q: Conv2dParams<T>,
    pub pre_e: Conv2dParams<T>,
    pub conv: Conv2dParams<T>,
}

impl<T: Scalar> BaselineParams<T> {
    pub fn new<R: Rng>(
        name: &str,
        q_in: usize,
        e_in: usize,
        dim: usize,
        cat: bool,
        rng: &mut R,
    ) -> Self {
        let fuse_in = if cat { 2 * dim } else { dim };
        BaselineParams {
            pre_q: Conv2dParams::new(&format!("{name}.pre_q"), q_in, dim, rng),
            pre_e: Conv2dParams::new(&format!("{name}.pre_e"), e_in, dim, rng),
            conv: Conv2dParams::new(&format!("{name}.conv"), fuse_in, dim, rng),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        self.pre_q.visit(f);
        self.pre_e.visit(f);
        self.conv.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        self.pre_q.visit_mut(f);
        self.pre_e.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

/// Per-stage fusion weights.
#[derive(Clone)]
pub enum StageParams<T: Scalar> {
    Sam(SamParams<T>),
    AddConv(BaselineParams<T>),
    CatConv(BaselineParams<T>),
}

impl<T: Scalar> StageParams<T> {
    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        match self {
            StageParams::Sam(p) => p.visit(f),
            StageParams::AddConv(p) | StageParams::CatConv(p) => p.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        match self {
            StageParams::Sam(p) => p.visit_mut(f),
            StageParams::AddConv(p) | StageParams::CatConv(p) => p.visit_mut(f),
        }
    }
}

/// Weights of the query initialiser: one 3x3 convolution fusing the
/// coarsest map with its pyramid-pooled summaries.
#[derive(Clone)]
pub struct PqiParams<T: Scalar> {
    pub conv: Conv2dParams<T>,
}

impl<T: Scalar> PqiParams<T> {
    pub fn new<R: Rng>(name: &str, c4: usize, c_out: usize, rng: &mut R) -> Self {
        // input: e4 plus four pooled copies of it
        PqiParams { conv: Conv2dParams::new(&format!("{name}.conv"), 5 * c4, c_out, rng) }
    }
}

/// Pooling grids used by the query initialiser.
pub const PQI_POOL_GRIDS: [usize; 4] = [1, 2, 3, 6];

/// Initial pixel queries at 1/32 scale: adaptive pooling at grids 1, 2, 3
/// and 6, bilinear upsampling back, channel concatenation with the input,
/// and a 3x3 convolution to the query width.
pub fn pqi_init<T: Scalar>(e4: &Tensor<T>, params: &PqiParams<T>) -> Result<PixelQueryMap<T>> {
    let shape = e4.shape();
    if shape.len() != 3 {
        return Err(Error::dimension("pqi_init", format!("expected [H, W, C], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let largest = *PQI_POOL_GRIDS.last().unwrap();
    if h < largest || w < largest {
        return Err(Error::contract(
            "pqi_init",
            format!("spatial extents ({h}, {w}) below the largest pooling grid {largest}"),
        ));
    }
    let mut parts = vec![e4.clone()];
    for g in PQI_POOL_GRIDS {
        parts.push(e4.adaptive_avg_pool(g, g)?.bilinear_resize(h, w)?);
    }
    let fused = concat_last(&parts)?;
    Ok(PixelQueryMap { q: params.conv.apply(&fused, 1)?, scale_div: 32 })
}

fn project<T: Scalar>(x: &Tensor<T>, w: &Parameter<T>) -> Result<Tensor<T>> {
    let dout = w.tensor.shape()[1];
    x.linear(&w.tensor, &Tensor::zeros(&[dout]))
}

fn check_aligned<T: Scalar>(op: &'static str, q: &Tensor<T>, e: &Tensor<T>) -> Result<(usize, usize)> {
    let (qs, es) = (q.shape(), e.shape());
    if qs.len() != 3 || es.len() != 3 || qs[0] != es[0] || qs[1] != es[1] {
        return Err(Error::ShapeMismatch { op, lhs: qs.to_vec(), rhs: es.to_vec() });
    }
    Ok((qs[0], qs[1]))
}

/// One SAM refinement step at matched resolution:
///
/// 1. 3x3 convolutions bring query and encoder maps to the stage width,
/// 2. both are layer-normalized,
/// 3. Q/K/V projections feed windowed cross-attention,
/// 4. `a = attention + q`,
/// 5. `a = mlp1(a) + a`,
/// 6. `out = mlp2(a) + q + e` (literal) or `mlp2(a) + a` (alternative).
pub fn sam_block<T: Scalar>(
    qhat: &PixelQueryMap<T>,
    e: &Tensor<T>,
    params: &SamParams<T>,
    cfg: &StageConfig,
    stage: usize,
    final_residual: FinalResidual,
) -> Result<PixelQueryMap<T>> {
    let (h, w) = check_aligned("sam_block", &qhat.q, e)?;
    let dim = cfg.channels_at(stage);
    let heads = AttentionHeads::new(dim, cfg.heads_at(stage))?;
    let grid = WindowGrid::new(h, w, cfg.window)?;

    let q_proj = params.pre_q.apply(&qhat.q, 1)?;
    let e_proj = params.pre_e.apply(e, 1)?;
    let q_norm = params.norm_q.apply(&q_proj)?;
    let e_norm = params.norm_e.apply(&e_proj)?;
    let q = project(&q_norm, &params.w_q)?;
    let k = project(&e_norm, &params.w_k)?;
    let v = project(&e_norm, &params.w_v)?;

    let attn = windowed_cross_attention(&q, &k, &v, &params.bias, heads, &grid)?;
    let a0 = attn.add(&q_proj)?;
    let a1 = params.mlp1.apply(&a0)?.add(&a0)?;
    let out = match final_residual {
        FinalResidual::Literal => params.mlp2.apply(&a1)?.add(&q_proj)?.add(&e_proj)?,
        FinalResidual::Alternative => params.mlp2.apply(&a1)?.add(&a1)?,
    };
    Ok(PixelQueryMap { q: out, scale_div: qhat.scale_div })
}

/// Convolutional fusion baselines: `conv3x3(q + e)` or `conv3x3(cat(q, e))`
/// after the same pre-convolutions as the SAM path.
pub fn fuse_baseline<T: Scalar>(
    qhat: &PixelQueryMap<T>,
    e: &Tensor<T>,
    mode: FusionMode,
    params: &BaselineParams<T>,
) -> Result<PixelQueryMap<T>> {
    check_aligned("fuse_baseline", &qhat.q, e)?;
    let q_proj = params.pre_q.apply(&qhat.q, 1)?;
    let e_proj = params.pre_e.apply(e, 1)?;
    let fused = match mode {
        FusionMode::AddConv => params.conv.apply(&q_proj.add(&e_proj)?, 1)?,
        FusionMode::CatConv => params.conv.apply(&concat_last(&[q_proj, e_proj])?, 1)?,
        FusionMode::Sam => {
            return Err(Error::contract("fuse_baseline", "sam is not a baseline mode"))
        }
    };
    Ok(PixelQueryMap { q: fused, scale_div: qhat.scale_div })
}

fn fuse_stage<T: Scalar>(
    qhat: &PixelQueryMap<T>,
    e: &Tensor<T>,
    params: &StageParams<T>,
    cfg: &StageConfig,
    stage: usize,
    final_residual: FinalResidual,
) -> Result<PixelQueryMap<T>> {
    match params {
        StageParams::Sam(p) => sam_block(qhat, e, p, cfg, stage, final_residual),
        StageParams::AddConv(p) => fuse_baseline(qhat, e, FusionMode::AddConv, p),
        StageParams::CatConv(p) => fuse_baseline(qhat, e, FusionMode::CatConv, p),
    }
}

/// Full refinement loop: fuse at 1/32 with e4, pixel-shuffle up, fuse at
/// 1/16 with e3, and so on to 1/4 with e1; then a 3x3 convolution to
/// `n_bins` channels and a per-pixel softmax over the bin axis.
pub fn decode<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    q_init: &PixelQueryMap<T>,
    stages: &[StageParams<T>],
    cfg: &StageConfig,
    head: &Conv2dParams<T>,
    final_residual: FinalResidual,
) -> Result<Tensor<T>> {
    if q_init.scale_div != 32 {
        return Err(Error::Config(format!(
            "decode expects initial queries at 1/32 scale, got 1/{}",
            q_init.scale_div
        )));
    }
    if stages.len() != 4 {
        return Err(Error::Config(format!("decode needs 4 stage parameter sets, got {}", stages.len())));
    }
    cfg.validate()?;

    let mut q = PixelQueryMap { q: q_init.q.clone(), scale_div: 32 };
    for stage in (1..=4).rev() {
        let e = pyramid.level(stage);
        if e.shape()[0] != q.q.shape()[0] || e.shape()[1] != q.q.shape()[1] {
            return Err(Error::Config(format!(
                "pyramid level {} at {:?} does not align with queries at {:?}",
                stage,
                e.shape(),
                q.q.shape()
            )));
        }
        q = fuse_stage(&q, e, &stages[stage - 1], cfg, stage, final_residual)?;
        if stage > 1 {
            q = PixelQueryMap { q: q.q.pixel_shuffle(2)?, scale_div: q.scale_div / 2 };
        }
    }
    let logits = head.apply(&q.q, 1)?;
    logits.softmax(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stage_cfg() -> StageConfig {
        StageConfig { channels: vec![4, 8, 8, 12], heads: vec![2, 2, 2, 2], window: 7 }
    }

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::constant(&[h, w, c], (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn pqi_constant_input_stays_constant_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = PqiParams::<f64>::new("pqi", 3, 5, &mut rng);
        let e4 = Tensor::constant(&[7, 7, 3], vec![0.6; 7 * 7 * 3]).unwrap();
        let out = pqi_init(&e4, &params).unwrap();
        assert_eq!(out.q.shape(), &[7, 7, 5]);
        assert_eq!(out.scale_div, 32);
        // interior pixels of a constant field stay constant per channel;
        // the boundary sees zero padding and differs
        let d = out.q.data();
        for c in 0..5 {
            let center = d[(3 * 7 + 3) * 5 + c];
            for y in 1..6 {
                for x in 1..6 {
                    assert!((d[(y * 7 + x) * 5 + c] - center).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pqi_rejects_maps_smaller_than_the_pool_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = PqiParams::<f64>::new("pqi", 3, 5, &mut rng);
        let e4 = Tensor::<f64>::zeros(&[5, 8, 3]);
        assert!(matches!(pqi_init(&e4, &params), Err(Error::Contract { .. })));
    }

    #[test]
    fn sam_block_with_zero_parameters_reduces_to_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = stage_cfg();
        let mut params = SamParams::<f64>::new("s", 6, 5, 12, 2, 7, &mut rng);
        params.visit_mut(&mut |p: &mut Parameter<f64>| {
            let shape = p.tensor.shape().to_vec();
            p.tensor = Tensor::leaf(&shape, vec![0.0; p.tensor.numel()]).unwrap();
        });
        let q = PixelQueryMap { q: rand_map(&mut rng, 7, 7, 6), scale_div: 32 };
        let e = rand_map(&mut rng, 7, 7, 5);
        let out = sam_block(&q, &e, &params, &cfg, 4, FinalResidual::Literal).unwrap();
        // zero convolutions zero both paths, so the residual sum is zero
        assert!(out.q.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.q.shape(), &[7, 7, 12]);
    }

    #[test]
    fn sam_block_output_shape_tracks_stage_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = stage_cfg();
        for stage in 1..=4 {
            let dim = cfg.channels_at(stage);
            let params = SamParams::<f64>::new("s", 3, 5, dim, cfg.heads_at(stage), 7, &mut rng);
            let q = PixelQueryMap { q: rand_map(&mut rng, 8, 9, 3), scale_div: 32 };
            let e = rand_map(&mut rng, 8, 9, 5);
            let out = sam_block(&q, &e, &params, &cfg, stage, FinalResidual::Literal).unwrap();
            assert_eq!(out.q.shape(), &[8, 9, dim]);
        }
    }

    #[test]
    fn sam_block_rejects_misaligned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = stage_cfg();
        let params = SamParams::<f64>::new("s", 3, 5, 12, 2, 7, &mut rng);
        let q = PixelQueryMap { q: rand_map(&mut rng, 8, 9, 3), scale_div: 32 };
        let e = rand_map(&mut rng, 9, 8, 5);
        assert!(sam_block(&q, &e, &params, &cfg, 4, FinalResidual::Literal).is_err());
    }

    #[test]
    fn add_conv_commutes_and_cat_conv_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // symmetric pre-convolutions so q and e are interchangeable
        let mut params = BaselineParams::<f64>::new("f", 4, 4, 8, false, &mut rng);
        let shared = params.pre_q.weight.tensor.data().to_vec();
        params.pre_e.weight.tensor = Tensor::leaf(&[3, 3, 4, 8], shared).unwrap();
        let a = rand_map(&mut rng, 7, 7, 4);
        let b = rand_map(&mut rng, 7, 7, 4);
        let qa = PixelQueryMap { q: a.clone(), scale_div: 32 };
        let qb = PixelQueryMap { q: b.clone(), scale_div: 32 };
        let ab = fuse_baseline(&qa, &b, FusionMode::AddConv, &params).unwrap();
        let ba = fuse_baseline(&qb, &a, FusionMode::AddConv, &params).unwrap();
        assert_eq!(ab.q.data(), ba.q.data());

        let cat = BaselineParams::<f64>::new("f", 4, 4, 8, true, &mut rng);
        let out = fuse_baseline(&qa, &b, FusionMode::CatConv, &cat).unwrap();
        assert_eq!(out.q.shape(), &[7, 7, 8]);
    }

    #[test]
    fn add_conv_identity_kernel_passes_queries_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = BaselineParams::<f64>::new("f", 2, 2, 2, false, &mut rng);
        // pre_q = identity (center tap), pre_e = zero, fusion conv = identity
        let mut ident = vec![0.0; 9 * 2 * 2];
        for c in 0..2 {
            ident[(1 * 3 + 1) * 4 + c * 2 + c] = 1.0;
        }
        params.pre_q.weight.tensor = Tensor::leaf(&[3, 3, 2, 2], ident.clone()).unwrap();
        params.pre_e.weight.tensor = Tensor::leaf(&[3, 3, 2, 2], vec![0.0; 36]).unwrap();
        params.conv.weight.tensor = Tensor::leaf(&[3, 3, 2, 2], ident).unwrap();
        let q = rand_map(&mut rng, 5, 5, 2);
        let e = rand_map(&mut rng, 5, 5, 2);
        let out = fuse_baseline(
            &PixelQueryMap { q: q.clone(), scale_div: 32 },
            &e,
            FusionMode::AddConv,
            &params,
        )
        .unwrap();
        for (a, b) in out.q.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn build_decoder_stack(
        rng: &mut ChaCha8Rng,
        mode: FusionMode,
    ) -> (Backbone<f64>, PqiParams<f64>, Vec<StageParams<f64>>, StageConfig, Conv2dParams<f64>) {
        let cfg = stage_cfg();
        let backbone_channels = [2, 3, 4, 5];
        let backbone = Backbone::new(&backbone_channels, rng).unwrap();
        let pqi = PqiParams::new("pqi", 5, 6, rng);
        let mut stages = Vec::new();
        for stage in 1..=4 {
            let dim = cfg.channels_at(stage);
            let q_in = if stage == 4 { 6 } else { cfg.channels_at(stage + 1) / 4 };
            let e_in = backbone_channels[stage - 1];
            let name = format!("decoder.stage{stage}");
            stages.push(match mode {
                FusionMode::Sam => StageParams::Sam(SamParams::new(
                    &name,
                    q_in,
                    e_in,
                    dim,
                    cfg.heads_at(stage),
                    cfg.window,
                    rng,
                )),
                FusionMode::AddConv => {
                    StageParams::AddConv(BaselineParams::new(&name, q_in, e_in, dim, false, rng))
                }
                FusionMode::CatConv => {
                    StageParams::CatConv(BaselineParams::new(&name, q_in, e_in, dim, true, rng))
                }
            });
        }
        let head = Conv2dParams::new("decoder.head", cfg.channels_at(1), 10, rng);
        (backbone, pqi, stages, cfg, head)
    }

    #[test]
    fn decode_emits_normalized_bin_maps_in_every_fusion_mode() {
        let mut shapes = Vec::new();
        for mode in [FusionMode::Sam, FusionMode::AddConv, FusionMode::CatConv] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (backbone, pqi, stages, cfg, head) = build_decoder_stack(&mut rng, mode);
            let img_data: Vec<f64> =
                (0..192 * 192 * 3).map(|v| ((v * 31 % 101) as f64) / 101.0).collect();
            let img = Tensor::constant(&[192, 192, 3], img_data).unwrap();
            let pyramid = backbone.encode(&img).unwrap();
            let q_init = pqi_init(&pyramid.e4, &pqi).unwrap();
            let p = decode(&pyramid, &q_init, &stages, &cfg, &head, FinalResidual::Literal).unwrap();
            assert_eq!(p.shape(), &[48, 48, 10]);
            shapes.push(p.shape().to_vec());
            for px in p.data().chunks(10) {
                let s: f64 = px.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(px.iter().all(|v| *v >= 0.0));
            }
        }
        // every fusion mode emits identical output shapes
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn decode_zeroed_parameters_regression_fixture() {
        // with all SAM parameters zeroed, decode is a deterministic function
        // of the pyramid alone; freeze two probe values as a regression net
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (backbone, pqi, mut stages, cfg, head) = build_decoder_stack(&mut rng, FusionMode::Sam);
        for s in &mut stages {
            s.visit_mut(&mut |p: &mut Parameter<f64>| {
                let shape = p.tensor.shape().to_vec();
                p.tensor = Tensor::leaf(&shape, vec![0.0; p.tensor.numel()]).unwrap();
            });
        }
        let img = Tensor::constant(
            &[192, 192, 3],
            (0..192 * 192 * 3).map(|v| ((v * 17 % 89) as f64) / 89.0).collect(),
        )
        .unwrap();
        let pyramid = backbone.encode(&img).unwrap();
        let q_init = pqi_init(&pyramid.e4, &pqi).unwrap();
        let p1 = decode(&pyramid, &q_init, &stages, &cfg, &head, FinalResidual::Literal).unwrap();
        let p2 = decode(&pyramid, &q_init, &stages, &cfg, &head, FinalResidual::Literal).unwrap();
        assert_eq!(p1.data(), p2.data());
        // all-zero logits soften to uniform bins
        for px in p1.data().chunks(10) {
            for v in px {
                assert!((v - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn final_residual_flag_changes_values_but_not_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = stage_cfg();
        let params = SamParams::<f64>::new("s", 3, 5, 12, 2, 7, &mut rng);
        let q = PixelQueryMap { q: rand_map(&mut rng, 7, 7, 3), scale_div: 32 };
        let e = rand_map(&mut rng, 7, 7, 5);
        let lit = sam_block(&q, &e, &params, &cfg, 4, FinalResidual::Literal).unwrap();
        let alt = sam_block(&q, &e, &params, &cfg, 4, FinalResidual::Alternative).unwrap();
        assert_eq!(lit.q.shape(), alt.q.shape());
        let diff: f64 = lit
            .q
            .data()
            .iter()
            .zip(alt.q.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn sam_block_wq_grads_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = StageConfig { channels: vec![4, 8, 8, 8], heads: vec![2, 2, 2, 2], window: 3 };
        let params = SamParams::<f64>::new("s", 3, 5, 8, 2, 3, &mut rng);
        let q = rand_map(&mut rng, 4, 5, 3);
        let e = rand_map(&mut rng, 4, 5, 5);
        let point = params.w_q.tensor.data().to_vec();
        let err = crate::tensor::grad_check(
            move |w: &Tensor<f64>| {
                let mut probe = params.clone();
                probe.w_q = Parameter { name: "w".into(), tensor: w.clone() };
                let qm = PixelQueryMap { q: q.clone(), scale_div: 32 };
                let out = sam_block(&qm, &e, &probe, &cfg, 2, FinalResidual::Literal)?;
                Ok(out.q.mul(&out.q)?.sum_all())
            },
            &point,
            &[8, 8],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
