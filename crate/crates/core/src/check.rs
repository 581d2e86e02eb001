//! Numerical self-verification: invariant suites over every module plus,
//! at the full level, finite-difference gradient validation of every
//! operation and composed block in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    window_partition, window_reverse, windowed_cross_attention, AttentionHeads,
    RelativePositionBias, WindowGrid,
};
use crate::bins::{bin_centers, compose_depth, predict_bin_widths, BcpParams};
use crate::config::RunConfig;
use crate::data::synth_dataset;
use crate::decoder::{pqi_init, sam_block, FinalResidual, PixelQueryMap, PqiParams, SamParams, StageConfig};
use crate::error::Result;
use crate::metrics::{eval_metrics, silog_loss, LossConfig};
use crate::model::{DepthModel, ModelConfig};
use crate::scalar::Precision;
use crate::tensor::{grad_check, Parameter, Tensor};

/// Gradient tolerance for every finite-difference check.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Random smooth points per check.
pub const GRAD_POINTS: usize = 5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: true, detail: detail.into() }
    }

    fn fail(name: &str, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: false, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Self::pass(name, detail),
            Err(e) => Self::fail(name, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLevel {
    Fast,
    Full,
}

impl std::str::FromStr for CheckLevel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(CheckLevel::Fast),
            "full" => Ok(CheckLevel::Full),
            other => Err(format!("unknown check level {other:?}, expected fast or full")),
        }
    }
}

/// The check whose analytic gradient the corruption fixture negates.
pub const CORRUPTIBLE_CHECK: &str = "grad.matmul";

/// Test fixture: identity forward, negated backward. Wrapping a loss in
/// this must make its gradient check fail, proving the harness can see a
/// broken gradient.
fn negate_gradient(x: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_op(x.shape().to_vec(), x.data().to_vec(), vec![x.clone()], |g| {
        vec![Some(g.iter().map(|v| -*v).collect())]
    })
}

pub fn run_checks(level: CheckLevel, corrupt_gradient: bool) -> Vec<CheckResult> {
    let mut results = fast_checks();
    if level == CheckLevel::Full {
        results.extend(gradient_checks(corrupt_gradient));
    }
    results
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn render_report(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {} ({})\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    out
}

// ---------------------------------------------------------------- fast ---

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::constant(shape, rand_vec(rng, shape.iter().product(), lo, hi)).unwrap()
}

pub fn fast_checks() -> Vec<CheckResult> {
    vec![
        check_window_round_trip(),
        check_attention_oracle(),
        check_attention_convexity(),
        check_softmax_properties(),
        check_pixel_shuffle_inverse(),
        check_pool_consistency(),
        check_bin_exactness(),
        check_loss_values(),
        check_metric_oracle(),
        check_format_round_trips(),
        check_checkpoint_round_trip(),
        check_config_round_trip(),
        check_data_determinism(),
        check_decode_row_stochastic(),
    ]
}

fn check_window_round_trip() -> CheckResult {
    let name = "window.round_trip";
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for h in [7usize, 8, 13, 14, 21, 28] {
        for w in [7usize, 8, 13, 14, 21, 28] {
            let grid = match WindowGrid::new(h, w, 7) {
                Ok(g) => g,
                Err(e) => return CheckResult::fail(name, e.to_string()),
            };
            let x = rand_tensor(&mut rng, &[h, w, 3], -1.0, 1.0);
            let back = window_partition(&x, &grid).and_then(|wins| window_reverse(&wins, &grid));
            match back {
                Ok(b) if b.data() == x.data() => {}
                Ok(_) => return CheckResult::fail(name, format!("({h}, {w}) not exact")),
                Err(e) => return CheckResult::fail(name, e.to_string()),
            }
        }
    }
    CheckResult::pass(name, "36 extent combinations exact")
}

fn check_attention_oracle() -> CheckResult {
    let name = "attention.oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for (h, w, dim, heads_n) in [(7, 7, 4, 2), (8, 8, 6, 3), (14, 10, 4, 1)] {
        let grid = WindowGrid::new(h, w, 7).unwrap();
        let heads = AttentionHeads::new(dim, heads_n).unwrap();
        let bias = RelativePositionBias::new("b", 7, heads_n, &mut rng);
        let q = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let out = match windowed_cross_attention(&q, &k, &v, &bias, heads, &grid) {
            Ok(o) => o,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        let reference = naive_attention_reference(&q, &k, &v, &bias, heads, &grid);
        for (a, b) in out.data().iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-6 {
        CheckResult::pass(name, format!("max abs diff {worst:.2e}"))
    } else {
        CheckResult::fail(name, format!("max abs diff {worst:.2e} exceeds 1e-6"))
    }
}

/// Per-query double loop over real keys, independent of the tensor ops.
pub fn naive_attention_reference(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    bias: &RelativePositionBias<f64>,
    heads: AttentionHeads,
    grid: &WindowGrid,
) -> Vec<f64> {
    let (h, w, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let win = grid.window;
    let hd = heads.head_dim;
    let table = bias.table.tensor.data();
    let side = 2 * win - 1;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y % win, x % win);
            for head in 0..heads.heads {
                let mut scores = Vec::new();
                let mut sources = Vec::new();
                for jy in 0..win {
                    for jx in 0..win {
                        let ky = y - sy + jy;
                        let kx = x - sx + jx;
                        if ky >= h || kx >= w {
                            continue;
                        }
                        let mut dot = 0.0;
                        for e in 0..hd {
                            dot += q.data()[(y * w + x) * d + head * hd + e]
                                * k.data()[(ky * w + kx) * d + head * hd + e];
                        }
                        let dy = sy + win - 1 - jy;
                        let dx = sx + win - 1 - jx;
                        scores.push(
                            dot / (hd as f64).sqrt()
                                + table[(dy * side + dx) * heads.heads + head],
                        );
                        sources.push((ky, kx));
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..hd {
                    let mut acc = 0.0;
                    for (wgt, (ky, kx)) in exps.iter().zip(&sources) {
                        acc += wgt / z * v.data()[(ky * w + kx) * d + head * hd + e];
                    }
                    out[(y * w + x) * d + head * hd + e] = acc;
                }
            }
        }
    }
    out
}

fn check_attention_convexity() -> CheckResult {
    let name = "attention.convexity";
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (h, w, dim, heads_n) = (10, 9, 4, 2);
    let grid = WindowGrid::new(h, w, 7).unwrap();
    let heads = AttentionHeads::new(dim, heads_n).unwrap();
    for zero_bias in [true, false] {
        let mut bias = RelativePositionBias::new("b", 7, heads_n, &mut rng);
        if zero_bias {
            bias.table.tensor = Tensor::constant(&[13 * 13, heads_n], vec![0.0; 169 * heads_n]).unwrap();
        }
        let q = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[h, w, dim], -1.0, 1.0);
        let out = match windowed_cross_attention(&q, &k, &v, &bias, heads, &grid) {
            Ok(o) => o,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        // every output coordinate must lie inside the [min, max] of the
        // value coordinates over the real pixels of its window
        for y in 0..h {
            for x in 0..w {
                for c in 0..dim {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    let (wy0, wx0) = (y - y % 7, x - x % 7);
                    for jy in wy0..(wy0 + 7).min(h) {
                        for jx in wx0..(wx0 + 7).min(w) {
                            let val = v.data()[(jy * w + jx) * dim + c];
                            lo = lo.min(val);
                            hi = hi.max(val);
                        }
                    }
                    let got = out.data()[(y * w + x) * dim + c];
                    if got < lo - 1e-9 || got > hi + 1e-9 {
                        return CheckResult::fail(
                            name,
                            format!("({y}, {x}, {c}) = {got} outside [{lo}, {hi}]"),
                        );
                    }
                }
            }
        }
    }
    CheckResult::pass(name, "outputs inside window value bounds, zero and random bias")
}

fn check_softmax_properties() -> CheckResult {
    let name = "softmax.properties";
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = rand_tensor(&mut rng, &[4, 9], -5.0, 5.0);
    let y = match x.softmax(1) {
        Ok(y) => y,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    for row in y.data().chunks(9) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return CheckResult::fail(name, format!("row sum {s}"));
        }
    }
    let shifted = x.add_scalar(123.5).softmax(1).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in y.data().iter().zip(shifted.data()) {
        worst = worst.max((a - b).abs());
    }
    if worst > 1e-12 {
        return CheckResult::fail(name, format!("shift invariance off by {worst:.2e}"));
    }
    CheckResult::pass(name, "rows stochastic, shift-invariant within 1e-12")
}

fn check_pixel_shuffle_inverse() -> CheckResult {
    let name = "pixel_shuffle.inverse";
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for (h, w, c, r) in [(3, 5, 8, 2), (2, 2, 36, 3), (4, 1, 4, 2)] {
        let x = rand_tensor(&mut rng, &[h, w, c], -2.0, 2.0);
        match x.pixel_shuffle(r).and_then(|y| y.pixel_unshuffle(r)) {
            Ok(back) if back.data() == x.data() => {}
            Ok(_) => return CheckResult::fail(name, format!("({h},{w},{c}) r={r} not exact")),
            Err(e) => return CheckResult::fail(name, e.to_string()),
        }
    }
    CheckResult::pass(name, "unshuffle(shuffle(x)) exact")
}

fn check_pool_consistency() -> CheckResult {
    let name = "pool.consistency";
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = rand_tensor(&mut rng, &[5, 7, 3], -1.0, 1.0);
    let full = x.adaptive_avg_pool(5, 7).unwrap();
    if full.data() != x.data() {
        return CheckResult::fail(name, "full-size adaptive pool is not the identity");
    }
    let one = x.adaptive_avg_pool(1, 1).unwrap();
    let gap = x.global_avg_pool().unwrap();
    for (a, b) in one.data().iter().zip(gap.data()) {
        if (a - b).abs() > 1e-12 {
            return CheckResult::fail(name, "adaptive (1,1) disagrees with global pool");
        }
    }
    CheckResult::pass(name, "identity and (1,1)-pool consistency hold")
}

fn check_bin_exactness() -> CheckResult {
    let name = "bins.exactness";
    let w = Tensor::constant(&[4], vec![0.25; 4]).unwrap();
    let c = bin_centers(&w, 0.0, 8.0).unwrap();
    if c.data() != [1.0, 3.0, 5.0, 7.0] {
        return CheckResult::fail(name, format!("uniform centers {:?}", c.data()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..100 {
        let n = rng.gen_range(2..32);
        let raw = rand_vec(&mut rng, n, 0.01, 1.0);
        let sum: f64 = raw.iter().sum();
        let widths = Tensor::constant(&[n], raw.iter().map(|v| v / sum).collect()).unwrap();
        let c = bin_centers(&widths, 0.001, 10.0).unwrap();
        let d = c.data();
        if !d.windows(2).all(|p| p[0] < p[1]) || d[0] <= 0.001 || d[n - 1] >= 10.0 {
            return CheckResult::fail(name, "centers not strictly increasing interior");
        }
        // composed depth of random normalized probabilities stays in [c1, cn]
        let probs_raw = rand_vec(&mut rng, 2 * n, 0.0, 1.0);
        let mut pdata = Vec::with_capacity(2 * n);
        for row in probs_raw.chunks(n) {
            let s: f64 = row.iter().sum();
            pdata.extend(row.iter().map(|v| v / s));
        }
        let p = Tensor::constant(&[1, 2, n], pdata).unwrap();
        let depth = compose_depth(&p, &c).unwrap();
        for v in depth.data() {
            if *v < d[0] - 1e-12 || *v > d[n - 1] + 1e-12 {
                return CheckResult::fail(name, format!("depth {v} escapes [{}, {}]", d[0], d[n - 1]));
            }
        }
    }
    CheckResult::pass(name, "uniform case exact; 100 random width vectors ordered and interior")
}

fn check_loss_values() -> CheckResult {
    let name = "loss.values";
    let e = std::f64::consts::E;
    let pred = Tensor::constant(&[2], vec![e, 1.0]).unwrap();
    let gt = Tensor::constant(&[2], vec![1.0, 1.0]).unwrap();
    let loss = match silog_loss(&pred, &gt, &[true, true], LossConfig::default()) {
        Ok(l) => l.item(),
        Err(err) => return CheckResult::fail(name, err.to_string()),
    };
    let expect = 10.0 * 0.2875f64.sqrt();
    if (loss - expect).abs() > 1e-9 {
        return CheckResult::fail(name, format!("hand case {loss} vs {expect}"));
    }
    let zero = silog_loss(&gt, &gt, &[true, true], LossConfig::default()).unwrap().item();
    if zero != 0.0 {
        return CheckResult::fail(name, format!("perfect prediction gives {zero}"));
    }
    let cfg = LossConfig { lambda: 1.0, alpha: 10.0 };
    let base_pred = Tensor::constant(&[3], vec![0.9, 2.1, 3.9]).unwrap();
    let base_gt = Tensor::constant(&[3], vec![1.0, 2.0, 4.0]).unwrap();
    let base: f64 = silog_loss(&base_pred, &base_gt, &[true; 3], cfg).unwrap().item();
    for s in [0.5, 2.0, 10.0] {
        let scaled =
            Tensor::constant(&[3], base_pred.data().iter().map(|v| v * s).collect()).unwrap();
        let l = silog_loss(&scaled, &base_gt, &[true; 3], cfg).unwrap().item();
        if (l - base).abs() > 1e-9 {
            return CheckResult::fail(name, format!("lambda=1 scale invariance off at s={s}"));
        }
    }
    CheckResult::pass(name, "hand value, exact-fit zero and scale invariance hold")
}

fn check_metric_oracle() -> CheckResult {
    let name = "metrics.oracle";
    let gt: Vec<f64> = (1..=8).map(|v| v as f64 * 0.7).collect();
    let pred: Vec<f64> = gt.iter().map(|v| v * 2.0).collect();
    let r = match eval_metrics(&pred, &gt, &vec![true; 8], (2, 4), 0.001, 100.0, None) {
        Ok(r) => r,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    if (r.abs_rel - 1.0).abs() > 1e-9 || r.delta3 != 0.0 || (r.log10 - 2.0f64.log10()).abs() > 1e-9 {
        return CheckResult::fail(name, format!("analytic case: {}", r.render_line()));
    }

    // random instances against a plain per-pixel loop
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..5 {
        let n = 48usize;
        let gt = rand_vec(&mut rng, n, 0.5, 9.5);
        let pred = rand_vec(&mut rng, n, 0.5, 9.5);
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
        let r = eval_metrics(&pred, &gt, &mask, (6, 8), 0.001, 10.0, None).unwrap();

        let (mut sar, mut ssr, mut sse, mut sl10, mut sg, mut sg2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut d1, mut d2, mut d3, mut count) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let p = pred[i].clamp(0.001, 10.0);
            let g = gt[i];
            sar += (p - g).abs() / g;
            ssr += (p - g) * (p - g) / g;
            sse += (p - g) * (p - g);
            sl10 += (p.log10() - g.log10()).abs();
            let lg = p.ln() - g.ln();
            sg += lg;
            sg2 += lg * lg;
            let ratio = (p / g).max(g / p);
            if ratio < 1.25 {
                d1 += 1;
            }
            if ratio < 1.5625 {
                d2 += 1;
            }
            if ratio < 1.953125 {
                d3 += 1;
            }
            count += 1;
        }
        let nf = count as f64;
        let expect = [
            sar / nf,
            ssr / nf,
            (sse / nf).sqrt(),
            sl10 / nf,
            100.0 * (sg2 / nf - (sg / nf) * (sg / nf)).max(0.0).sqrt(),
            d1 as f64 / nf,
            d2 as f64 / nf,
            d3 as f64 / nf,
        ];
        let got = [r.abs_rel, r.sq_rel, r.rmse, r.log10, r.silog, r.delta1, r.delta2, r.delta3];
        for (g, e) in got.iter().zip(&expect) {
            if (g - e).abs() > 1e-9 {
                return CheckResult::fail(name, format!("loop disagreement {g} vs {e}"));
            }
        }
    }
    CheckResult::pass(name, "analytic case and per-pixel loop agree within 1e-9")
}

fn check_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("skipdepth-check-{}", std::process::id()));
    std::fs::create_dir_all(&dir).ok();
    dir
}

fn check_format_round_trips() -> CheckResult {
    let name = "formats.round_trip";
    let dir = check_dir();
    let result = (|| -> Result<String> {
        let depth: Vec<f64> = (0..20).map(|v| (0.01 + v as f64 * 0.49) as f32 as f64).collect();
        let pfm = dir.join("check.pfm");
        crate::data::formats::write_pfm(&pfm, &depth, 4, 5)?;
        let (h, w, back) = crate::data::formats::read_pfm(&pfm)?;
        if (h, w) != (4, 5) || back != depth {
            return Err(crate::error::Error::Format {
                path: pfm.display().to_string(),
                msg: "pfm round trip not exact".into(),
            });
        }
        let png = dir.join("check.png");
        crate::data::formats::write_png16(&png, &depth, 4, 5)?;
        let (_, _, back) = crate::data::formats::read_png16(&png)?;
        for (a, b) in depth.iter().zip(&back) {
            if (a - b).abs() > 0.5 / crate::data::formats::PNG16_SCALE {
                return Err(crate::error::Error::Range(format!("png16 error {a} vs {b}")));
            }
        }
        match crate::data::formats::write_png16(&dir.join("o.png"), &[300.0], 1, 1) {
            Err(crate::error::Error::Range(_)) => {}
            other => {
                return Err(crate::error::Error::Range(format!(
                    "overflow not rejected: {other:?}"
                )))
            }
        }
        Ok("pfm exact, png16 within half quantum, overflow rejected".into())
    })();
    std::fs::remove_dir_all(&dir).ok();
    CheckResult::from_result(name, result)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![2, 3, 4, 5],
        decoder_channels: vec![4, 8, 8, 12],
        heads: vec![2, 2, 2, 2],
        pqi_channels: 6,
        bcp_hidden: 8,
        n_bins: 8,
        ..ModelConfig::default()
    }
}

fn check_checkpoint_round_trip() -> CheckResult {
    let name = "checkpoint.round_trip";
    let dir = check_dir();
    let result = (|| -> Result<String> {
        let model = DepthModel::<f32>::init(tiny_model_config(), 11)?;
        let path = dir.join("check.ckpt");
        crate::data::checkpoint::save_checkpoint(&path, &model, Precision::F32)?;
        let (back, _) = crate::data::checkpoint::load_checkpoint::<f32>(&path)?;
        let mut a = Vec::new();
        model.visit_parameters(&mut |p| a.extend_from_slice(p.tensor.data()));
        let mut b = Vec::new();
        back.visit_parameters(&mut |p| b.extend_from_slice(p.tensor.data()));
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(crate::error::Error::Checkpoint("round trip not bit-exact".into()));
        }
        Ok(format!("{} parameters bit-exact", model.parameter_count()))
    })();
    std::fs::remove_dir_all(&dir).ok();
    CheckResult::from_result(name, result)
}

fn check_config_round_trip() -> CheckResult {
    let name = "config.round_trip";
    for cfg in [RunConfig::toy(), RunConfig::paper_scale()] {
        match RunConfig::parse(&cfg.render()) {
            Ok(back) if back == cfg => {}
            Ok(_) => return CheckResult::fail(name, "parse(render(config)) != config"),
            Err(e) => return CheckResult::fail(name, e.to_string()),
        }
    }
    CheckResult::pass(name, "toy and paper presets round-trip")
}

fn check_data_determinism() -> CheckResult {
    let name = "data.determinism";
    let a = synth_dataset(5, 2, (64, 64), 10.0);
    let b = synth_dataset(5, 2, (64, 64), 10.0);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            for (sa, sb) in a.iter().zip(&b) {
                if sa.image != sb.image || sa.depth != sb.depth || sa.mask != sb.mask {
                    return CheckResult::fail(name, "same seed produced different samples");
                }
                for (d, m) in sa.depth.iter().zip(&sa.mask) {
                    if *m && (*d < 1.0 || *d > 10.0) {
                        return CheckResult::fail(name, format!("masked depth {d} out of range"));
                    }
                }
            }
            CheckResult::pass(name, "seeded generation bit-identical, depths in range")
        }
        _ => CheckResult::fail(name, "generation failed"),
    }
}

fn check_decode_row_stochastic() -> CheckResult {
    let name = "decode.row_stochastic";
    let result = (|| -> Result<String> {
        let model = DepthModel::<f64>::init(tiny_model_config(), 13)?;
        let img = Tensor::constant(
            &[192, 192, 3],
            (0..192 * 192 * 3).map(|v| ((v * 7 % 61) as f64) / 61.0).collect(),
        )?;
        let out = model.forward(&img)?;
        for px in out.p_bins.data().chunks(model.config.n_bins) {
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > 1e-6 || px.iter().any(|v| *v < 0.0) {
                return Err(crate::error::Error::Contract {
                    op: "decode",
                    msg: format!("bin row sums to {s}"),
                });
            }
        }
        let (lo, hi) = (model.config.d_min, model.config.d_max);
        for v in out.depth.data() {
            if !(*v > lo && *v < hi) {
                return Err(crate::error::Error::Contract {
                    op: "decode",
                    msg: format!("depth {v} outside ({lo}, {hi})"),
                });
            }
        }
        Ok("bin rows stochastic, depth strictly inside the range".into())
    })();
    CheckResult::from_result(name, result)
}

// ------------------------------------------------------------ gradients ---

struct GradCheck {
    results: Vec<CheckResult>,
    corrupt: bool,
}

impl GradCheck {
    /// `worst` = max relative error over GRAD_POINTS random points drawn by
    /// `sample`; passes at GRAD_TOL.
    fn run(
        &mut self,
        name: &str,
        shape: &[usize],
        mut sample: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
        f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    ) {
        let corrupt_here = self.corrupt && name == CORRUPTIBLE_CHECK;
        let wrapped = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let y = f(x)?;
            Ok(if corrupt_here { negate_gradient(&y) } else { y })
        };
        let mut worst = 0.0f64;
        for point_idx in 0..GRAD_POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + point_idx as u64);
            let point = sample(&mut rng);
            match grad_check(&wrapped, &point, shape, GRAD_STEP) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    self.results.push(CheckResult::fail(name, e.to_string()));
                    return;
                }
            }
        }
        if worst <= GRAD_TOL {
            self.results.push(CheckResult::pass(name, format!("max rel err {worst:.2e}")));
        } else {
            self.results.push(CheckResult::fail(
                name,
                format!("max rel err {worst:.2e} exceeds {GRAD_TOL:.0e}"),
            ));
        }
    }
}

fn uniform(lo: f64, hi: f64, n: usize) -> impl FnMut(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform away from zero: |x| >= margin keeps relu kinks at a safe
/// distance from the finite-difference stencil.
fn uniform_nudged(margin: f64, n: usize) -> impl FnMut(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| {
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if v.abs() < margin {
                    margin * if v < 0.0 { -1.0 } else { 1.0 }
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Finite-difference validation of every differentiable operation and of
/// the composed blocks, in 64-bit mode. `corrupt` negates one analytic
/// gradient to prove the harness catches broken gradients.
pub fn gradient_checks(corrupt: bool) -> Vec<CheckResult> {
    let mut g = GradCheck { results: Vec::new(), corrupt };
    let mut rng = ChaCha8Rng::seed_from_u64(0xabcd);

    // weights that scalarize outputs without collapsing gradients
    let w6 = rand_tensor(&mut rng, &[6], -1.0, 1.0);
    let weighted = move |t: &Tensor<f64>, w: &Tensor<f64>| -> Result<Tensor<f64>> {
        Ok(t.mul(w)?.sum_all())
    };

    {
        let c = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        let w = w6.clone();
        g.run("grad.add_sub", &[6], uniform(-1.0, 1.0, 6), move |x| {
            weighted(&x.add(&c)?.sub(x)?.add(x)?, &w)
        });
    }
    {
        let c = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        let w = w6.clone();
        g.run("grad.mul", &[6], uniform(-1.0, 1.0, 6), move |x| {
            weighted(&x.mul(&c)?.mul(x)?, &w)
        });
    }
    {
        let w = w6.clone();
        g.run("grad.scale_neg", &[6], uniform(-1.0, 1.0, 6), move |x| {
            weighted(&x.scale(1.7).neg().add_scalar(0.3), &w)
        });
    }
    {
        let w = w6.clone();
        g.run("grad.relu", &[6], uniform_nudged(1e-3, 6), move |x| weighted(&x.relu(), &w));
    }
    {
        let w = w6.clone();
        g.run("grad.gelu", &[6], uniform(-2.0, 2.0, 6), move |x| weighted(&x.gelu(), &w));
    }
    {
        let w = w6.clone();
        g.run("grad.ln_recip_sqrt", &[6], uniform(0.5, 2.5, 6), move |x| {
            weighted(&x.ln().add(&x.recip())?.add(&x.sqrt_clamped())?, &w)
        });
    }
    {
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        g.run("grad.softmax", &[2, 5], uniform(-2.0, 2.0, 10), move |x| {
            weighted(&x.softmax(1)?, &w)
        });
    }
    {
        let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        g.run("grad.layer_norm", &[3, 4], uniform(-1.0, 1.0, 12), move |x| {
            weighted(&x.layer_norm(&gamma, &beta, 1e-5)?, &w)
        });
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let beta = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        g.run("grad.layer_norm_gamma", &[4], uniform(0.5, 1.5, 4), move |gm| {
            weighted(&x.layer_norm(gm, &beta, 1e-5)?, &w)
        });
    }
    {
        let b = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        g.run("grad.matmul", &[4, 3], uniform(-1.0, 1.0, 12), move |x| {
            weighted(&x.matmul(&b)?, &w)
        });
        let a = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 4, 2], -1.0, 1.0);
        g.run("grad.matmul_batched_rhs", &[2, 3, 2], uniform(-1.0, 1.0, 12), move |x| {
            weighted(&a.matmul(x)?, &w)
        });
        let bt = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        g.run("grad.matmul_nt", &[4, 3], uniform(-1.0, 1.0, 12), move |x| {
            weighted(&x.matmul_nt(&bt)?, &w)
        });
    }
    {
        let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        g.run("grad.linear_weight", &[3, 2], uniform(-1.0, 1.0, 6), move |wt| {
            weighted(&x.linear(wt, &b)?, &w)
        });
        let wt = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        g.run("grad.linear_bias", &[2], uniform(-0.5, 0.5, 2), move |b| {
            weighted(&x.linear(&wt, b)?, &w)
        });
    }
    for stride in [1usize, 2] {
        let k = rand_tensor(&mut rng, &[3, 3, 2, 2], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let oh = (5 - 1) / stride + 1;
        let w = rand_tensor(&mut rng, &[oh, oh, 2], -1.0, 1.0);
        g.run(
            &format!("grad.conv2d_s{stride}_input"),
            &[5, 5, 2],
            uniform(-1.0, 1.0, 50),
            move |x| weighted(&x.conv2d(&k, &b, stride)?, &w),
        );
    }
    {
        let x = rand_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let w = rand_tensor(&mut rng, &[4, 4, 2], -1.0, 1.0);
        g.run("grad.conv2d_kernel", &[3, 3, 2, 2], uniform(-0.5, 0.5, 36), move |k| {
            weighted(&x.conv2d(k, &b, 1)?, &w)
        });
    }
    {
        let w = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        g.run("grad.global_avg_pool", &[4, 5, 3], uniform(-1.0, 1.0, 60), move |x| {
            weighted(&x.global_avg_pool()?, &w)
        });
        let w = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        g.run("grad.adaptive_avg_pool", &[4, 5, 2], uniform(-1.0, 1.0, 40), move |x| {
            weighted(&x.adaptive_avg_pool(2, 3)?, &w)
        });
        let w = rand_tensor(&mut rng, &[7, 4, 2], -1.0, 1.0);
        g.run("grad.bilinear_resize", &[3, 5, 2], uniform(-1.0, 1.0, 30), move |x| {
            weighted(&x.bilinear_resize(7, 4)?, &w)
        });
        let w = rand_tensor(&mut rng, &[4, 2, 2], -1.0, 1.0);
        g.run("grad.pixel_shuffle", &[2, 1, 8], uniform(-1.0, 1.0, 16), move |x| {
            weighted(&x.pixel_shuffle(2)?, &w)
        });
    }
    {
        // window partition / reverse round trip through the padded case
        let grid = WindowGrid::new(8, 8, 7).unwrap();
        let w = rand_tensor(&mut rng, &[8, 8, 2], -1.0, 1.0);
        g.run("grad.window_ops", &[8, 8, 2], uniform(-1.0, 1.0, 128), move |x| {
            let wins = window_partition(x, &grid)?;
            weighted(&window_reverse(&wins, &grid)?, &w)
        });
    }
    {
        let other = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        g.run("grad.concat", &[2, 2], uniform(-1.0, 1.0, 4), move |x| {
            weighted(&crate::tensor::concat_last(&[x.clone(), other.clone()])?, &w)
        });
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        g.run("grad.broadcast_ops", &[2, 3], uniform(0.5, 1.5, 6), move |x| {
            weighted(&x.add_bcast(&b)?.mul_bcast(&x.sum_all().recip())?, &w)
        });
    }
    {
        let mut local = ChaCha8Rng::seed_from_u64(0xfeed);
        let grid = WindowGrid::new(8, 8, 7).unwrap();
        let heads = AttentionHeads::new(4, 2).unwrap();
        let bias = RelativePositionBias::new("b", 7, 2, &mut local);
        let k = rand_tensor(&mut local, &[8, 8, 4], -1.0, 1.0);
        let v = rand_tensor(&mut local, &[8, 8, 4], -1.0, 1.0);
        let w = rand_tensor(&mut local, &[8, 8, 4], -1.0, 1.0);
        g.run("grad.windowed_attention", &[8, 8, 4], uniform(-1.0, 1.0, 256), move |q| {
            weighted(&windowed_cross_attention(q, &k, &v, &bias, heads, &grid)?, &w)
        });
    }

    // composed blocks
    {
        let mut local = ChaCha8Rng::seed_from_u64(0xb10c);
        let cfg = StageConfig { channels: vec![4, 8, 8, 8], heads: vec![2, 2, 2, 2], window: 7 };
        let params = SamParams::<f64>::new("s", 3, 5, 8, 2, 7, &mut local);
        let q = rand_tensor(&mut local, &[8, 9, 3], -1.0, 1.0);
        let e = rand_tensor(&mut local, &[8, 9, 5], -1.0, 1.0);
        let w = rand_tensor(&mut local, &[8, 9, 8], -1.0, 1.0);
        let shape = params.w_q.tensor.shape().to_vec();
        g.run("grad.sam_block", &shape.clone(), uniform(-0.5, 0.5, 64), move |wq| {
            let mut probe = params.clone();
            probe.w_q = Parameter { name: "w".into(), tensor: wq.clone() };
            let qm = PixelQueryMap { q: q.clone(), scale_div: 32 };
            let out = sam_block(&qm, &e, &probe, &cfg, 2, FinalResidual::Literal)?;
            weighted(&out.q, &w)
        });
    }
    {
        let mut local = ChaCha8Rng::seed_from_u64(0x9901);
        let params = PqiParams::<f64>::new("pqi", 2, 4, &mut local);
        let w = rand_tensor(&mut local, &[7, 8, 4], -1.0, 1.0);
        g.run("grad.pqi_init", &[7, 8, 2], uniform(-1.0, 1.0, 112), move |e4| {
            weighted(&pqi_init(e4, &params)?.q, &w)
        });
    }
    {
        // bin widths -> centers -> composed depth, through the BCP MLP
        let mut local = ChaCha8Rng::seed_from_u64(0x9902);
        let bcp = BcpParams::<f64>::new("bcp", 3, 4, 5, &mut local);
        let q = rand_tensor(&mut local, &[4, 4, 3], -1.0, 1.0);
        let probs = {
            let raw = rand_vec(&mut local, 2 * 5, 0.1, 1.0);
            let mut pdata = Vec::new();
            for row in raw.chunks(5) {
                let s: f64 = row.iter().sum();
                pdata.extend(row.iter().map(|v| v / s));
            }
            Tensor::constant(&[1, 2, 5], pdata).unwrap()
        };
        let w = rand_tensor(&mut local, &[1, 2], -1.0, 1.0);
        let shape = bcp.w2.tensor.shape().to_vec();
        let q2 = q.clone();
        let bcp2 = bcp.clone();
        // rejection-sample points whose raw width logits sit clear of the
        // relu kink, so the finite-difference stencil never crosses it
        let q_s = q.clone();
        let bcp_s = bcp.clone();
        let kink_free = move |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let cand: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.6..0.6)).collect();
                let mut probe = bcp_s.clone();
                probe.w2 =
                    Parameter { name: "w2".into(), tensor: Tensor::constant(&shape, cand.clone()).unwrap() };
                let raw = probe.raw_widths(&q_s).unwrap();
                if raw.data().iter().all(|v| v.abs() > 1e-3) {
                    return cand;
                }
            }
        };
        let shape2 = bcp.w2.tensor.shape().to_vec();
        g.run("grad.bins_to_depth", &shape2, kink_free, move |w2| {
            let mut probe = bcp2.clone();
            probe.w2 = Parameter { name: "w2".into(), tensor: w2.clone() };
            let spec = predict_bin_widths(&q2, &probe, 0.001, 10.0)?;
            weighted(&compose_depth(&probs, &spec.centers)?, &w)
        });
    }
    {
        let mut local = ChaCha8Rng::seed_from_u64(0x9903);
        let gt = rand_tensor(&mut local, &[3, 3], 0.8, 8.0);
        let gt_data = gt.data().to_vec();
        let mask = vec![true; 9];
        g.run("grad.silog_loss", &[3, 3], uniform(0.7, 9.0, 9), move |pred| {
            let gt = Tensor::constant(&[3, 3], gt_data.clone())?;
            silog_loss(pred, &gt, &mask, LossConfig::default())
        });
    }
    {
        // end to end: composed depth back to the first backbone convolution
        let cfg = tiny_model_config();
        let model = DepthModel::<f64>::init(cfg, 21).unwrap();
        let img = Tensor::constant(
            &[192, 192, 3],
            (0..192 * 192 * 3).map(|v| ((v * 23 % 71) as f64) / 71.0).collect(),
        )
        .unwrap();
        let shape = {
            let mut s = Vec::new();
            model.backbone.visit(&mut |p| {
                if p.name == "backbone.stage1.conv1.weight" {
                    s = p.tensor.shape().to_vec();
                }
            });
            s
        };
        let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(0x9904), &[48, 48], -1.0, 1.0);
        g.run("grad.full_forward", &shape.clone(), uniform(-0.3, 0.3, 54), move |conv1| {
            let mut probe = model.clone();
            probe.visit_parameters_mut(&mut |p| {
                if p.name == "backbone.stage1.conv1.weight" {
                    p.tensor = conv1.clone();
                }
            });
            let out = probe.forward(&img)?;
            weighted(&out.depth, &w)
        });
    }

    g.results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_is_green() {
        let results = fast_checks();
        let report = render_report(&results);
        assert!(all_passed(&results), "{report}");
        assert_eq!(results.len(), 14);
    }

    #[test]
    fn corruption_fixture_is_caught_by_name() {
        // negating one analytic gradient must fail exactly that check
        let results = gradient_checks(true);
        let bad: Vec<&CheckResult> = results.iter().filter(|r| !r.passed).collect();
        assert_eq!(bad.len(), 1, "{}", render_report(&results));
        assert_eq!(bad[0].name, CORRUPTIBLE_CHECK);
    }
}
