//! Training driver: forward pipeline, SILog backward, Adam updates with a
//! linearly decayed learning rate, loss logging and periodic checkpoints.

use std::io::Write;
use std::path::PathBuf;

use crate::config::{DataSource, RunConfig};
use crate::data::checkpoint::save_checkpoint;
use crate::data::{load_list_dataset, synth_dataset, DepthSample};
use crate::error::{Error, Result};
use crate::metrics::{silog_loss, LossConfig};
use crate::model::DepthModel;
use crate::optim::{linear_lr, Adam, AdamConfig};
use crate::scalar::{Precision, Scalar};

pub struct TrainOutcome<T: Scalar> {
    pub model: DepthModel<T>,
    pub samples: Vec<DepthSample>,
    /// One "step loss lr" line per step.
    pub log_lines: Vec<String>,
    pub checkpoint: PathBuf,
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<DepthSample>> {
    match cfg.data.source {
        DataSource::Synthetic => synth_dataset(
            cfg.train.seed,
            cfg.data.count,
            (cfg.data.size[0], cfg.data.size[1]),
            cfg.model.d_max,
        ),
        DataSource::ListFile => load_list_dataset(std::path::Path::new(&cfg.data.list)),
    }
}

/// Run the training loop described by the config, returning the trained
/// model, its training samples and the loss log. The loss is evaluated
/// before each update, so the first line reflects the initialization.
pub fn run_training<T: Scalar>(cfg: &RunConfig, precision: Precision) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let samples = load_samples(cfg)?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let mut model = DepthModel::<T>::init(cfg.model.clone(), cfg.train.seed)?;
    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    });
    let loss_cfg = LossConfig::default();

    let out_dir = PathBuf::from(&cfg.io.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt_path = cfg.io.checkpoint_path();

    let batch = cfg.train.batch_size;
    let log_path = out_dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let mut log_lines = Vec::with_capacity(cfg.train.steps as usize);
    for step in 1..=cfg.train.steps {
        let mut batch_ids = Vec::with_capacity(batch);
        let mut total: Option<crate::tensor::Tensor<T>> = None;
        for b in 0..batch {
            let idx = ((step - 1) as usize * batch + b) % samples.len();
            let sample = &samples[idx];
            batch_ids.push(sample.id.clone());
            let image = sample.image_tensor::<T>();
            let pred = model.forward_depth_full(&image)?;
            let gt = sample.depth_tensor::<T>();
            let loss = silog_loss(&pred, &gt, &sample.mask, loss_cfg)?;
            total = Some(match total {
                Some(t) => t.add(&loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch is non-empty").scale(T::from_f64(1.0 / batch as f64));
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            return Err(Error::numeric(
                "train",
                format!(
                    "non-finite loss {loss_val} at step {step}, batch [{}]",
                    batch_ids.join(", ")
                ),
            ));
        }
        loss.backward()?;
        let lr = linear_lr(cfg.train.lr_start, cfg.train.lr_end, step, cfg.train.steps);
        opt.step(&mut model, lr);
        let line = format!("{step} {loss_val:.9e} {lr:.9e}");
        writeln!(log_file, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        log_lines.push(line);

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &model, precision)?;
        }
    }
    save_checkpoint(&ckpt_path, &model, precision)?;

    Ok(TrainOutcome { model, samples, log_lines, checkpoint: ckpt_path })
}

/// Parse one "step loss lr" log line.
pub fn parse_log_line(line: &str) -> Result<(u64, f64, f64)> {
    let mut fields = line.split_whitespace();
    let parse_err = || Error::Format {
        path: "train.log".into(),
        msg: format!("bad log line {line:?}"),
    };
    match (fields.next(), fields.next(), fields.next(), fields.next()) {
        (Some(s), Some(l), Some(r), None) => Ok((
            s.parse().map_err(|_| parse_err())?,
            l.parse().map_err(|_| parse_err())?,
            r.parse().map_err(|_| parse_err())?,
        )),
        _ => Err(parse_err()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::checkpoint::load_checkpoint;

    fn micro_config(tag: &str) -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.model.backbone_channels = vec![2, 3, 4, 5];
        cfg.model.decoder_channels = vec![4, 8, 8, 12];
        cfg.model.heads = vec![2, 2, 2, 2];
        cfg.model.pqi_channels = 6;
        cfg.model.bcp_hidden = 8;
        cfg.model.n_bins = 8;
        cfg.data.size = [192, 192];
        cfg.data.count = 2;
        cfg.train.steps = 2;
        cfg.train.batch_size = 1;
        cfg.io.out_dir = std::env::temp_dir()
            .join(format!("skipdepth-train-{tag}-{}", std::process::id()))
            .display()
            .to_string();
        cfg.io.checkpoint = String::new();
        cfg
    }

    #[test]
    fn zero_steps_checkpoints_the_initialization() {
        let mut cfg = micro_config("zerosteps");
        cfg.train.steps = 0;
        let out = run_training::<f32>(&cfg, Precision::F32).unwrap();
        assert!(out.log_lines.is_empty());
        let (loaded, _) = load_checkpoint::<f32>(&out.checkpoint).unwrap();
        let init = DepthModel::<f32>::init(cfg.model.clone(), cfg.train.seed).unwrap();
        let mut a = Vec::new();
        init.visit_parameters(&mut |p| a.extend_from_slice(p.tensor.data()));
        let mut b = Vec::new();
        loaded.visit_parameters(&mut |p| b.extend_from_slice(p.tensor.data()));
        assert_eq!(a, b);
        std::fs::remove_dir_all(&cfg.io.out_dir).ok();
    }

    #[test]
    fn diverging_run_aborts_with_a_diagnostic() {
        // an absurd learning rate blows the parameters up within a few
        // steps; the run must abort with an error, not log garbage
        let mut cfg = micro_config("diverge");
        cfg.train.steps = 10;
        cfg.train.lr_start = 1e6;
        cfg.train.lr_end = 1e6;
        let msg = match run_training::<f32>(&cfg, Precision::F32) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("diverging run completed"),
        };
        assert!(
            msg.contains("non-finite") || msg.contains("finite"),
            "unexpected abort reason: {msg}"
        );
        std::fs::remove_dir_all(&cfg.io.out_dir).ok();
    }

    #[test]
    fn two_runs_same_seed_produce_identical_logs() {
        let cfg = micro_config("det");
        let a = run_training::<f32>(&cfg, Precision::F32).unwrap();
        let b = run_training::<f32>(&cfg, Precision::F32).unwrap();
        assert_eq!(a.log_lines, b.log_lines);
        assert_eq!(a.log_lines.len(), 2);
        let (step, loss, lr) = parse_log_line(&a.log_lines[0]).unwrap();
        assert_eq!(step, 1);
        assert!(loss.is_finite() && lr > 0.0);
        std::fs::remove_dir_all(&cfg.io.out_dir).ok();
    }
}
