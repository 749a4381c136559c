//! Adam, cosine schedule, the training loop and the two ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::heatmaps::{self, Heatmap, KeypointSet};
use crate::model::{ForwardOptions, Model, ModelConfig, HEATMAP_STRIDE};
use crate::params::ParamSet;
use crate::posembed::PeKind;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::synth::{self, FigureSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "TRANSPOSE_THREADS";

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_sigma() -> f64 {
    heatmaps::DEFAULT_SIGMA
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Seeds the parameters and every training-time random draw.
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_alpha")]
    pub pck_alpha: f64,
    /// Save a checkpoint every this many epochs (0: only the final model).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Recipe of the standard toy run.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_start: 3e-3,
            lr_end: 3e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 7,
            sigma: heatmaps::DEFAULT_SIGMA,
            pck_alpha: 0.05,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return fail("learning rates need lr_start >= lr_end > 0");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return fail("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.sigma <= 0.0 || self.pck_alpha <= 0.0 {
            return fail("sigma and pck_alpha must be positive");
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((t, g), m) in params.tensors_mut().zip(grads).zip(&state.m) {
        if t.len() != g.len() || t.len() != m.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: t.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t_step = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t_step);
    let c2 = 1.0 - b2.powi(t_step);
    let step_size = T::cast(lr / c1);
    let (b1, b2, eps) = (T::cast(b1), T::cast(b2), T::cast(state.eps));
    let one = T::one();
    let c2_sqrt = T::cast(c2.sqrt());
    for (((t, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &gi), mi), vi) in t
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *p -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    if epochs <= 1 {
        return lr_start;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss.
    pub loss: f64,
    pub test_pck: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: f64,
    pub final_model_path: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_pck(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_pck)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,test_pck\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, e.test_pck));
        }
        out
    }

    /// `report.json` and `curve.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("curve.csv"), self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the final model go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Worker pool sized by `TRANSPOSE_THREADS`, defaulting to the available cores.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
            })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Prepared<T> {
    image: Tensor<T>,
    target: Heatmap<T>,
    visible: Vec<bool>,
}

fn prepare<T: Scalar>(
    sample: &FigureSample,
    config: &ModelConfig,
    sigma: f64,
) -> Result<Prepared<T>> {
    let (h, w) = (sample.height(), sample.width());
    let target = heatmaps::gaussian_target(
        &sample.keypoints,
        sigma,
        h / HEATMAP_STRIDE,
        w / HEATMAP_STRIDE,
        HEATMAP_STRIDE,
    )?;
    if target.channels() != config.keypoints {
        return Err(Error::Config(format!(
            "dataset has {} keypoints, model predicts {}",
            target.channels(),
            config.keypoints
        )));
    }
    Ok(Prepared {
        image: sample.image.cast(),
        target,
        visible: sample.keypoints.visibility(),
    })
}

/// Loss and parameter gradients of one sample.
fn sample_grad<T: Scalar>(
    model: &Model<T>,
    p: &Prepared<T>,
    dropout: Option<&mut SplitMix64>,
) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let x = tape.constant(p.image.clone());
    let opts = ForwardOptions {
        dropout,
        capture_heads: false,
    };
    let out = model.forward_tape(&mut tape, &bound, x, opts)?;
    let loss = heatmaps::mse_loss_tape(&mut tape, out.heatmaps, &p.target, &p.visible)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.grads(&tape)))
}

/// Inference heatmaps decoded to keypoints.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<f64>,
) -> Result<(KeypointSet, Heatmap<T>)> {
    let (hm, _) = model.forward(&image.cast(), false)?;
    let hm = Heatmap::new(hm)?;
    Ok((heatmaps::decode(&hm, HEATMAP_STRIDE), hm))
}

/// Pooled PCK@`alpha` (diagonal-normalized) over `samples`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[FigureSample],
    alpha: f64,
    pool: &rayon::ThreadPool,
) -> Result<f64> {
    let preds = pool.install(|| {
        samples
            .par_iter()
            .map(|s| predict(model, &s.image).map(|(k, _)| k))
            .collect::<Result<Vec<_>>>()
    })?;
    let norm = samples
        .first()
        .map_or(1.0, |s| heatmaps::diagonal(s.height(), s.width()));
    Ok(heatmaps::pck_pooled(
        preds.iter().zip(samples.iter().map(|s| &s.keypoints)),
        alpha,
        norm,
    ))
}

/// Trains a freshly built model on `train`, evaluating on `test` after each epoch.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train: &[FigureSample],
    test: &[FigureSample],
    options: &TrainOptions,
) -> Result<(Model<T>, TrainReport)> {
    train_config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let pool = thread_pool()?;
    let mut model = Model::<T>::build(model_config.clone(), train_config.seed)?;
    let prepared = train
        .iter()
        .map(|s| prepare::<T>(s, model_config, train_config.sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(
        model.params(),
        train_config.beta1,
        train_config.beta2,
        train_config.adam_eps,
    );
    let mut stream = SplitMix64::derive(train_config.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(train_config.epochs);
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
    }

    for epoch in 0..train_config.epochs {
        let lr = cosine_lr(
            epoch,
            train_config.epochs,
            train_config.lr_start,
            train_config.lr_end,
        );
        let epoch_seed = stream.next_u64();
        SplitMix64::derive(epoch_seed, 0).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(train_config.batch_size).enumerate() {
            let model_ref = &model;
            let results = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &idx)| {
                        let mut rng = SplitMix64::derive(
                            epoch_seed,
                            (b * train_config.batch_size + slot + 1) as u64,
                        );
                        sample_grad(model_ref, &prepared[idx], Some(&mut rng))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let inv = T::one() / T::count(batch.len());
            let mut grads: Vec<Vec<T>> = model
                .params()
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss.as_f64();
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, &v)| *a += v * inv);
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            adam_step(model.params_mut(), &grads, &mut adam, lr)?;
            loss_sum += batch_loss;
            batches += 1;
        }
        let test_pck = if test.is_empty() {
            0.0
        } else {
            evaluate(&model, test, train_config.pck_alpha, &pool)?
        };
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            test_pck,
        };
        if options.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.6e}  test pck {:.4}  ({:.0}s)",
                epoch,
                lr,
                stats.loss,
                test_pck,
                started.elapsed().as_secs_f64()
            );
        }
        epochs.push(stats);
        if let Some(dir) = &options.out_dir {
            let every = train_config.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < train_config.epochs {
                checkpoint::save_model(&model, &dir.join(format!("epoch_{:03}.tpose", epoch + 1)))?;
            }
        }
    }

    let final_model_path = match &options.out_dir {
        Some(dir) => {
            let path = dir.join("model.tpose");
            checkpoint::save_model(&model, &path)?;
            Some(path)
        }
        None => None,
    };
    let report = TrainReport {
        model: model_config.clone(),
        train: train_config.clone(),
        train_samples: train.len(),
        test_samples: test.len(),
        epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
        final_model_path,
    };
    if let Some(dir) = &options.out_dir {
        report.write(dir)?;
    }
    Ok((model, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPck {
    pub height: usize,
    pub width: usize,
    pub pck: f64,
}

/// Regenerates the figures of `seeds` at each resolution and reports PCK.
pub fn eval_resolutions<T: Scalar>(
    model: &Model<T>,
    seeds: &[u64],
    occlusion_p: f64,
    resolutions: &[(usize, usize)],
    alpha: f64,
) -> Result<Vec<ResolutionPck>> {
    let pool = thread_pool()?;
    resolutions
        .iter()
        .map(|&(height, width)| {
            let samples = seeds
                .iter()
                .map(|&s| {
                    synth::sample_chain(s, height, width, occlusion_p, model.config().keypoints)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResolutionPck {
                height,
                width,
                pck: evaluate(model, &samples, alpha, &pool)?,
            })
        })
        .collect()
}

pub fn resolutions_csv(rows: &[ResolutionPck]) -> String {
    let mut out = String::from("height,width,pck\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.height, r.width, r.pck));
    }
    out
}

#[derive(Debug)]
pub struct AblationRun<T> {
    pub pe_kind: PeKind,
    pub model: Model<T>,
    pub report: TrainReport,
}

/// Three identical runs that differ only in the position embedding.
pub fn ablate_pe<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[FigureSample],
    test_set: &[FigureSample],
) -> Result<Vec<AblationRun<T>>> {
    [PeKind::Sine2D, PeKind::Learnable, PeKind::None]
        .into_iter()
        .map(|pe_kind| {
            let config = ModelConfig {
                pe_kind,
                ..model_config.clone()
            };
            let (model, report) = train(
                &config,
                train_config,
                train_set,
                test_set,
                &TrainOptions::default(),
            )?;
            Ok(AblationRun {
                pe_kind,
                model,
                report,
            })
        })
        .collect()
}
