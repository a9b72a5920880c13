//! Parameter initialization, paired normal/abnormal training, checkpoints and
//! finite-difference gradient verification.

mod adam;
mod checkpoint;
mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamState, Optimizer};
pub use checkpoint::{sidecar_path, Checkpoint, RngState};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};

use crate::data::VideoData;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{
    batch_loss_and_grad, init_params, LossRecord, ModelDims, ModelParams, VideoSample,
};

/// Stream of the shuffling generator; stream 0 of the same seed initializes weights.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Videos per step, half normal and half abnormal.
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub margin: f64,
    pub k: usize,
    /// Clamp for log terms of the cross-entropy.
    pub epsilon: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-3,
            batch_size: 64,
            epochs: 100,
            alpha: 1e-4,
            margin: 100.0,
            k: 3,
            epsilon: 1e-8,
            seed: 0,
            optimizer: Optimizer::default(),
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            k: self.k,
            margin: self.margin,
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size {} must be even and >= 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.loss().validate()?;
        self.dims.validate()
    }
}

/// Runs one optimizer step on a balanced batch.
pub fn train_step<'a>(
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    normal: &[VideoSample<'a, f32>],
    abnormal: &[VideoSample<'a, f32>],
    config: &TrainConfig,
) -> Result<LossRecord> {
    if normal.len() != abnormal.len() || normal.is_empty() {
        return Err(Error::Config(format!(
            "train step needs equal, non-empty halves ({} normal, {} abnormal)",
            normal.len(),
            abnormal.len()
        )));
    }
    let batch: Vec<VideoSample<'a, f32>> = normal.iter().chain(abnormal).copied().collect();
    let (record, grad) = batch_loss_and_grad(params, &batch, &config.loss())?;
    if !record.total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            max_weight: params.max_abs(),
            max_grad: grad.max_abs(),
        });
    }
    adam_update(
        params,
        &grad,
        state,
        &config.optimizer,
        config.learning_rate,
        config.weight_decay,
    )?;
    Ok(record)
}

/// Mean losses over the steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_v: f64,
    pub loss_s: f64,
}

/// Cycles through a shuffled index list, reshuffling whenever it runs dry.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn sample<'a>(v: &'a VideoData) -> VideoSample<'a, f32> {
    VideoSample {
        features: v.features.view(),
        text: v.text.view(),
        label: v.record.label,
    }
}

/// Training loop state. One epoch is one pass over the abnormal videos, each step
/// pairing `batch_size / 2` abnormal with `batch_size / 2` normal videos.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    pub epoch: usize,
    rng: ChaCha8Rng,
    normal: Vec<&'d VideoData>,
    abnormal: Vec<&'d VideoData>,
    pub history: Vec<EpochLog>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, videos: &'d [VideoData]) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(&config.dims, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        let optimizer = AdamState::new(params.num_params());
        Self::assemble(config, params, optimizer, 0, rng, videos)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, videos: &'d [VideoData]) -> Result<Self> {
        ckpt.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        let pos: u128 =
            ckpt.rng.word_pos.parse().map_err(|_| {
                Error::Config(format!("bad rng word position {:?}", ckpt.rng.word_pos))
            })?;
        rng.set_word_pos(pos);
        Self::assemble(
            ckpt.config,
            ckpt.params,
            ckpt.optimizer,
            ckpt.epoch,
            rng,
            videos,
        )
    }

    fn assemble(
        config: TrainConfig,
        params: ModelParams<f32>,
        optimizer: AdamState<f32>,
        epoch: usize,
        rng: ChaCha8Rng,
        videos: &'d [VideoData],
    ) -> Result<Self> {
        let (abnormal, normal): (Vec<&VideoData>, Vec<&VideoData>) =
            videos.iter().partition(|v| v.record.is_abnormal());
        if normal.is_empty() {
            return Err(Error::MissingClass("normal"));
        }
        if abnormal.is_empty() {
            return Err(Error::MissingClass("abnormal"));
        }
        for v in videos {
            if v.snippets() < config.k {
                return Err(Error::Config(format!(
                    "video {} has {} snippets, fewer than k = {}",
                    v.record.video_id,
                    v.snippets(),
                    config.k
                )));
            }
            if v.features.dim().2 != config.dims.visual_dim
                || (config.dims.text_dim != 0 && v.text.ncols() != config.dims.text_dim)
            {
                return Err(Error::shape(
                    "training data",
                    format!(
                        "video {} has dims ({}, {}), model expects ({}, {})",
                        v.record.video_id,
                        v.features.dim().2,
                        v.text.ncols(),
                        config.dims.visual_dim,
                        config.dims.text_dim
                    ),
                ));
            }
        }
        Ok(Self {
            config,
            params,
            optimizer,
            epoch,
            rng,
            normal,
            abnormal,
            history: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.abnormal.len().div_ceil(self.config.batch_size / 2)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let half = self.config.batch_size / 2;
        let mut abnormal = Sampler::new(self.abnormal.len(), &mut self.rng);
        let mut normal = Sampler::new(self.normal.len(), &mut self.rng);
        let steps = self.steps_per_epoch();
        let mut sum = LossRecord::default();
        for _ in 0..steps {
            let a: Vec<_> = (0..half)
                .map(|_| sample(self.abnormal[abnormal.next(&mut self.rng)]))
                .collect();
            let n: Vec<_> = (0..half)
                .map(|_| sample(self.normal[normal.next(&mut self.rng)]))
                .collect();
            let r = train_step(&mut self.params, &mut self.optimizer, &n, &a, &self.config)?;
            sum.total += r.total;
            sum.margin += r.margin;
            sum.classifier += r.classifier;
        }
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            loss: sum.total / steps as f64,
            loss_v: sum.margin / steps as f64,
            loss_s: sum.classifier / steps as f64,
        };
        self.history.push(log);
        Ok(log)
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState {
                seed: self.config.seed,
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        }
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, videos: &[VideoData]) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, videos)?;
    trainer.run(|_| {})?;
    Ok(trainer.checkpoint())
}
