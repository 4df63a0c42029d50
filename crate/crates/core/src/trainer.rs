//! Seeded training loop with per-window updates.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geospace::{label_targets, IntervalSpec};
use crate::ingest::{make_windows, Dataset, Window};
use crate::model::{Model, ModelConfig};
use crate::relay::Variant;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub spec: IntervalSpec,
    pub seq_len: usize,
    /// Hidden width of every head; `None` means `d`.
    pub head_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 10,
            lr: 0.01,
            epochs: 25,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            variant: Variant::Full,
            encoder: EncoderConfig::default(),
            spec: IntervalSpec::default(),
            seq_len: 20,
            head_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.seq_len == 0 || self.d == 0 {
            return Err(Error::invalid("epochs, seq_len and d must be at least 1"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        self.encoder.validate()?;
        self.spec.validate()
    }

    pub fn model_config(&self, num_users: usize, num_pois: usize) -> ModelConfig {
        ModelConfig {
            num_users,
            num_pois,
            d: self.d,
            variant: self.variant,
            encoder: self.encoder,
            spec: self.spec,
            head_hidden: self.head_hidden.unwrap_or(self.d),
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols))
                .collect()
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data.iter_mut().zip(&p.grad.data) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[i].data;
                    let v = &mut self.v[i].data;
                    for (k, (w, &g)) in p.value.data.iter_mut().zip(&p.grad.data).enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Non-overlapping windows with interval labels attached.
pub fn labeled_windows(ds: &Dataset, seq_len: usize, spec: &IntervalSpec) -> Result<Vec<Window>> {
    label_targets(make_windows(ds, seq_len)?, ds, spec)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean per-step total loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, cfg, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with<F>(ds: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64),
{
    cfg.validate()?;
    ds.validate()?;
    let windows = labeled_windows(ds, cfg.seq_len, &cfg.spec)?;
    if windows.is_empty() {
        return Err(Error::invalid("training data yields no windows"));
    }
    let steps: usize = windows.iter().map(Window::len).sum();

    let mut rng = SplitMix64::new(cfg.seed);
    let mut init_rng = rng.fork(1);
    let mut model = Model::init(cfg.model_config(ds.num_users, ds.num_pois), &mut init_rng)?;
    let mut opt = Optimizer::new(cfg, &model.store);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (pos, &wi) in order.iter().enumerate() {
            let w = &windows[wi];
            model.store.zero_grad();
            let mut g = Graph::new();
            let root = model.net.window_loss(&mut g, &model.store, w)?;
            let loss = g.scalar(root);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {loss} at epoch {epoch}, window {pos} (user {})",
                    w.user_id
                )));
            }
            g.backward(root, &mut model.store)?;
            opt.step(&mut model.store);
            total += loss;
        }
        let mean = total / steps as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    let final_loss = *epoch_losses.last().expect("epochs >= 1");
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(*cfg, model, cfg.epochs, final_loss, rng.state()),
        epoch_losses,
    })
}
