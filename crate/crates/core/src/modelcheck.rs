//! Finite-difference check of a whole model step on a tiny random dataset.

use crate::diffcore::{grad_check, GradCheckReport};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::geospace::{label_targets, IntervalSpec};
use crate::ingest::{make_windows, CheckIn, Dataset, Window};
use crate::model::{Model, ModelConfig};
use crate::relay::Variant;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheckConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub users: usize,
    pub pois: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderKind,
    pub variant: Variant,
    /// Prediction steps per checked window.
    pub steps: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self {
            d: 4,
            m: 6,
            n: 5,
            users: 3,
            pois: 10,
            hidden_dim: 4,
            encoder: EncoderKind::Gru,
            variant: Variant::Full,
            steps: 1,
            eps: 1e-6,
            seed: 0,
        }
    }
}

/// `events` check-ins per user over `pois` random locations near (1, 1), with
/// gaps spread across the first `spec.m` temporal bins.
pub fn random_dataset(
    users: usize,
    pois: usize,
    events: usize,
    spec: &IntervalSpec,
    rng: &mut SplitMix64,
) -> Result<Dataset> {
    if users == 0 || pois == 0 {
        return Err(Error::invalid("need at least one user and one POI"));
    }
    // 1 km is about 0.009 degrees; keep points within the spatial bin range
    let half_span = (spec.dd * spec.n as f64 * 0.009 / 3.0).min(1.0);
    let coords: Vec<(f64, f64)> = (0..pois)
        .map(|_| {
            (
                1.0 + rng.uniform(-half_span, half_span),
                1.0 + rng.uniform(-half_span, half_span),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(users * events);
    for u in 0..users {
        let mut t = 1_333_476_000 + rng.below(604_800) as i64;
        for _ in 0..events {
            let p = rng.below(pois);
            out.push(CheckIn::new(u, p, coords[p].0, coords[p].1, t));
            let hours = rng.uniform(0.0, spec.dt * spec.m as f64);
            t += (hours * 3600.0).round() as i64 + 1;
        }
    }
    Dataset::from_events(out, coords)
}

/// One labeled window per user, each `steps` long.
pub fn check_windows(
    cfg: &ModelCheckConfig,
    spec: &IntervalSpec,
) -> Result<(Dataset, Vec<Window>)> {
    let mut rng = SplitMix64::new(cfg.seed).fork(1);
    let ds = random_dataset(cfg.users, cfg.pois, cfg.steps + 1, spec, &mut rng)?;
    let windows = label_targets(make_windows(&ds, cfg.steps)?, &ds, spec)?;
    Ok((ds, windows))
}

/// Gradient check of the summed window losses of every user.
pub fn model_grad_check(cfg: &ModelCheckConfig) -> Result<GradCheckReport> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let spec = IntervalSpec::new(1.0, cfg.m, 1.0, cfg.n)?;
    let (ds, windows) = check_windows(cfg, &spec)?;
    let mcfg = ModelConfig {
        num_users: ds.num_users,
        num_pois: ds.num_pois,
        d: cfg.d,
        variant: cfg.variant,
        encoder: EncoderConfig {
            kind: cfg.encoder,
            hidden_dim: cfg.hidden_dim,
            ..EncoderConfig::default()
        },
        spec,
        head_hidden: cfg.d,
    };
    let mut model = Model::init(mcfg, &mut SplitMix64::new(cfg.seed).fork(2))?;
    let net = model.net.clone();
    grad_check(&mut model.store, cfg.eps, |g, s| {
        let losses = windows
            .iter()
            .map(|w| net.window_loss(g, s, w))
            .collect::<Result<Vec<_>>>()?;
        g.sum(&losses)
    })
}
