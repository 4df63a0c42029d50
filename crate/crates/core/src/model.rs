//! Full network: embeddings, future context, history encoder and heads.

use serde::{Deserialize, Serialize};

use crate::diffcore::{embed, Graph, NodeId, ParamId, ParamStore};
use crate::encoder::{EncoderConfig, HistoryEncoder, Stamp};
use crate::error::{Error, Result};
use crate::geospace::{hour_in_week, IntervalSpec};
use crate::heads::{fuse, Heads, StepTargets};
use crate::ingest::{Dataset, Window};
use crate::relay::{RelayParams, Variant};
use crate::rng::SplitMix64;

pub const HOURS_IN_WEEK: usize = 168;

/// Everything that fixes the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_users: usize,
    pub num_pois: usize,
    pub d: usize,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub spec: IntervalSpec,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_pois == 0 {
            return Err(Error::invalid("model needs at least one user and one POI"));
        }
        if self.d == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("d and head_hidden must be at least 1"));
        }
        self.encoder.validate()?;
        self.spec.validate()
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.num_users != self.num_users || ds.num_pois != self.num_pois {
            return Err(Error::invalid(format!(
                "dataset has {} users / {} POIs but the model was built for {} / {}",
                ds.num_users, ds.num_pois, self.num_users, self.num_pois
            )));
        }
        Ok(())
    }
}

/// Parameter handles; holds no values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub emb_user: ParamId,
    pub emb_time: ParamId,
    pub emb_poi: ParamId,
    pub relay: RelayParams,
    pub encoder: HistoryEncoder,
    pub heads: Heads,
}

/// Per-step outputs of one window on a tape.
#[derive(Debug, Clone)]
pub struct WindowPass {
    pub ec: Vec<NodeId>,
    pub tau_weights: Vec<Option<NodeId>>,
    pub rho_weights: Vec<Option<NodeId>>,
}

impl Network {
    /// Registers every tensor in a fixed order.
    pub fn register(
        store: &mut ParamStore,
        cfg: ModelConfig,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let emb_user = store.init_uniform("emb.user", cfg.num_users, d, 1, rng)?;
        let emb_time = store.init_uniform("emb.time", HOURS_IN_WEEK, d, 1, rng)?;
        let emb_poi = store.init_uniform("emb.poi", cfg.num_pois, d, 1, rng)?;
        let relay = RelayParams::register(store, cfg.variant, d, &cfg.spec, rng)?;
        let encoder = HistoryEncoder::register(store, cfg.encoder, 3 * d, rng)?;
        let ec_dim = cfg.encoder.hidden_dim + relay.context_dim();
        let heads = Heads::register(
            store,
            cfg.variant,
            ec_dim,
            cfg.head_hidden,
            (cfg.num_pois, cfg.spec.m, cfg.spec.n),
            rng,
        )?;
        Ok(Self {
            cfg,
            emb_user,
            emb_time,
            emb_poi,
            relay,
            encoder,
            heads,
        })
    }

    /// Overall context embedding for every step of `w`.
    pub fn forward_window(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        w: &Window,
    ) -> Result<WindowPass> {
        if w.is_empty() {
            return Err(Error::invalid("empty window"));
        }
        let cache = self.relay.prepare(g, store)?;
        let e_user = embed(g, store, self.emb_user, w.user_id)?;
        let mut xs = Vec::with_capacity(w.len());
        let mut parts = Vec::with_capacity(w.len());
        for ev in &w.inputs {
            if ev.user_id != w.user_id {
                return Err(Error::invalid("window mixes users"));
            }
            let e_time = embed(g, store, self.emb_time, hour_in_week(ev.timestamp))?;
            let e_loc = embed(g, store, self.emb_poi, ev.poi_id)?;
            let x = g.concat(&[e_loc, e_time, e_user])?;
            xs.push((
                x,
                Stamp {
                    timestamp: ev.timestamp,
                    coord: ev.coord(),
                },
            ));
            parts.push((e_time, e_loc));
        }
        let hs = self.encoder.encode_history(g, store, &xs)?;
        let mut pass = WindowPass {
            ec: Vec::with_capacity(w.len()),
            tau_weights: Vec::with_capacity(w.len()),
            rho_weights: Vec::with_capacity(w.len()),
        };
        for (h, (e_time, e_loc)) in hs.into_iter().zip(parts) {
            let ctx = self
                .relay
                .build_context(g, store, &cache, e_user, e_time, e_loc)?;
            pass.ec.push(fuse(g, h, ctx.as_ref())?);
            pass.tau_weights.push(ctx.and_then(|c| c.tau_weights));
            pass.rho_weights.push(ctx.and_then(|c| c.rho_weights));
        }
        Ok(pass)
    }

    /// Sum of per-step total losses over the window.
    pub fn window_loss(&self, g: &mut Graph, store: &ParamStore, w: &Window) -> Result<NodeId> {
        let needs_bins = self.heads.tau.is_some() || self.heads.rho.is_some();
        if needs_bins && !w.is_labeled() {
            return Err(Error::invalid("window targets carry no interval labels"));
        }
        let pass = self.forward_window(g, store, w)?;
        let mut totals = Vec::with_capacity(w.len());
        for (ec, t) in pass.ec.into_iter().zip(&w.targets) {
            let targets = StepTargets {
                poi: t.event.poi_id,
                tau: t.time_bin.unwrap_or(0),
                rho: t.dist_bin.unwrap_or(0),
            };
            totals.push(self.heads.step_losses(g, store, ec, targets)?.total);
        }
        g.sum(&totals)
    }

    /// Location scores for every step, computed from inputs only.
    pub fn window_scores(&self, store: &ParamStore, w: &Window) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let pass = self.forward_window(&mut g, store, w)?;
        pass.ec
            .into_iter()
            .map(|ec| {
                let logits = self.heads.poi_logits(&mut g, store, ec)?;
                Ok(g.value(logits).data.clone())
            })
            .collect()
    }
}

/// Network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::register(&mut store, cfg, rng)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn window_scores(&self, w: &Window) -> Result<Vec<Vec<f64>>> {
        self.net.window_scores(&self.store, w)
    }
}
