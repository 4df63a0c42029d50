//! Future spatiotemporal context.
//!
//! The temporal query `[e_u; e_t]` attends over the temporal-interval candidate
//! table and yields the predicted temporal context. The spatial query
//! `[e_u; temporal context; e_l]` then attends over the spatial-interval table.
//! Feeding the first result into the second query is the relay; the
//! `NoRelaying` variant drops it and computes both contexts side by side.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    attend, project_kv, Attended, AttentionParams, Graph, NodeId, ParamId, ParamStore,
};
use crate::error::{Error, Result};
use crate::geospace::IntervalSpec;
use crate::rng::SplitMix64;

/// Which context components a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoSpatial,
    NoTemporal,
    NoRelaying,
    /// History encoder only; the base model the context is added to.
    NoContext,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSpatial,
        Variant::NoTemporal,
        Variant::NoRelaying,
        Variant::NoContext,
    ];

    pub fn has_temporal(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoSpatial | Variant::NoRelaying
        )
    }

    pub fn has_spatial(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoTemporal | Variant::NoRelaying
        )
    }

    pub fn is_relayed(self) -> bool {
        self == Variant::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatial => "no_spatial",
            Variant::NoTemporal => "no_temporal",
            Variant::NoRelaying => "no_relaying",
            Variant::NoContext => "no_context",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextAttention {
    /// Candidate interval embeddings, one row per bin.
    pub candidates: ParamId,
    pub att: AttentionParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayParams {
    pub variant: Variant,
    pub d: usize,
    pub temporal: Option<ContextAttention>,
    pub spatial: Option<ContextAttention>,
}

/// Key/value projections of the candidate tables for one tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelayCache {
    temporal: Option<(NodeId, NodeId)>,
    spatial: Option<(NodeId, NodeId)>,
}

/// Predicted future context for one step (nodes on the caller's tape).
#[derive(Debug, Clone, Copy)]
pub struct ContextBundle {
    pub e_tau_hat: Option<NodeId>,
    pub e_rho_hat: Option<NodeId>,
    /// `[e_tau_hat; e_rho_hat]`, or the single active component.
    pub e_st: NodeId,
    pub tau_weights: Option<NodeId>,
    pub rho_weights: Option<NodeId>,
}

impl RelayParams {
    pub fn register(
        store: &mut ParamStore,
        variant: Variant,
        d: usize,
        spec: &IntervalSpec,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let temporal = if variant.has_temporal() {
            Some(ContextAttention {
                candidates: store.init_uniform("temporal.candidates", spec.m, d, 1, rng)?,
                att: AttentionParams::register(store, "temporal.att", 2 * d, d, d, rng)?,
            })
        } else {
            None
        };
        let spatial = if variant.has_spatial() {
            let query_dim = if variant.is_relayed() { 3 * d } else { 2 * d };
            Some(ContextAttention {
                candidates: store.init_uniform("spatial.candidates", spec.n, d, 1, rng)?,
                att: AttentionParams::register(store, "spatial.att", query_dim, d, d, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            variant,
            d,
            temporal,
            spatial,
        })
    }

    /// Width of `e_st`.
    pub fn context_dim(&self) -> usize {
        self.d * (self.temporal.is_some() as usize + self.spatial.is_some() as usize)
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore) -> Result<RelayCache> {
        let mut kv = |c: &ContextAttention| -> Result<(NodeId, NodeId)> {
            let table = g.param(store, c.candidates);
            project_kv(g, store, table, table, &c.att)
        };
        Ok(RelayCache {
            temporal: self.temporal.as_ref().map(&mut kv).transpose()?,
            spatial: self.spatial.as_ref().map(&mut kv).transpose()?,
        })
    }

    /// Attend `[e_u; e_t]` over the temporal candidates.
    pub fn temporal_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cache: &RelayCache,
        e_user: NodeId,
        e_time: NodeId,
    ) -> Result<Attended> {
        let (Some(c), Some((k, v))) = (&self.temporal, cache.temporal) else {
            return Err(Error::invalid(format!(
                "variant {} has no temporal context",
                self.variant
            )));
        };
        let query = g.concat(&[e_user, e_time])?;
        attend(g, store, query, k, v, &c.att)
    }

    /// Attend `[e_u; e_tau_hat; e_l]` (or `[e_u; e_l]` without the relay) over
    /// the spatial candidates.
    pub fn spatial_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cache: &RelayCache,
        e_user: NodeId,
        e_tau_hat: Option<NodeId>,
        e_loc: NodeId,
    ) -> Result<Attended> {
        let (Some(c), Some((k, v))) = (&self.spatial, cache.spatial) else {
            return Err(Error::invalid(format!(
                "variant {} has no spatial context",
                self.variant
            )));
        };
        let query = match (self.variant.is_relayed(), e_tau_hat) {
            (true, Some(tau)) => g.concat(&[e_user, tau, e_loc])?,
            (true, None) => {
                return Err(Error::invalid(
                    "relayed spatial query needs the temporal context",
                ))
            }
            (false, _) => g.concat(&[e_user, e_loc])?,
        };
        attend(g, store, query, k, v, &c.att)
    }

    /// `None` for the no-context variant.
    pub fn build_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cache: &RelayCache,
        e_user: NodeId,
        e_time: NodeId,
        e_loc: NodeId,
    ) -> Result<Option<ContextBundle>> {
        let tau = if self.temporal.is_some() {
            Some(self.temporal_context(g, store, cache, e_user, e_time)?)
        } else {
            None
        };
        let rho = if self.spatial.is_some() {
            let relay = tau.map(|t| t.output);
            Some(self.spatial_context(g, store, cache, e_user, relay, e_loc)?)
        } else {
            None
        };
        let e_st = match (tau, rho) {
            (Some(t), Some(r)) => g.concat(&[t.output, r.output])?,
            (Some(t), None) => t.output,
            (None, Some(r)) => r.output,
            (None, None) => return Ok(None),
        };
        Ok(Some(ContextBundle {
            e_tau_hat: tau.map(|t| t.output),
            e_rho_hat: rho.map(|r| r.output),
            e_st,
            tau_weights: tau.map(|t| t.weights),
            rho_weights: rho.map(|r| r.weights),
        }))
    }
}
