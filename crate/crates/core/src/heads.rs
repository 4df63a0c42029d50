//! Prediction heads over the overall context embedding and the summed loss.

use crate::diffcore::{Graph, Mlp, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::relay::{ContextBundle, Variant};
use crate::rng::SplitMix64;

/// `e^c = [h_i; e_st]`, or `h_i` alone when there is no context.
pub fn fuse(g: &mut Graph, h: NodeId, ctx: Option<&ContextBundle>) -> Result<NodeId> {
    match ctx {
        None => Ok(h),
        Some(c) => {
            if g.shape(h).0 != 1 || g.shape(c.e_st).0 != 1 {
                return Err(Error::shape(format!(
                    "fuse expects row vectors, got {:?} and {:?}",
                    g.shape(h),
                    g.shape(c.e_st)
                )));
            }
            g.concat(&[h, c.e_st])
        }
    }
}

/// Indices supervised at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTargets {
    pub poi: usize,
    pub tau: usize,
    pub rho: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub poi: NodeId,
    pub tau: Option<NodeId>,
    pub rho: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heads {
    pub poi: Mlp,
    pub tau: Option<Mlp>,
    pub rho: Option<Mlp>,
}

impl Heads {
    /// Interval heads exist only for the context kinds the variant carries.
    pub fn register(
        store: &mut ParamStore,
        variant: Variant,
        input_dim: usize,
        hidden: usize,
        sizes: (usize, usize, usize),
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let (pois, m, n) = sizes;
        let poi = Mlp::register(store, "head.poi", &[input_dim, hidden, pois], rng)?;
        let tau = variant
            .has_temporal()
            .then(|| Mlp::register(store, "head.tau", &[input_dim, hidden, m], rng))
            .transpose()?;
        let rho = variant
            .has_spatial()
            .then(|| Mlp::register(store, "head.rho", &[input_dim, hidden, n], rng))
            .transpose()?;
        Ok(Self { poi, tau, rho })
    }

    pub fn poi_logits(&self, g: &mut Graph, store: &ParamStore, ec: NodeId) -> Result<NodeId> {
        self.poi.forward(g, store, ec)
    }

    /// Cross-entropy per active head; the total adds them left to right.
    pub fn step_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ec: NodeId,
        targets: StepTargets,
    ) -> Result<StepLosses> {
        let logits = self.poi.forward(g, store, ec)?;
        let poi = g.cross_entropy(logits, targets.poi)?;
        let tau = match &self.tau {
            Some(h) => {
                let logits = h.forward(g, store, ec)?;
                Some(g.cross_entropy(logits, targets.tau)?)
            }
            None => None,
        };
        let rho = match &self.rho {
            Some(h) => {
                let logits = h.forward(g, store, ec)?;
                Some(g.cross_entropy(logits, targets.rho)?)
            }
            None => None,
        };
        let terms: Vec<NodeId> = std::iter::once(poi).chain(tau).chain(rho).collect();
        let total = if terms.len() == 1 {
            poi
        } else {
            g.sum(&terms)?
        };
        Ok(StepLosses {
            poi,
            tau,
            rho,
            total,
        })
    }
}
