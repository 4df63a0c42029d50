//! History encoders producing one hidden state per position of a window.
//!
//! `Gru` returns the recurrent state. `Flashback` runs the same recurrence and
//! returns a weighted average of the last `context_window` states, each weighted
//! by `exp(-alpha * days_ago) * exp(-beta * hundreds_of_km_away)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geospace::haversine_km;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Gru,
    Flashback,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Gru => "gru",
            EncoderKind::Flashback => "flashback",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "flashback" => Ok(EncoderKind::Flashback),
            _ => Err(Error::invalid(format!("unknown encoder {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden_dim: usize,
    /// Temporal decay per day.
    pub alpha: f64,
    /// Spatial decay per 100 km.
    pub beta: f64,
    pub context_window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Gru,
            hidden_dim: 10,
            alpha: 0.1,
            beta: 100.0,
            context_window: 20,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.context_window == 0 {
            return Err(Error::invalid(
                "hidden_dim and context_window must be at least 1",
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        Ok(())
    }
}

/// Update/reset-gated recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
    hidden_dim: usize,
}

impl GruParams {
    pub fn register(
        store: &mut ParamStore,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut gate = |g: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                store.init_uniform(&format!("gru.w_{g}"), input_dim, hidden_dim, input_dim, rng)?,
                store.init_uniform(
                    &format!("gru.u_{g}"),
                    hidden_dim,
                    hidden_dim,
                    hidden_dim,
                    rng,
                )?,
                store.init_uniform(&format!("gru.b_{g}"), 1, hidden_dim, hidden_dim, rng)?,
            ))
        };
        let (w_z, u_z, b_z) = gate("z")?;
        let (w_r, u_r, b_r) = gate("r")?;
        let (w_n, u_n, b_n) = gate("n")?;
        Ok(Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_n,
            u_n,
            b_n,
            hidden_dim,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn affine(
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
        w: ParamId,
        u: ParamId,
        b: ParamId,
    ) -> Result<NodeId> {
        let (w, u, b) = (g.param(store, w), g.param(store, u), g.param(store, b));
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    }

    /// `h' = (1 - z) * n + z * h`
    pub fn encode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        if g.shape(state) != (1, self.hidden_dim) {
            return Err(Error::shape(format!(
                "state {:?}, expected (1, {})",
                g.shape(state),
                self.hidden_dim
            )));
        }
        let z_pre = Self::affine(g, store, x, state, self.w_z, self.u_z, self.b_z)?;
        let z = g.sigmoid(z_pre);
        let r_pre = Self::affine(g, store, x, state, self.w_r, self.u_r, self.b_r)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, state)?;
        let n_pre = Self::affine(g, store, x, rh, self.w_n, self.u_n, self.b_n)?;
        let n = g.tanh(n_pre);
        let keep = g.one_minus(z);
        let fresh = g.mul(keep, n)?;
        let carried = g.mul(z, state)?;
        g.add(fresh, carried)
    }
}

/// Where and when a hidden state was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamp {
    pub timestamp: i64,
    pub coord: (f64, f64),
}

/// Normalized decay weights of `past` states relative to `now`.
pub fn flashback_weights(past: &[Stamp], now: Stamp, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if past.is_empty() {
        return Err(Error::invalid("flashback needs at least one hidden state"));
    }
    let raw: Vec<f64> = past
        .iter()
        .map(|s| {
            let days = (now.timestamp - s.timestamp) as f64 / 86_400.0;
            let hundred_km = haversine_km(now.coord, s.coord) / 100.0;
            (-cfg.alpha * days).exp() * (-cfg.beta * hundred_km).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numeric(format!("flashback weight sum {total}")));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `sum_j w_j h_j / sum_j w_j` over the given states.
pub fn flashback_aggregate(
    g: &mut Graph,
    states: &[(NodeId, Stamp)],
    now: Stamp,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    for &(h, _) in states {
        if !g.value(h).is_finite() {
            return Err(Error::Numeric("non-finite hidden state".into()));
        }
    }
    let stamps: Vec<Stamp> = states.iter().map(|s| s.1).collect();
    let w = flashback_weights(&stamps, now, cfg)?;
    let terms: Vec<(NodeId, f64)> = states.iter().map(|s| s.0).zip(w).collect();
    g.weighted_sum(&terms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEncoder {
    pub cfg: EncoderConfig,
    pub gru: GruParams,
}

impl HistoryEncoder {
    pub fn register(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        input_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            gru: GruParams::register(store, input_dim, cfg.hidden_dim, rng)?,
        })
    }

    /// One output per input; output `i` depends only on inputs `0..=i`.
    pub fn encode_history(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[(NodeId, Stamp)],
    ) -> Result<Vec<NodeId>> {
        if inputs.is_empty() {
            return Err(Error::invalid("cannot encode an empty window"));
        }
        let mut state = g.input(Tensor::zeros(1, self.cfg.hidden_dim));
        let mut states: Vec<(NodeId, Stamp)> = Vec::with_capacity(inputs.len());
        let mut out = Vec::with_capacity(inputs.len());
        for &(x, stamp) in inputs {
            state = self.gru.encode_step(g, store, state, x)?;
            states.push((state, stamp));
            out.push(match self.cfg.kind {
                EncoderKind::Gru => state,
                EncoderKind::Flashback => {
                    let from = states.len().saturating_sub(self.cfg.context_window);
                    flashback_aggregate(g, &states[from..], stamp, &self.cfg)?
                }
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn stamp(t: i64, lat: f64) -> Stamp {
        Stamp {
            timestamp: t,
            coord: (lat, 1.0),
        }
    }

    fn gru_fixture(seed: u64) -> (ParamStore, GruParams, Vec<ParamId>) {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let gru = GruParams::register(&mut store, 3, 4, &mut rng).unwrap();
        let xs = (0..3)
            .map(|i| {
                store
                    .init_uniform(&format!("x{i}"), 1, 3, 1, &mut rng)
                    .unwrap()
            })
            .collect();
        (store, gru, xs)
    }

    #[test]
    fn zero_weights_contract_state() {
        let (mut store, gru, _) = gru_fixture(1);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let mut h = g.input(Tensor::row_vector(vec![1.0, -2.0, 0.5, 4.0]));
        let x = g.input(Tensor::row_vector(vec![3.0, 3.0, 3.0]));
        let mut prev = 4.0f64.hypot(2.0).hypot(1.0).hypot(0.5);
        for _ in 0..5 {
            let before = g.value(h).clone();
            h = gru.encode_step(&mut g, &store, h, x).unwrap();
            let now = g.value(h);
            for (a, b) in now.data.iter().zip(&before.data) {
                assert_eq!(*a, 0.5 * b);
            }
            let norm = now.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= prev);
            prev = norm;
        }
    }

    #[test]
    fn step_is_deterministic() {
        let (store, gru, xs) = gru_fixture(2);
        let mut g = Graph::new();
        let h0 = g.input(Tensor::row_vector(vec![0.1, 0.2, -0.3, 0.0]));
        let x = g.param(&store, xs[0]);
        let a = gru.encode_step(&mut g, &store, h0, x).unwrap();
        let b = gru.encode_step(&mut g, &store, h0, x).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let bad = g.input(Tensor::zeros(1, 3));
        assert!(gru.encode_step(&mut g, &store, bad, x).is_err());
    }

    #[test]
    fn three_unrolled_steps_match_finite_differences() {
        let (mut store, gru, xs) = gru_fixture(3);
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let mut h = g.input(Tensor::zeros(1, 4));
            for &x in &xs {
                let xn = g.param(s, x);
                h = gru.encode_step(g, s, h, xn)?;
            }
            g.cross_entropy(h, 1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn flashback_weight_cases() {
        let cfg = EncoderConfig::default();
        let w = flashback_weights(&[stamp(100, 1.0)], stamp(5000, 1.2), &cfg).unwrap();
        assert_eq!(w, vec![1.0]);

        // equidistant in time and space: arithmetic mean
        let w =
            flashback_weights(&[stamp(0, 1.01), stamp(0, 0.99)], stamp(3600, 1.0), &cfg).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);

        let off = EncoderConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        let w = flashback_weights(
            &[stamp(0, 1.0), stamp(10, 3.0), stamp(50, 7.0)],
            stamp(99, 0.0),
            &off,
        )
        .unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let sharp = EncoderConfig { alpha: 1e6, ..cfg };
        let w = flashback_weights(
            &[stamp(0, 1.0), stamp(86_400, 1.0)],
            stamp(86_400, 1.0),
            &sharp,
        )
        .unwrap();
        assert!((w[1] - 1.0).abs() < 1e-9);
        assert!(flashback_weights(&[], stamp(0, 0.0), &cfg).is_err());
    }

    #[test]
    fn flashback_aggregate_rejects_non_finite() {
        let mut g = Graph::new();
        let h = g.input(Tensor::row_vector(vec![f64::NAN]));
        let cfg = EncoderConfig::default();
        assert!(flashback_aggregate(&mut g, &[(h, stamp(0, 1.0))], stamp(1, 1.0), &cfg).is_err());
    }

    fn encoder(kind: EncoderKind, window: usize) -> (ParamStore, HistoryEncoder, Vec<ParamId>) {
        let mut rng = SplitMix64::new(8);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            kind,
            hidden_dim: 4,
            context_window: window,
            ..EncoderConfig::default()
        };
        let enc = HistoryEncoder::register(&mut store, cfg, 3, &mut rng).unwrap();
        let xs = (0..5)
            .map(|i| {
                store
                    .init_uniform(&format!("x{i}"), 1, 3, 1, &mut rng)
                    .unwrap()
            })
            .collect();
        (store, enc, xs)
    }

    fn run(store: &ParamStore, enc: &HistoryEncoder, xs: &[ParamId]) -> Vec<Tensor> {
        let mut g = Graph::new();
        let inputs: Vec<(NodeId, Stamp)> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                (
                    g.param(store, x),
                    stamp(i as i64 * 7200, 1.0 + 0.01 * i as f64),
                )
            })
            .collect();
        let hs = enc.encode_history(&mut g, store, &inputs).unwrap();
        hs.iter().map(|&h| g.value(h).clone()).collect()
    }

    #[test]
    fn window_of_one_matches_gru() {
        let (store, gru, xs) = encoder(EncoderKind::Gru, 1);
        let (_, fb, _) = encoder(EncoderKind::Flashback, 1);
        assert_eq!(run(&store, &gru, &xs), run(&store, &fb, &xs));
        assert_eq!(run(&store, &gru, &xs[..1]).len(), 1);
    }

    #[test]
    fn encoding_is_causal() {
        for kind in [EncoderKind::Gru, EncoderKind::Flashback] {
            let (mut store, enc, xs) = encoder(kind, 3);
            let base = run(&store, &enc, &xs);
            for k in 0..xs.len() {
                store.get_mut(xs[k]).value.data[1] += 1e-3;
                let moved = run(&store, &enc, &xs);
                store.get_mut(xs[k]).value.data[1] -= 1e-3;
                for i in 0..xs.len() {
                    if i < k {
                        assert_eq!(moved[i], base[i], "{kind} k={k} i={i}");
                    } else {
                        assert_ne!(moved[i], base[i], "{kind} k={k} i={i}");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let (store, enc, _) = encoder(EncoderKind::Gru, 2);
        let mut g = Graph::new();
        assert!(enc.encode_history(&mut g, &store, &[]).is_err());
    }
}
