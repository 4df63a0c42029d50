//! Synthetic trajectories whose next location is fixed by the current location
//! and the temporal/spatial bins of the upcoming move.
//!
//! Each user owns `pois_per_user` POIs scattered in a disc near (1°, 1°) and a
//! set of `bins_per_poi` temporal bins, one per period of the day. The period
//! of the current timestamp picks the temporal bin `tau`; the rule table maps
//! `(current, tau)` to the next POI such that `(tau, spatial bin)` alone
//! identifies the destination within the user. Gaps are drawn inside the
//! chosen temporal bin, and POIs are placed so every pairwise distance sits
//! well inside a spatial bin.

use std::io::Write;
use std::path::Path;
use std::{fs, io::BufWriter};

use rand::seq::{IndexedRandom, SliceRandom};
use rand_core::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geospace::{bin_dist, bin_time, haversine_km, IntervalSpec};
use crate::ingest::{CheckIn, Dataset};
use crate::rng::SplitMix64;

const ORIGIN: (f64, f64) = (1.0, 1.0);
const START: i64 = 1_333_238_400; // 2012-04-01 00:00 UTC
/// Distances and gaps keep this fraction of a bin width away from its edges.
const MARGIN: f64 = 0.15;
const PLACEMENT_TRIES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub pois_per_user: usize,
    /// Distinct temporal bins per user, hence distinct outgoing bin pairs per POI.
    pub bins_per_poi: usize,
    pub events_per_user: usize,
    /// Probability that an emitted location is replaced by a uniform pick.
    pub noise: f64,
    pub seed: u64,
    pub spec: IntervalSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 10,
            pois_per_user: 8,
            bins_per_poi: 4,
            events_per_user: 300,
            noise: 0.1,
            seed: 0,
            spec: IntervalSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.num_users == 0 || self.events_per_user == 0 || self.bins_per_poi == 0 {
            return Err(Error::invalid(
                "num_users, events_per_user and bins_per_poi must be at least 1",
            ));
        }
        if self.pois_per_user < 2 {
            return Err(Error::invalid("pois_per_user must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid(format!(
                "noise must lie in [0, 1], got {}",
                self.noise
            )));
        }
        if self.bins_per_poi > self.spec.m || self.bins_per_poi > 24 {
            return Err(Error::invalid(format!(
                "bins_per_poi {} exceeds the temporal bins available (M={}, at most 24)",
                self.bins_per_poi, self.spec.m
            )));
        }
        Ok(())
    }
}

/// One row of the oracle table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rule {
    pub user_id: usize,
    pub current_poi: usize,
    pub time_bin: usize,
    pub dist_bin: usize,
    pub next_poi: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub rules: Vec<Rule>,
}

impl SynthOutput {
    pub fn write_rules(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "user\tcurrent_poi\ttime_bin\tdist_bin\tnext_poi")?;
        for r in &self.rules {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.user_id, r.current_poi, r.time_bin, r.dist_bin, r.next_poi
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// The rule for a user's `(current, time_bin)`, if any.
    pub fn rule(&self, user: usize, current: usize, time_bin: usize) -> Option<&Rule> {
        self.rules
            .iter()
            .find(|r| r.user_id == user && r.current_poi == current && r.time_bin == time_bin)
    }
}

/// Period of the day (0..periods) of a timestamp.
pub fn day_period(timestamp: i64, periods: usize) -> usize {
    let hour = (timestamp.rem_euclid(86_400) / 3600) as usize;
    hour * periods / 24
}

/// Points in a disc whose pairwise distances all keep `MARGIN` from bin edges
/// and stay below the capped last bin.
fn place_pois(k: usize, spec: &IntervalSpec, rng: &mut SplitMix64) -> Result<Vec<(f64, f64)>> {
    let max_km = (spec.n as f64 - 1.0 - MARGIN) * spec.dd;
    if max_km <= MARGIN * spec.dd && k > 1 {
        return Err(Error::invalid(format!(
            "infeasible geometry: {} spatial bins of {} km leave no room for {k} POIs",
            spec.n, spec.dd
        )));
    }
    let radius_km = max_km / 2.0;
    let km_per_deg_lat = 111.195;
    let km_per_deg_lon = km_per_deg_lat * ORIGIN.0.to_radians().cos();
    let ok = |d: f64| {
        let x = d / spec.dd;
        let frac = x - x.floor();
        d < max_km && (MARGIN..=1.0 - MARGIN).contains(&frac)
    };
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(k);
    for i in 0..k {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let r = radius_km * rng.next_f64().sqrt();
            let a = rng.uniform(0.0, std::f64::consts::TAU);
            let p = (
                ORIGIN.0 + r * a.sin() / km_per_deg_lat,
                ORIGIN.1 + r * a.cos() / km_per_deg_lon,
            );
            if pts.iter().all(|&q| ok(haversine_km(p, q))) {
                pts.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "infeasible geometry: could not place POI {i} of {k} with {} bins of {} km",
                spec.n, spec.dd
            )));
        }
    }
    Ok(pts)
}

/// Destination per POI for one period, with each spatial bin naming a single
/// destination. Greedy with random restarts.
fn assign_period(
    k: usize,
    dist_bin: &[Vec<usize>],
    n: usize,
    rng: &mut SplitMix64,
) -> Option<Vec<usize>> {
    'attempt: for _ in 0..200 {
        // Half of the POIs are favoured destinations, so the temporal bin alone
        // already narrows the next location.
        let mut favoured: Vec<usize> = (0..k).collect();
        favoured.shuffle(rng);
        favoured.truncate(k.div_ceil(2).max(2));
        let mut claimed: Vec<Option<usize>> = vec![None; n];
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        let mut column = vec![0; k];
        for c in order {
            let allowed = |a: usize| a != c && claimed[dist_bin[c][a]].is_none_or(|d| d == a);
            let mut pick: Vec<usize> = favoured.iter().copied().filter(|&a| allowed(a)).collect();
            if pick.is_empty() {
                pick = (0..k).filter(|&a| allowed(a)).collect();
            }
            let Some(&a) = pick.choose(rng) else {
                continue 'attempt;
            };
            claimed[dist_bin[c][a]] = Some(a);
            column[c] = a;
        }
        return Some(column);
    }
    None
}

struct UserPlan {
    coords: Vec<(f64, f64)>,
    /// Temporal bin for each period of the day.
    period_bins: Vec<usize>,
    /// `next[c][p]`: destination from local POI `c` in period `p`.
    next: Vec<Vec<usize>>,
    dist_bin: Vec<Vec<usize>>,
}

fn plan_user(cfg: &SynthConfig, rng: &mut SplitMix64) -> Result<UserPlan> {
    let k = cfg.pois_per_user;
    let spec = &cfg.spec;
    let coords = place_pois(k, spec, rng)?;
    let dist_bin: Vec<Vec<usize>> = coords
        .iter()
        .map(|&a| {
            coords
                .iter()
                .map(|&b| bin_dist(haversine_km(a, b), spec).map(|i| i.index))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut bins: Vec<usize> = (0..spec.m.min(24)).collect();
    bins.shuffle(rng);
    let mut period_bins = bins[..cfg.bins_per_poi].to_vec();
    period_bins.sort_unstable();
    period_bins.shuffle(rng);

    let mut next = vec![vec![0; cfg.bins_per_poi]; k];
    for (p, column) in (0..cfg.bins_per_poi).map(|p| (p, assign_period(k, &dist_bin, spec.n, rng)))
    {
        let column = column.ok_or_else(|| {
            Error::invalid(format!(
                "infeasible geometry: no consistent destinations in period {p}"
            ))
        })?;
        for (c, a) in column.into_iter().enumerate() {
            next[c][p] = a;
        }
    }
    Ok(UserPlan {
        coords,
        period_bins,
        next,
        dist_bin,
    })
}

fn simulate(
    cfg: &SynthConfig,
    plan: &UserPlan,
    user: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<CheckIn>> {
    let k = cfg.pois_per_user;
    let base = user * k;
    let spec = &cfg.spec;
    let mut t = START + rng.below(604_800) as i64;
    let mut loc = rng.below(k);
    let mut out = Vec::with_capacity(cfg.events_per_user);
    for i in 0..cfg.events_per_user {
        let (lat, lon) = plan.coords[loc];
        out.push(CheckIn::new(user, base + loc, lat, lon, t));
        if i + 1 == cfg.events_per_user {
            break;
        }
        let period = day_period(t, cfg.bins_per_poi);
        let tau = plan.period_bins[period];
        let hours = (tau as f64 + rng.uniform(MARGIN, 1.0 - MARGIN)) * spec.dt;
        let gap = (hours * 3600.0).round() as i64;
        debug_assert_eq!(
            bin_time(gap as f64 / 3600.0, spec)?.index,
            tau.min(spec.m - 1)
        );
        t += gap.max(1);
        let target = plan.next[loc][period];
        loc = if rng.next_f64() < cfg.noise {
            rng.below(k)
        } else {
            target
        };
    }
    Ok(out)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut root = SplitMix64::new(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.num_users).map(|_| root.next_u64()).collect();
    let per_user: Vec<(UserPlan, Vec<CheckIn>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(u, &s)| {
            let mut rng = SplitMix64::new(s);
            let plan = plan_user(cfg, &mut rng)?;
            let events = simulate(cfg, &plan, u, &mut rng)?;
            Ok((plan, events))
        })
        .collect::<Result<_>>()?;

    let k = cfg.pois_per_user;
    let mut coords = Vec::with_capacity(cfg.num_users * k);
    let mut events = Vec::with_capacity(cfg.num_users * cfg.events_per_user);
    let mut rules = Vec::new();
    for (u, (plan, ev)) in per_user.into_iter().enumerate() {
        coords.extend_from_slice(&plan.coords);
        events.extend(ev);
        for c in 0..k {
            for (p, &tau) in plan.period_bins.iter().enumerate() {
                let a = plan.next[c][p];
                rules.push(Rule {
                    user_id: u,
                    current_poi: u * k + c,
                    time_bin: tau,
                    dist_bin: plan.dist_bin[c][a],
                    next_poi: u * k + a,
                });
            }
        }
    }
    Ok(SynthOutput {
        dataset: Dataset::from_events(events, coords)?,
        rules,
    })
}
