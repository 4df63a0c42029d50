//! Great-circle distance, hour-in-week encoding and discretization of the
//! elapsed time / travel distance to the next check-in.
//!
//! Bins are half-open `[k*w, (k+1)*w)` starting at zero; anything at or past the
//! last bin's lower edge is capped into the last bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, Window};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const HOURS_PER_WEEK: usize = 168;
const SECONDS_PER_WEEK: i64 = 604_800;

/// Discretization of future temporal and spatial context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSpec {
    /// Hours per temporal bin.
    pub dt: f64,
    /// Number of temporal bins.
    #[serde(rename = "M")]
    pub m: usize,
    /// Kilometers per spatial bin.
    pub dd: f64,
    /// Number of spatial bins.
    #[serde(rename = "N")]
    pub n: usize,
}

impl Default for IntervalSpec {
    fn default() -> Self {
        Self {
            dt: 1.0,
            m: 24,
            dd: 1.0,
            n: 30,
        }
    }
}

impl IntervalSpec {
    pub fn new(dt: f64, m: usize, dd: f64, n: usize) -> Result<Self> {
        let spec = Self { dt, m, dd, n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.dd > 0.0 && self.dd.is_finite()) {
            return Err(Error::invalid(format!(
                "bin widths must be positive (dt={}, dd={})",
                self.dt, self.dd
            )));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid(format!(
                "bin counts must be at least 1 (M={}, N={})",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    Temporal,
    Spatial,
}

/// A bin assignment; stands in for the one-hot interval vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntervalIndex {
    pub kind: IntervalKind,
    pub index: usize,
}

pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Weekday (Monday = 0) times 24 plus hour of day, in UTC.
pub fn hour_in_week(timestamp: i64) -> usize {
    // 1970-01-01 was a Thursday, three days after a Monday midnight.
    let shifted = (timestamp + 3 * 86_400).rem_euclid(SECONDS_PER_WEEK);
    (shifted / 3600) as usize
}

fn bin(delta: f64, width: f64, count: usize, what: &str) -> Result<usize> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::invalid(format!(
            "{what} delta must be non-negative, got {delta}"
        )));
    }
    let k = (delta / width).floor();
    if k >= (count - 1) as f64 {
        Ok(count - 1)
    } else {
        Ok(k as usize)
    }
}

pub fn bin_time(delta_hours: f64, spec: &IntervalSpec) -> Result<IntervalIndex> {
    Ok(IntervalIndex {
        kind: IntervalKind::Temporal,
        index: bin(delta_hours, spec.dt, spec.m, "time")?,
    })
}

pub fn bin_dist(delta_km: f64, spec: &IntervalSpec) -> Result<IntervalIndex> {
    Ok(IntervalIndex {
        kind: IntervalKind::Spatial,
        index: bin(delta_km, spec.dd, spec.n, "distance")?,
    })
}

/// Temporal and spatial bin of the transition `from -> to`.
pub fn transition_bins(
    from_time: i64,
    from_coord: (f64, f64),
    to_time: i64,
    to_coord: (f64, f64),
    spec: &IntervalSpec,
) -> Result<(usize, usize)> {
    let hours = (to_time - from_time) as f64 / 3600.0;
    let km = haversine_km(from_coord, to_coord);
    Ok((bin_time(hours, spec)?.index, bin_dist(km, spec)?.index))
}

/// Attach temporal/spatial bin targets to every (input, target) pair.
pub fn label_targets(
    mut windows: Vec<Window>,
    ds: &Dataset,
    spec: &IntervalSpec,
) -> Result<Vec<Window>> {
    spec.validate()?;
    for w in &mut windows {
        for (input, target) in w.inputs.iter().zip(w.targets.iter_mut()) {
            let from = ds.coord(input.poi_id)?;
            let to = ds.coord(target.event.poi_id)?;
            let (tb, db) =
                transition_bins(input.timestamp, from, target.event.timestamp, to, spec)?;
            target.time_bin = Some(tb);
            target.dist_bin = Some(db);
        }
    }
    Ok(windows)
}
