//! Check-in log parsing, user filtering, chronological split and windowing.
//!
//! Input rows are tab-separated: `user  timestamp  lat  lon  poi`. Raw user and
//! POI identifiers are arbitrary strings; they are re-indexed densely in sorted
//! order (numeric order when every id is an integer, lexicographic otherwise),
//! so already-dense files keep their ids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};

/// One timestamped, geolocated visit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckIn {
    pub user_id: usize,
    pub poi_id: usize,
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

impl CheckIn {
    pub fn new(user_id: usize, poi_id: usize, lat: f64, lon: f64, timestamp: i64) -> Self {
        Self {
            user_id,
            poi_id,
            lat,
            lon,
            timestamp,
        }
    }

    pub fn coord(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

/// A user's check-ins in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: usize,
    pub events: Vec<CheckIn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub num_users: usize,
    pub num_pois: usize,
    /// Indexed by dense POI id.
    pub poi_coords: Vec<(f64, f64)>,
    pub user_raw: Vec<String>,
    pub poi_raw: Vec<String>,
}

/// How the timestamp column is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeFormat {
    /// Integer epoch seconds if the field parses as one, ISO-8601 otherwise.
    #[default]
    Auto,
    Epoch,
    Iso8601,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub event: CheckIn,
    pub time_bin: Option<usize>,
    pub dist_bin: Option<usize>,
}

/// Up to `L_seq` consecutive (input, next event) pairs from one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub user_id: usize,
    pub inputs: Vec<CheckIn>,
    pub targets: Vec<Target>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.targets
            .iter()
            .all(|t| t.time_bin.is_some() && t.dist_bin.is_some())
    }
}

fn check_coord(lat: f64, lon: f64) -> std::result::Result<(), String> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("latitude {lat} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("longitude {lon} outside [-180, 180]"));
    }
    Ok(())
}

impl Dataset {
    /// Build from events that already carry dense ids. Events are grouped per user
    /// and stably sorted by time.
    pub fn from_events(events: Vec<CheckIn>, poi_coords: Vec<(f64, f64)>) -> Result<Self> {
        let num_users = events.iter().map(|e| e.user_id + 1).max().unwrap_or(0);
        let mut per_user: Vec<Vec<CheckIn>> = vec![Vec::new(); num_users];
        for e in events {
            per_user[e.user_id].push(e);
        }
        let trajectories = per_user
            .into_iter()
            .enumerate()
            .filter(|(_, ev)| !ev.is_empty())
            .map(|(user_id, mut events)| {
                events.sort_by_key(|e| e.timestamp);
                Trajectory { user_id, events }
            })
            .collect();
        let num_pois = poi_coords.len();
        let ds = Dataset {
            trajectories,
            num_users,
            num_pois,
            poi_coords,
            user_raw: (0..num_users).map(|u| u.to_string()).collect(),
            poi_raw: (0..num_pois).map(|p| p.to_string()).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn coord(&self, poi: usize) -> Result<(f64, f64)> {
        self.poi_coords
            .get(poi)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no coordinates for poi_id {poi}")))
    }

    pub fn num_checkins(&self) -> usize {
        self.trajectories.iter().map(|t| t.events.len()).sum()
    }

    pub fn trajectory(&self, user: usize) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.user_id == user)
    }

    /// Check every structural invariant: id bounds, coordinates, ordering.
    pub fn validate(&self) -> Result<()> {
        if self.poi_coords.len() != self.num_pois {
            return Err(Error::invalid(format!(
                "{} POI coordinates for {} POIs",
                self.poi_coords.len(),
                self.num_pois
            )));
        }
        for (p, &(lat, lon)) in self.poi_coords.iter().enumerate() {
            check_coord(lat, lon).map_err(|m| Error::invalid(format!("poi {p}: {m}")))?;
        }
        for t in &self.trajectories {
            if t.user_id >= self.num_users {
                return Err(Error::out_of_range("user_id", t.user_id, self.num_users));
            }
            for (k, e) in t.events.iter().enumerate() {
                if e.user_id != t.user_id {
                    return Err(Error::invalid(format!(
                        "trajectory of user {} holds an event of user {}",
                        t.user_id, e.user_id
                    )));
                }
                if e.poi_id >= self.num_pois {
                    return Err(Error::out_of_range("poi_id", e.poi_id, self.num_pois));
                }
                if e.timestamp <= 0 {
                    return Err(Error::invalid(format!(
                        "user {}: timestamp {} is not positive",
                        t.user_id, e.timestamp
                    )));
                }
                check_coord(e.lat, e.lon)
                    .map_err(|m| Error::invalid(format!("user {}: {m}", t.user_id)))?;
                if k > 0 && t.events[k - 1].timestamp > e.timestamp {
                    return Err(Error::invalid(format!(
                        "user {}: events out of time order",
                        t.user_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write rows in the same layout `parse_checkins` reads, with dense ids and
    /// epoch-second timestamps.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for t in &self.trajectories {
            for e in &t.events {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    e.user_id, e.timestamp, e.lat, e.lon, e.poi_id
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Raw id to dense id table: a `#user` section then a `#poi` section.
    pub fn write_idmap(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "#user")?;
        for (dense, raw) in self.user_raw.iter().enumerate() {
            writeln!(out, "{raw}\t{dense}")?;
        }
        writeln!(out, "#poi")?;
        for (dense, raw) in self.poi_raw.iter().enumerate() {
            writeln!(out, "{raw}\t{dense}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `<input>.idmap.tsv`
pub fn idmap_path(input: &Path) -> PathBuf {
    let mut s = input.as_os_str().to_owned();
    s.push(".idmap.tsv");
    PathBuf::from(s)
}

fn parse_timestamp(field: &str, format: TimeFormat) -> std::result::Result<i64, String> {
    let epoch = || {
        field
            .parse::<i64>()
            .map_err(|_| format!("timestamp {field:?} is not integer epoch seconds"))
    };
    let iso = || -> std::result::Result<i64, String> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(field) {
            return Ok(dt.timestamp());
        }
        for pat in [
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%d %H:%M:%S",
            "%Y-%m-%dT%H:%M:%SZ",
        ] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(field, pat) {
                return Ok(dt.and_utc().timestamp());
            }
        }
        Err(format!("timestamp {field:?} is not ISO-8601"))
    };
    let ts = match format {
        TimeFormat::Epoch => epoch()?,
        TimeFormat::Iso8601 => iso()?,
        TimeFormat::Auto => epoch().or_else(|_| iso())?,
    };
    if ts <= 0 {
        return Err(format!("timestamp {ts} is not positive"));
    }
    Ok(ts)
}

/// Sorted unique raw ids -> dense index.
fn dense_ids<'a>(raw: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<String, usize>) {
    let mut uniq: Vec<String> = raw.map(str::to_owned).collect();
    uniq.sort();
    uniq.dedup();
    if uniq.iter().all(|s| s.parse::<i128>().is_ok()) {
        uniq.sort_by_key(|s| s.parse::<i128>().unwrap_or_default());
    }
    let map = uniq
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    (uniq, map)
}

struct RawRow {
    user: String,
    poi: String,
    lat: f64,
    lon: f64,
    timestamp: i64,
}

/// Parse a check-in log and emit the `<input>.idmap.tsv` sidecar.
pub fn parse_checkins(path: &Path, format: TimeFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let ds = parse_checkins_str(&text, format)?;
    ds.write_idmap(&idmap_path(path))?;
    Ok(ds)
}

/// Parse log text; blank lines are skipped.
pub fn parse_checkins_str(text: &str, format: TimeFormat) -> Result<Dataset> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!(
                "expected 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("{what} {s:?} is not a number")))
        };
        let lat = num(fields[2], "latitude")?;
        let lon = num(fields[3], "longitude")?;
        check_coord(lat, lon).map_err(bad)?;
        let timestamp = parse_timestamp(fields[1].trim(), format).map_err(bad)?;
        let (user, poi) = (fields[0].trim(), fields[4].trim());
        if user.is_empty() || poi.is_empty() {
            return Err(bad("empty user or POI id".into()));
        }
        rows.push(RawRow {
            user: user.to_owned(),
            poi: poi.to_owned(),
            lat,
            lon,
            timestamp,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("check-in file is empty"));
    }

    let (user_raw, user_map) = dense_ids(rows.iter().map(|r| r.user.as_str()));
    let (poi_raw, poi_map) = dense_ids(rows.iter().map(|r| r.poi.as_str()));
    let mut poi_coords = vec![None; poi_raw.len()];
    let mut events = Vec::with_capacity(rows.len());
    for r in &rows {
        let p = poi_map[&r.poi];
        // First sighting fixes the venue's coordinates.
        poi_coords[p].get_or_insert((r.lat, r.lon));
        events.push(CheckIn::new(
            user_map[&r.user],
            p,
            r.lat,
            r.lon,
            r.timestamp,
        ));
    }
    let poi_coords = poi_coords
        .into_iter()
        .map(|c| c.unwrap_or_default())
        .collect();
    let mut ds = Dataset::from_events(events, poi_coords)?;
    ds.user_raw = user_raw;
    ds.poi_raw = poi_raw;
    Ok(ds)
}

/// Drop users with fewer than `min_checkins` events, then drop POIs nobody
/// visits any more and re-densify both id spaces.
pub fn filter_users(ds: &Dataset, min_checkins: usize) -> Result<Dataset> {
    if min_checkins == 0 {
        return Err(Error::invalid("min_checkins must be at least 1"));
    }
    let kept: Vec<&Trajectory> = ds
        .trajectories
        .iter()
        .filter(|t| t.events.len() >= min_checkins)
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("no users survive filter"));
    }
    let mut poi_new: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &kept {
        for e in &t.events {
            poi_new.entry(e.poi_id).or_insert(0);
        }
    }
    for (next, v) in poi_new.values_mut().enumerate() {
        *v = next;
    }
    let trajectories = kept
        .iter()
        .enumerate()
        .map(|(u, t)| Trajectory {
            user_id: u,
            events: t
                .events
                .iter()
                .map(|e| CheckIn {
                    user_id: u,
                    poi_id: poi_new[&e.poi_id],
                    ..*e
                })
                .collect(),
        })
        .collect();
    let out = Dataset {
        trajectories,
        num_users: kept.len(),
        num_pois: poi_new.len(),
        poi_coords: poi_new.keys().map(|&p| ds.poi_coords[p]).collect(),
        user_raw: kept
            .iter()
            .map(|t| ds.user_raw[t.user_id].clone())
            .collect(),
        poi_raw: poi_new.keys().map(|&p| ds.poi_raw[p].clone()).collect(),
    };
    out.validate()?;
    Ok(out)
}

/// Number of leading events of an `n`-event trajectory that go to training.
pub fn train_count(n: usize, train_frac: f64) -> usize {
    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    ((train_frac * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Per-user chronological split. Both sides keep the full index spaces; a user
/// is dropped from a side that would receive fewer than two events.
pub fn chrono_split(ds: &Dataset, train_frac: f64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in &ds.trajectories {
        let cut = train_count(t.events.len(), train_frac);
        let (a, b) = t.events.split_at(cut);
        if a.len() >= 2 {
            train.push(Trajectory {
                user_id: t.user_id,
                events: a.to_vec(),
            });
        }
        if b.len() >= 2 {
            test.push(Trajectory {
                user_id: t.user_id,
                events: b.to_vec(),
            });
        }
    }
    let side = |trajectories| Dataset {
        trajectories,
        ..ds.clone()
    };
    Ok((side(train), side(test)))
}

/// Non-overlapping windows of at most `seq_len` (input, next event) pairs.
pub fn make_windows(ds: &Dataset, seq_len: usize) -> Result<Vec<Window>> {
    if seq_len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let mut windows = Vec::new();
    for t in &ds.trajectories {
        let pairs = t.events.len().saturating_sub(1);
        let mut start = 0;
        while start < pairs {
            let end = (start + seq_len).min(pairs);
            windows.push(Window {
                user_id: t.user_id,
                inputs: t.events[start..end].to_vec(),
                targets: t.events[start + 1..end + 1]
                    .iter()
                    .map(|&event| Target {
                        event,
                        time_bin: None,
                        dist_bin: None,
                    })
                    .collect(),
            });
            start = end;
        }
    }
    Ok(windows)
}
