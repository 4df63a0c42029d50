//! Mobility entropy of a user's visits, plain and conditioned on the future
//! temporal / spatial / spatiotemporal context of each visit, plus radius of
//! gyration.
//!
//! Conditioning: the location `l_{i+1}` is filed under the bin of the
//! transition `i -> i+1`. Within each bin the location frequencies are
//! normalized to a conditional distribution, and the per-bin entropies are
//! averaged uniformly over the bins that actually occur for the user.

use std::collections::BTreeMap;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geospace::{haversine_km, transition_bins, IntervalSpec};
use crate::ingest::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    Temporal,
    Spatial,
    Spatiotemporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEntropy {
    pub user_id: usize,
    pub e: f64,
    pub e_t: f64,
    pub e_s: f64,
    pub e_st: f64,
    pub unique_locations: usize,
    pub rog_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSummary {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub users: Vec<UserEntropy>,
}

/// Shannon entropy (bits) of the empirical distribution of `items`.
pub fn shannon_bits<T: Ord>(items: impl IntoIterator<Item = T>) -> f64 {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    let mut n = 0usize;
    for it in items {
        *counts.entry(it).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // Sums of -p log p can land a hair below zero for a single location.
    h.max(0.0)
}

pub fn entropy_plain(traj: &Trajectory) -> Result<f64> {
    if traj.events.is_empty() {
        return Err(Error::invalid(format!(
            "user {}: empty trajectory",
            traj.user_id
        )));
    }
    Ok(shannon_bits(traj.events.iter().map(|e| e.poi_id)))
}

/// Mean within-bin entropy of next locations grouped by `key`.
fn grouped_entropy<K: Ord + Hash>(pairs: impl IntoIterator<Item = (K, usize)>) -> f64 {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (k, loc) in pairs {
        groups.entry(k).or_default().push(loc);
    }
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups.values().map(|locs| shannon_bits(locs.iter())).sum();
    total / groups.len() as f64
}

/// (temporal bin, spatial bin, next location) for every consecutive pair.
fn transitions(traj: &Trajectory, spec: &IntervalSpec) -> Result<Vec<(usize, usize, usize)>> {
    traj.events
        .windows(2)
        .map(|w| {
            let (tb, db) = transition_bins(
                w[0].timestamp,
                w[0].coord(),
                w[1].timestamp,
                w[1].coord(),
                spec,
            )?;
            Ok((tb, db, w[1].poi_id))
        })
        .collect()
}

pub fn entropy_conditioned(
    traj: &Trajectory,
    spec: &IntervalSpec,
    mode: ConditionMode,
) -> Result<f64> {
    if traj.events.len() < 2 {
        return Err(Error::invalid(format!(
            "user {}: conditioned entropy needs at least 2 events, found {}",
            traj.user_id,
            traj.events.len()
        )));
    }
    let tr = transitions(traj, spec)?;
    Ok(match mode {
        ConditionMode::Temporal => grouped_entropy(tr.iter().map(|&(t, _, l)| (t, l))),
        ConditionMode::Spatial => grouped_entropy(tr.iter().map(|&(_, d, l)| (d, l))),
        ConditionMode::Spatiotemporal => grouped_entropy(tr.iter().map(|&(t, d, l)| ((t, d), l))),
    })
}

/// Root-mean-square haversine distance of visits from their lat/lon centroid.
pub fn radius_of_gyration(traj: &Trajectory, ds: &Dataset) -> Result<f64> {
    if traj.events.is_empty() {
        return Err(Error::invalid(format!(
            "user {}: empty trajectory",
            traj.user_id
        )));
    }
    let coords = traj
        .events
        .iter()
        .map(|e| ds.coord(e.poi_id))
        .collect::<Result<Vec<_>>>()?;
    let n = coords.len() as f64;
    let centroid = (
        coords.iter().map(|c| c.0).sum::<f64>() / n,
        coords.iter().map(|c| c.1).sum::<f64>() / n,
    );
    let ms = coords
        .iter()
        .map(|&c| haversine_km(c, centroid).powi(2))
        .sum::<f64>()
        / n;
    Ok(ms.sqrt())
}

fn user_row(traj: &Trajectory, ds: &Dataset, spec: &IntervalSpec) -> Result<UserEntropy> {
    let e = entropy_plain(traj)?;
    // A lone check-in has no transition to condition on.
    let cond = |mode| {
        if traj.events.len() < 2 {
            Ok(0.0)
        } else {
            entropy_conditioned(traj, spec, mode)
        }
    };
    let mut uniq: Vec<usize> = traj.events.iter().map(|e| e.poi_id).collect();
    uniq.sort_unstable();
    uniq.dedup();
    Ok(UserEntropy {
        user_id: traj.user_id,
        e,
        e_t: cond(ConditionMode::Temporal)?,
        e_s: cond(ConditionMode::Spatial)?,
        e_st: cond(ConditionMode::Spatiotemporal)?,
        unique_locations: uniq.len(),
        rog_km: radius_of_gyration(traj, ds)?,
    })
}

pub fn entropy_report(ds: &Dataset, spec: &IntervalSpec) -> Result<EntropyReport> {
    spec.validate()?;
    if ds.trajectories.is_empty() {
        return Err(Error::invalid("dataset has no trajectories"));
    }
    let users = ds
        .trajectories
        .par_iter()
        .map(|t| user_row(t, ds, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyReport { users })
}

fn summarize(mut xs: Vec<f64>) -> ColumnSummary {
    if xs.is_empty() {
        return ColumnSummary {
            mean: f64::NAN,
            median: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    let median = if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    };
    ColumnSummary { mean, median }
}

impl EntropyReport {
    pub const COLUMNS: [&'static str; 5] = ["E", "E_t", "E_s", "E_st", "rog_km"];

    fn column(&self, name: &str) -> Vec<f64> {
        self.users
            .iter()
            .map(|u| match name {
                "E" => u.e,
                "E_t" => u.e_t,
                "E_s" => u.e_s,
                "E_st" => u.e_st,
                _ => u.rog_km,
            })
            .collect()
    }

    pub fn summary(&self, column: &str) -> ColumnSummary {
        summarize(self.column(column))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "user_id,E,E_t,E_s,E_st,rog_km")?;
        for u in &self.users {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                u.user_id, u.e, u.e_t, u.e_s, u.e_st, u.rog_km
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    /// Mean and median per column.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<8}{:>12}{:>12}\n", "column", "mean", "median");
        for c in Self::COLUMNS {
            let ColumnSummary { mean, median } = self.summary(c);
            s.push_str(&format!("{c:<8}{mean:>12.6}{median:>12.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::CheckIn;
    use proptest::prelude::*;

    const T0: i64 = 1_333_324_800;

    fn traj(pois: &[usize]) -> Trajectory {
        Trajectory {
            user_id: 0,
            events: pois
                .iter()
                .enumerate()
                .map(|(i, &p)| CheckIn::new(0, p, 1.0, 1.0, T0 + 60 * i as i64))
                .collect(),
        }
    }

    /// Events at one place; `gaps_h[i]` is the hour gap before event i+1.
    fn timed(pois: &[usize], gaps_h: &[f64]) -> Trajectory {
        let mut t = T0;
        let mut events = vec![CheckIn::new(0, pois[0], 1.0, 1.0, t)];
        for (&p, &g) in pois[1..].iter().zip(gaps_h) {
            t += (g * 3600.0) as i64;
            events.push(CheckIn::new(0, p, 1.0, 1.0, t));
        }
        Trajectory { user_id: 0, events }
    }

    #[test]
    fn plain_entropy_values() {
        assert_eq!(entropy_plain(&traj(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(entropy_plain(&traj(&[0, 0, 0, 0])).unwrap(), 0.0);
        let h = entropy_plain(&traj(&[0, 0, 0, 1])).unwrap();
        // -(0.75 log2 0.75 + 0.25 log2 0.25)
        assert!((h - 0.811278).abs() < 1e-6);
        assert!(entropy_plain(&traj(&[])).is_err());
    }

    #[test]
    fn uniform_over_power_of_two_is_exact() {
        for k in 0..7 {
            let pois: Vec<usize> = (0..1 << k).collect();
            assert_eq!(entropy_plain(&traj(&pois)).unwrap(), k as f64);
        }
    }

    #[test]
    fn two_temporal_bins_hand_example() {
        // transitions into A,A,B land in bin 1; C,C in bin 2.
        let spec = IntervalSpec::default();
        let t = timed(&[9, 0, 0, 1, 2, 2], &[1.5, 1.5, 1.5, 2.5, 2.5]);
        let e_t = entropy_conditioned(&t, &spec, ConditionMode::Temporal).unwrap();
        // H(2/3, 1/3) = 0.918296; averaged with 0 over 2 bins
        assert!((e_t - 0.45915).abs() < 1e-4);
    }

    #[test]
    fn deterministic_bins_give_zero() {
        let spec = IntervalSpec::default();
        let t = timed(&[0, 1, 2, 1, 2, 1], &[1.5, 2.5, 1.5, 2.5, 1.5]);
        assert_eq!(
            entropy_conditioned(&t, &spec, ConditionMode::Temporal).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_bin_collapses_to_plain_entropy_of_targets() {
        let spec = IntervalSpec::default();
        let pois = [5, 0, 1, 1, 2, 0, 0];
        let t = timed(&pois, &[0.2; 6]);
        let e_t = entropy_conditioned(&t, &spec, ConditionMode::Temporal).unwrap();
        assert_eq!(e_t, entropy_plain(&traj(&pois[1..])).unwrap());
    }

    #[test]
    fn conditioned_needs_two_events() {
        let spec = IntervalSpec::default();
        assert!(entropy_conditioned(&traj(&[1]), &spec, ConditionMode::Spatial).is_err());
    }

    fn point_dataset(coords: Vec<(f64, f64)>, pois: &[usize]) -> (Dataset, Trajectory) {
        let events = pois
            .iter()
            .enumerate()
            .map(|(i, &p)| CheckIn::new(0, p, coords[p].0, coords[p].1, T0 + i as i64 * 60))
            .collect::<Vec<_>>();
        let ds = Dataset::from_events(events, coords).unwrap();
        let t = ds.trajectories[0].clone();
        (ds, t)
    }

    #[test]
    fn gyration_of_one_point_is_zero() {
        let (ds, t) = point_dataset(vec![(35.0, 139.0)], &[0, 0, 0]);
        assert_eq!(radius_of_gyration(&t, &ds).unwrap(), 0.0);
    }

    #[test]
    fn gyration_of_symmetric_pair_is_half_separation() {
        let (ds, t) = point_dataset(vec![(1.0, 1.0), (1.0, 1.02)], &[0, 1]);
        let sep = haversine_km((1.0, 1.0), (1.0, 1.02));
        let rog = radius_of_gyration(&t, &ds).unwrap();
        assert!(((rog - sep / 2.0) / (sep / 2.0)).abs() < 0.005);
    }

    #[test]
    fn gyration_robust_to_duplicates() {
        let (ds, t) = point_dataset(vec![(1.0, 1.0), (1.01, 1.0)], &[0, 1, 1]);
        let r = radius_of_gyration(&t, &ds).unwrap();
        assert!(r.is_finite() && r > 0.0);
        let mut bad = t.clone();
        bad.events[0].poi_id = 5;
        assert!(radius_of_gyration(&bad, &ds).is_err());
    }

    #[test]
    fn report_shape_and_csv() {
        let (ds, _) = point_dataset(vec![(1.0, 1.0), (1.01, 1.0)], &[0, 1, 0, 1]);
        let rep = entropy_report(&ds, &IntervalSpec::default()).unwrap();
        assert_eq!(rep.users.len(), 1);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "user_id,E,E_t,E_s,E_st,rog_km");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,1.000000,"));
    }

    #[test]
    fn single_location_users_are_all_zero() {
        let (ds, _) = point_dataset(vec![(1.0, 1.0)], &[0, 0, 0]);
        let rep = entropy_report(&ds, &IntervalSpec::default()).unwrap();
        let u = &rep.users[0];
        assert_eq!(
            (u.e, u.e_t, u.e_s, u.e_st, u.rog_km),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    fn arb_traj() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..6, n),
                prop::collection::vec(0.0f64..30.0, n - 1),
            )
        })
    }

    proptest! {
        #[test]
        fn plain_entropy_bounds_and_permutation((pois, _) in arb_traj(), seed in any::<u64>()) {
            let t = traj(&pois);
            let h = entropy_plain(&t).unwrap();
            let mut uniq = pois.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (uniq.len() as f64).log2() + 1e-12);
            let mut shuffled = pois.clone();
            let mut rng = crate::rng::SplitMix64::new(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.below(i + 1));
            }
            prop_assert_eq!(entropy_plain(&traj(&shuffled)).unwrap(), h);
        }

        #[test]
        fn conditioned_entropy_bounded_by_worst_bin((pois, gaps) in arb_traj()) {
            let spec = IntervalSpec::new(2.0, 8, 1.0, 30).unwrap();
            let t = timed(&pois, &gaps);
            let tr = transitions(&t, &spec).unwrap();
            let mut by_bin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(tb, _, l) in &tr {
                by_bin.entry(tb).or_default().push(l);
            }
            let mut worst: f64 = 0.0;
            for locs in by_bin.values() {
                let h = shannon_bits(locs.iter());
                let mut u = locs.clone();
                u.sort_unstable();
                u.dedup();
                prop_assert!(h <= (u.len() as f64).log2() + 1e-12);
                worst = worst.max(h);
            }
            let e_t = entropy_conditioned(&t, &spec, ConditionMode::Temporal).unwrap();
            let e_st = entropy_conditioned(&t, &spec, ConditionMode::Spatiotemporal).unwrap();
            prop_assert!(e_t <= worst + 1e-12);
            prop_assert!(e_st >= 0.0 && e_t >= 0.0);
        }
    }
}
