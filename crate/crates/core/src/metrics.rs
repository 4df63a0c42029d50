//! Ranking metrics and grouped breakdowns.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::entropy::radius_of_gyration;
use crate::error::{Error, Result};
use crate::ingest::{make_windows, Dataset};
use crate::model::Model;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const UNLABELED: &str = "unlabeled";

/// 1 + number of other candidates scoring at least as high as the target.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&t) = scores.get(target) else {
        return Err(Error::out_of_range("target", target, scores.len()));
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t)
        .count();
    Ok(1 + ahead)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ks: Vec<usize>,
    pub acc: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mrr: f64,
    pub n: usize,
}

impl EvalResult {
    /// Metrics over a list of ranks; every metric is 0 when `ranks` is empty.
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len();
        let mean = |f: &dyn Fn(usize) -> f64| {
            if n == 0 {
                0.0
            } else {
                ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            ks: ks.to_vec(),
            acc: ks
                .iter()
                .map(|&k| mean(&|r| if r <= k { 1.0 } else { 0.0 }))
                .collect(),
            ndcg: ks
                .iter()
                .map(|&k| {
                    mean(&|r| {
                        if r <= k {
                            1.0 / ((r + 1) as f64).log2()
                        } else {
                            0.0
                        }
                    })
                })
                .collect(),
            mrr: mean(&|r| 1.0 / r as f64),
            n,
        }
    }

    pub fn acc_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.acc[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (k, v) in self.ks.iter().zip(&self.acc) {
            out.push((format!("acc@{k}"), *v));
        }
        for (k, v) in self.ks.iter().zip(&self.ndcg) {
            out.push((format!("ndcg@{k}"), *v));
        }
        out.push(("mrr".into(), self.mrr));
        out
    }
}

/// One ranked prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ranked {
    pub user_id: usize,
    pub target_poi: usize,
    pub rank: usize,
}

/// Rank the true next POI at every step of every test window. Windows are
/// scored in parallel; the output order is the sequential window order.
pub fn rank_predictions(model: &Model, seq_len: usize, test: &Dataset) -> Result<Vec<Ranked>> {
    model.cfg().check_dataset(test)?;
    let windows = make_windows(test, seq_len)?;
    let per_window: Vec<Vec<Ranked>> = windows
        .par_iter()
        .map(|w| {
            let scores = model.window_scores(w)?;
            scores
                .iter()
                .zip(&w.targets)
                .map(|(s, t)| {
                    Ok(Ranked {
                        user_id: w.user_id,
                        target_poi: t.event.poi_id,
                        rank: rank_of_target(s, t.event.poi_id)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_window.into_iter().flatten().collect())
}

/// Windows are cut with the checkpoint's training sequence length.
pub fn evaluate(ckpt: &Checkpoint, test: &Dataset, ks: &[usize]) -> Result<EvalResult> {
    let ranked = rank_predictions(&ckpt.model, ckpt.config.seq_len, test)?;
    let ranks: Vec<usize> = ranked.iter().map(|r| r.rank).collect();
    Ok(EvalResult::from_ranks(&ranks, ks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    User,
    Poi,
}

/// Group tags keyed by dense id.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub kind: LabelKind,
    pub tags: HashMap<usize, String>,
}

impl Labels {
    /// Parse `kind<TAB>id<TAB>group` lines. Ids are the raw ids of the input
    /// file; ids absent from the dataset are ignored. All rows must share one kind.
    pub fn parse(text: &str, ds: &Dataset) -> Result<Self> {
        let index = |raw: &[String]| -> HashMap<String, usize> {
            raw.iter()
                .enumerate()
                .map(|(i, r)| (r.clone(), i))
                .collect()
        };
        let users = index(&ds.user_raw);
        let pois = index(&ds.poi_raw);
        let mut kind = None;
        let mut tags = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [k, id, group] = cols[..] else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            };
            let k = match k.trim() {
                "user" => LabelKind::User,
                "poi" => LabelKind::Poi,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("kind must be user or poi, found {other:?}"),
                    })
                }
            };
            if *kind.get_or_insert(k) != k {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "a label file must use a single kind".into(),
                });
            }
            let group = group.trim();
            if group.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty group tag".into(),
                });
            }
            let map = if k == LabelKind::User { &users } else { &pois };
            if let Some(&dense) = map.get(id.trim()) {
                tags.insert(dense, group.to_string());
            }
        }
        let kind = kind.ok_or_else(|| Error::invalid("label file has no rows"))?;
        Ok(Self { kind, tags })
    }

    pub fn load(path: &Path, ds: &Dataset) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, ds)
    }

    fn group_of(&self, r: &Ranked) -> &str {
        let key = match self.kind {
            LabelKind::User => r.user_id,
            LabelKind::Poi => r.target_poi,
        };
        self.tags.get(&key).map_or(UNLABELED, String::as_str)
    }
}

pub enum Grouping<'a> {
    None,
    /// Radius of gyration on the given (training) split, cut at the median.
    RogMedian(&'a Dataset),
    Labels(&'a Labels),
}

/// `long` for users above the median radius of gyration, `short` otherwise.
/// Users without events in `train` are left out.
pub fn rog_groups(train: &Dataset) -> Result<BTreeMap<usize, &'static str>> {
    let rogs = train
        .trajectories
        .iter()
        .filter(|t| !t.events.is_empty())
        .map(|t| Ok((t.user_id, radius_of_gyration(t, train)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut sorted: Vec<f64> = rogs.iter().map(|r| r.1).collect();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => return Ok(BTreeMap::new()),
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    Ok(rogs
        .into_iter()
        .map(|(u, r)| (u, if r > median { "long" } else { "short" }))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedResult {
    pub overall: EvalResult,
    pub groups: BTreeMap<String, EvalResult>,
}

/// Group already-ranked predictions.
pub fn group_ranks(ranked: &[Ranked], grouping: &Grouping, ks: &[usize]) -> Result<GroupedResult> {
    let all: Vec<usize> = ranked.iter().map(|r| r.rank).collect();
    let mut buckets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match grouping {
        Grouping::None => {}
        Grouping::RogMedian(train) => {
            let groups = rog_groups(train)?;
            buckets.insert("long".into(), Vec::new());
            buckets.insert("short".into(), Vec::new());
            for r in ranked {
                let g = groups.get(&r.user_id).copied().unwrap_or(UNLABELED);
                buckets.entry(g.into()).or_default().push(r.rank);
            }
        }
        Grouping::Labels(labels) => {
            for r in ranked {
                buckets
                    .entry(labels.group_of(r).into())
                    .or_default()
                    .push(r.rank);
            }
        }
    }
    Ok(GroupedResult {
        overall: EvalResult::from_ranks(&all, ks),
        groups: buckets
            .into_iter()
            .map(|(g, ranks)| (g, EvalResult::from_ranks(&ranks, ks)))
            .collect(),
    })
}

pub fn grouped_evaluate(
    ckpt: &Checkpoint,
    test: &Dataset,
    grouping: &Grouping,
    ks: &[usize],
) -> Result<GroupedResult> {
    let ranked = rank_predictions(&ckpt.model, ckpt.config.seq_len, test)?;
    group_ranks(&ranked, grouping, ks)
}

impl GroupedResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,group,value,n")?;
        let groups = std::iter::once(("all", &self.overall))
            .chain(self.groups.iter().map(|(g, r)| (g.as_str(), r)));
        for (g, r) in groups {
            for (name, v) in r.rows() {
                writeln!(out, "{name},{g},{v:.6},{}", r.n)?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let names: Vec<String> = self.overall.rows().into_iter().map(|r| r.0).collect();
        let mut s = format!("{:<12}{:>8}", "group", "n");
        for n in &names {
            let _ = write!(s, "{n:>9}");
        }
        s.push('\n');
        let groups = std::iter::once(("all", &self.overall))
            .chain(self.groups.iter().map(|(g, r)| (g.as_str(), r)));
        for (g, r) in groups {
            let _ = write!(s, "{g:<12}{:>8}", r.n);
            for (_, v) in r.rows() {
                let _ = write!(s, "{v:>9.4}");
            }
            s.push('\n');
        }
        s
    }
}
