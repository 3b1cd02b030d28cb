//! Rating cleaning after session screening.
//!
//! Four stages run in order: subject exclusions from flags and verdicts,
//! lens exclusions, the BT.500 Annex 1 subject screen, and per-stimulus
//! outlier removal. Content kinds are screened independently.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screening::{Reason, SessionVerdict, VerdictState};
use crate::stats::{central_moments_2_4, mean, median, quantile_sorted, sample_std};

#[derive(Debug, Error, PartialEq)]
pub enum CleanError {
    #[error("need at least {need} values, got {got}")]
    TooFew { got: usize, need: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("empty rating table")]
    EmptyTable,
    #[error("duplicate score for subject {subject} on {kind} {content}")]
    DuplicateScore {
        subject: String,
        content: String,
        kind: ContentKind,
    },
    #[error("score {0} outside [0, 100]")]
    ScoreRange(f64),
    #[error("no flags for subject {0}")]
    MissingFlags(String),
    #[error("no verdict for subject {0}")]
    MissingVerdict(String),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentKind {
    Video,
    Sv,
    Tv,
    Stv,
}

impl ContentKind {
    pub const ALL: [ContentKind; 4] = [
        ContentKind::Video,
        ContentKind::Sv,
        ContentKind::Tv,
        ContentKind::Stv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContentKind::Video => "video",
            ContentKind::Sv => "sv",
            ContentKind::Tv => "tv",
            ContentKind::Stv => "stv",
        }
    }
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown content kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub subject_id: String,
    pub content_id: String,
    pub content_kind: ContentKind,
    pub score: f64,
}

/// Sparse subject x content score matrix; at most one score per
/// (subject, kind, content).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingTable {
    rows: Vec<RatingRow>,
}

impl RatingTable {
    pub fn new(rows: Vec<RatingRow>) -> Result<Self, CleanError> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !(0.0..=100.0).contains(&r.score) {
                return Err(CleanError::ScoreRange(r.score));
            }
            if !seen.insert((&r.subject_id, r.content_kind, &r.content_id)) {
                return Err(CleanError::DuplicateScore {
                    subject: r.subject_id.clone(),
                    content: r.content_id.clone(),
                    kind: r.content_kind,
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[RatingRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.subject_id.as_str()).collect()
    }

    pub fn kinds(&self) -> BTreeSet<ContentKind> {
        self.rows.iter().map(|r| r.content_kind).collect()
    }

    pub fn of_kind(&self, kind: ContentKind) -> RatingTable {
        RatingTable {
            rows: self
                .rows
                .iter()
                .filter(|r| r.content_kind == kind)
                .cloned()
                .collect(),
        }
    }

    /// Scores grouped by stimulus (content id), each as `(subject, score)`
    /// in row order. Only meaningful for a single-kind table.
    fn by_content(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut m: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for r in &self.rows {
            m.entry(&r.content_id)
                .or_default()
                .push((&r.subject_id, r.score));
        }
        m
    }

    fn retain(&mut self, mut keep: impl FnMut(&RatingRow) -> bool) {
        self.rows.retain(|r| keep(r));
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, CleanError> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<Result<Vec<RatingRow>, _>>()
            .map_err(|e| CleanError::Parse(e.to_string()))?;
        Self::new(rows)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["subject_id", "content_id", "content_kind", "score"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFlags {
    pub blocked: bool,
    pub stall_fraction: f64,
    pub wore_lenses: bool,
}

impl SubjectFlags {
    /// Flags recoverable from a screened session. A missing survey answer
    /// counts as not wearing lenses.
    pub fn from_verdict(v: &SessionVerdict) -> Self {
        Self {
            blocked: false,
            stall_fraction: v.stall_fraction,
            wore_lenses: v.wore_lenses.unwrap_or(false),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FlagRow {
    subject_id: String,
    blocked: bool,
    stall_fraction: f64,
    wore_lenses: bool,
}

pub fn read_flags_csv<R: Read>(input: R) -> Result<BTreeMap<String, SubjectFlags>, CleanError> {
    csv::Reader::from_reader(input)
        .deserialize::<FlagRow>()
        .map(|r| {
            r.map(|r| {
                (
                    r.subject_id,
                    SubjectFlags {
                        blocked: r.blocked,
                        stall_fraction: r.stall_fraction,
                        wore_lenses: r.wore_lenses,
                    },
                )
            })
            .map_err(|e| CleanError::Parse(e.to_string()))
        })
        .collect()
}

pub fn write_flags_csv<W: Write>(
    out: W,
    flags: &BTreeMap<String, SubjectFlags>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, f) in flags {
        w.serialize(FlagRow {
            subject_id: id.clone(),
            blocked: f.blocked,
            stall_fraction: f.stall_fraction,
            wore_lenses: f.wore_lenses,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Kurtosis coefficient `m4 / m2^2` from population moments.
pub fn kurtosis(xs: &[f64]) -> Result<f64, CleanError> {
    if xs.len() < 4 {
        return Err(CleanError::TooFew {
            got: xs.len(),
            need: 4,
        });
    }
    let (m2, m4) = central_moments_2_4(xs);
    if m2 <= 0.0 {
        return Err(CleanError::ZeroVariance);
    }
    Ok(m4 / (m2 * m2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningConfig {
    /// Subjects with a larger stalled-playback fraction are excluded.
    pub stall_fraction_max: f64,
    /// Kurtosis band treated as Gaussian-like, inclusive.
    pub kurtosis_lo: f64,
    pub kurtosis_hi: f64,
    /// BT.500 band half-widths in sample standard deviations.
    pub bt500_narrow_k: f64,
    pub bt500_wide_k: f64,
    pub bt500_outside_fraction: f64,
    pub bt500_balance_max: f64,
    pub modz_scale: f64,
    pub modz_threshold: f64,
    pub mean_ad_scale: f64,
    pub tukey_k: f64,
    pub min_outlier_n: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            stall_fraction_max: 0.5,
            kurtosis_lo: 2.0,
            kurtosis_hi: 4.0,
            bt500_narrow_k: 2.0,
            bt500_wide_k: 20f64.sqrt(),
            bt500_outside_fraction: 0.05,
            bt500_balance_max: 0.3,
            modz_scale: 0.6745,
            modz_threshold: 3.5,
            mean_ad_scale: 1.253314,
            tukey_k: 1.5,
            min_outlier_n: 5,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("stall_fraction_max", self.stall_fraction_max),
            ("bt500_narrow_k", self.bt500_narrow_k),
            ("bt500_wide_k", self.bt500_wide_k),
            ("bt500_outside_fraction", self.bt500_outside_fraction),
            ("bt500_balance_max", self.bt500_balance_max),
            ("modz_scale", self.modz_scale),
            ("modz_threshold", self.modz_threshold),
            ("mean_ad_scale", self.mean_ad_scale),
            ("tukey_k", self.tukey_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("cleaning.{name} must be positive"));
        }
        if !matches!(
            self.kurtosis_lo.partial_cmp(&self.kurtosis_hi),
            Some(Ordering::Less | Ordering::Equal)
        ) {
            return Err("cleaning.kurtosis_lo must not exceed kurtosis_hi".into());
        }
        if self.min_outlier_n < 4 {
            return Err("cleaning.min_outlier_n must be at least 4".into());
        }
        Ok(())
    }

    fn gaussian_like(&self, beta2: f64) -> bool {
        (self.kurtosis_lo..=self.kurtosis_hi).contains(&beta2)
    }
}

/// BT.500 Annex 1 single-pass subject screen over one content kind.
/// Returns rejected subject ids in sorted order.
pub fn bt500_screen(table: &RatingTable, cfg: &CleaningConfig) -> Result<Vec<String>, CleanError> {
    if table.is_empty() {
        return Err(CleanError::EmptyTable);
    }
    let stimuli = table.by_content();

    // per-stimulus bounds; None when the stimulus cannot produce counts
    let bounds: Vec<Option<(f64, f64)>> = stimuli
        .par_iter()
        .map(|(_, scores)| {
            let xs: Vec<f64> = scores.iter().map(|s| s.1).collect();
            if xs.len() < 2 {
                return None;
            }
            let s = sample_std(&xs);
            if s == 0.0 {
                return None;
            }
            let m = mean(&xs);
            let width = match kurtosis(&xs) {
                Ok(b) if cfg.gaussian_like(b) => cfg.bt500_narrow_k,
                _ => cfg.bt500_wide_k,
            };
            Some((m - width * s, m + width * s))
        })
        .collect();

    #[derive(Default)]
    struct Counts {
        rated: usize,
        above: usize,
        below: usize,
    }
    let mut counts: BTreeMap<&str, Counts> = BTreeMap::new();
    for ((_, scores), bound) in stimuli.iter().zip(&bounds) {
        for &(subject, x) in scores {
            let c = counts.entry(subject).or_default();
            c.rated += 1;
            if let Some((lo, hi)) = *bound {
                if x > hi {
                    c.above += 1;
                } else if x < lo {
                    c.below += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .filter(|(_, c)| {
            let pq = (c.above + c.below) as f64;
            pq > 0.0
                && pq / c.rated as f64 > cfg.bt500_outside_fraction
                && (c.above as f64 - c.below as f64).abs() / pq < cfg.bt500_balance_max
        })
        .map(|(s, _)| s.to_string())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMethod {
    ModifiedZ,
    Tukey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierOutcome {
    pub kept: Vec<f64>,
    /// Indices into the input, ascending.
    pub dropped: Vec<usize>,
    pub method: OutlierMethod,
}

/// Picks the method from the kurtosis gate; zero-variance input keeps
/// everything.
pub fn outlier_filter(scores: &[f64], cfg: &CleaningConfig) -> Result<OutlierOutcome, CleanError> {
    if scores.len() < cfg.min_outlier_n {
        return Err(CleanError::TooFew {
            got: scores.len(),
            need: cfg.min_outlier_n,
        });
    }
    match kurtosis(scores) {
        Ok(b) if cfg.gaussian_like(b) => outlier_filter_with(scores, OutlierMethod::ModifiedZ, cfg),
        Ok(_) => outlier_filter_with(scores, OutlierMethod::Tukey, cfg),
        Err(_) => Ok(OutlierOutcome {
            kept: scores.to_vec(),
            dropped: Vec::new(),
            method: OutlierMethod::ModifiedZ,
        }),
    }
}

pub fn outlier_filter_with(
    scores: &[f64],
    method: OutlierMethod,
    cfg: &CleaningConfig,
) -> Result<OutlierOutcome, CleanError> {
    if scores.len() < cfg.min_outlier_n {
        return Err(CleanError::TooFew {
            got: scores.len(),
            need: cfg.min_outlier_n,
        });
    }
    let (scale, limit, ad_scale, k) = (
        cfg.modz_scale,
        cfg.modz_threshold,
        cfg.mean_ad_scale,
        cfg.tukey_k,
    );
    let outlier: Box<dyn Fn(f64) -> bool> = match method {
        OutlierMethod::ModifiedZ => {
            let med = median(scores);
            let abs_dev: Vec<f64> = scores.iter().map(|x| (x - med).abs()).collect();
            let mad = median(&abs_dev);
            let mean_ad = mean(&abs_dev);
            if mad > 0.0 {
                Box::new(move |x| (scale * (x - med) / mad).abs() > limit)
            } else if mean_ad > 0.0 {
                Box::new(move |x| ((x - med) / (ad_scale * mean_ad)).abs() > limit)
            } else {
                Box::new(|_| false)
            }
        }
        OutlierMethod::Tukey => {
            let mut s = scores.to_vec();
            s.sort_by(f64::total_cmp);
            let q1 = quantile_sorted(&s, 0.25);
            let q3 = quantile_sorted(&s, 0.75);
            let iqr = q3 - q1;
            let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
            Box::new(move |x| x < lo || x > hi)
        }
    };
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (i, &x) in scores.iter().enumerate() {
        if outlier(x) {
            dropped.push(i);
        } else {
            kept.push(x);
        }
    }
    Ok(OutlierOutcome {
        kept,
        dropped,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedScore {
    pub subject_id: String,
    pub content_id: String,
    pub content_kind: ContentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSummary {
    pub content_id: String,
    pub content_kind: ContentKind,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub subjects_dropped_stage1: Vec<String>,
    pub subjects_dropped_stage2: Vec<String>,
    /// Per kind, since kinds are screened independently.
    pub subjects_dropped_stage3: BTreeMap<ContentKind, Vec<String>>,
    pub scores_dropped_stage4: Vec<DroppedScore>,
    pub stimuli: Vec<StimulusSummary>,
}

impl CleaningReport {
    /// Subjects removed by any stage, including stage 3 on any kind.
    pub fn all_dropped_subjects(&self) -> BTreeSet<String> {
        self.subjects_dropped_stage1
            .iter()
            .chain(&self.subjects_dropped_stage2)
            .chain(self.subjects_dropped_stage3.values().flatten())
            .cloned()
            .collect()
    }
}

pub type VerdictMap = BTreeMap<String, (VerdictState, Reason)>;

pub fn verdict_map(verdicts: &[SessionVerdict]) -> VerdictMap {
    verdicts
        .iter()
        .map(|v| (v.subject_id.clone(), (v.state, v.reason)))
        .collect()
}

/// Runs the four cleaning stages. `flags` must cover every subject in the
/// table, and so must `verdicts` when given.
pub fn clean(
    table: &RatingTable,
    flags: &BTreeMap<String, SubjectFlags>,
    verdicts: Option<&VerdictMap>,
    cfg: &CleaningConfig,
) -> Result<(RatingTable, CleaningReport), CleanError> {
    let mut report = CleaningReport::default();
    let subjects = table.subjects();
    for s in &subjects {
        if !flags.contains_key(*s) {
            return Err(CleanError::MissingFlags(s.to_string()));
        }
        if let Some(v) = verdicts {
            if !v.contains_key(*s) {
                return Err(CleanError::MissingVerdict(s.to_string()));
            }
        }
    }

    let mut dropped: BTreeSet<String> = BTreeSet::new();
    for &s in &subjects {
        let f = &flags[s];
        let rejected = verdicts.is_some_and(|v| v[s].0 == VerdictState::Rejected);
        if f.blocked || f.stall_fraction > cfg.stall_fraction_max || rejected {
            report.subjects_dropped_stage1.push(s.to_string());
            dropped.insert(s.to_string());
        }
    }
    for &s in &subjects {
        if !dropped.contains(s) && !flags[s].wore_lenses {
            report.subjects_dropped_stage2.push(s.to_string());
            dropped.insert(s.to_string());
        }
    }
    let mut out = table.clone();
    out.retain(|r| !dropped.contains(&r.subject_id));

    let mut stage3: BTreeSet<(ContentKind, String)> = BTreeSet::new();
    for kind in out.kinds() {
        let rejected = bt500_screen(&out.of_kind(kind), cfg)?;
        stage3.extend(rejected.iter().map(|s| (kind, s.clone())));
        report.subjects_dropped_stage3.insert(kind, rejected);
    }
    out.retain(|r| !stage3.contains(&(r.content_kind, r.subject_id.clone())));

    // stage 4, stimuli with fewer than min_outlier_n scores are left as is
    let mut stimuli: BTreeMap<(ContentKind, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in out.rows.iter().enumerate() {
        stimuli
            .entry((r.content_kind, &r.content_id))
            .or_default()
            .push(i);
    }
    let outcomes: Vec<(Vec<usize>, StimulusSummary)> = stimuli
        .par_iter()
        .map(|(&(kind, id), rows)| {
            let xs: Vec<f64> = rows.iter().map(|&i| out.rows[i].score).collect();
            let (kept, drop_rows) = match outlier_filter(&xs, cfg) {
                Ok(o) => (o.kept, o.dropped.iter().map(|&j| rows[j]).collect()),
                Err(_) => (xs, Vec::new()),
            };
            let summary = StimulusSummary {
                content_id: id.to_string(),
                content_kind: kind,
                n: kept.len(),
                mean: mean(&kept),
                std: sample_std(&kept),
            };
            (drop_rows, summary)
        })
        .collect();
    let mut drop_rows: BTreeSet<usize> = BTreeSet::new();
    for (rows, summary) in outcomes {
        for &i in &rows {
            let r = &out.rows[i];
            report.scores_dropped_stage4.push(DroppedScore {
                subject_id: r.subject_id.clone(),
                content_id: r.content_id.clone(),
                content_kind: r.content_kind,
            });
        }
        drop_rows.extend(rows);
        report.stimuli.push(summary);
    }
    let rows = std::mem::take(&mut out.rows);
    out.rows = rows
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop_rows.contains(i))
        .map(|(_, r)| r)
        .collect();
    Ok((out, report))
}
