//! MOS and consistency statistics on a cleaned rating table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleaning::{ContentKind, RatingTable};
use crate::stats::{mean, median, population_std, sample_std};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 paired values, got {0}")]
    TooShort(usize),
    #[error("correlation undefined for constant input")]
    Degenerate,
    #[error("empty rating table")]
    EmptyTable,
    #[error("need at least 4 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("no subject has enough golden ratings")]
    NoGoldenData,
    #[error("no patch matches a source video")]
    NoPairs,
    #[error("split {split}: {source}")]
    Split {
        split: usize,
        source: Box<AnalysisError>,
    },
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::TooShort(x.len()));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::Degenerate);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn lcc(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    pearson(x, y)
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRow {
    pub content_id: String,
    pub content_kind: ContentKind,
    pub mos: f64,
    pub std: f64,
    pub n_ratings: usize,
}

/// Rows ordered by (kind, content id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MosTable {
    pub rows: Vec<MosRow>,
}

impl MosTable {
    pub fn of_kind(&self, kind: ContentKind) -> impl Iterator<Item = &MosRow> {
        self.rows.iter().filter(move |r| r.content_kind == kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["content_id", "content_kind", "mos", "std", "n_ratings"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> csv::Result<Self> {
        let rows = csv::Reader::from_reader(input)
            .deserialize()
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }
}

fn scores_by_content(
    table: &RatingTable,
    kind: Option<ContentKind>,
) -> BTreeMap<(ContentKind, &str), Vec<f64>> {
    let mut m: BTreeMap<(ContentKind, &str), Vec<f64>> = BTreeMap::new();
    for r in table
        .rows()
        .iter()
        .filter(|r| kind.is_none_or(|k| r.content_kind == k))
    {
        m.entry((r.content_kind, &r.content_id))
            .or_default()
            .push(r.score);
    }
    m
}

/// Mean and sample std per content; `kind = None` covers every kind.
pub fn compute_mos(
    table: &RatingTable,
    kind: Option<ContentKind>,
) -> Result<MosTable, AnalysisError> {
    let groups = scores_by_content(table, kind);
    if groups.is_empty() {
        return Err(AnalysisError::EmptyTable);
    }
    let rows = groups
        .into_iter()
        .map(|((content_kind, id), xs)| MosRow {
            content_id: id.to_string(),
            content_kind,
            mos: mean(&xs),
            std: sample_std(&xs),
            n_ratings: xs.len(),
        })
        .collect();
    Ok(MosTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub srcc: f64,
    /// Contents rated in both halves; the others are left out of this split.
    pub n_common: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub mean_srcc: f64,
    pub std_srcc: f64,
    pub n_splits: usize,
    pub seed: u64,
    pub splits: Vec<SplitOutcome>,
}

/// Split-half agreement: subjects (sorted by id) are shuffled with seed
/// `seed + split`, halved with the odd subject going to the first half, and
/// the two halves' MOS are rank-correlated over the contents both rated.
pub fn inter_subject_consistency(
    table: &RatingTable,
    kind: ContentKind,
    n_splits: usize,
    seed: u64,
) -> Result<ConsistencyResult, AnalysisError> {
    let rows: Vec<_> = table
        .rows()
        .iter()
        .filter(|r| r.content_kind == kind)
        .collect();
    let subjects: Vec<&str> = rows
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.len() < 4 {
        return Err(AnalysisError::TooFewSubjects(subjects.len()));
    }
    let index: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let by_subject: Vec<Vec<(&str, f64)>> = {
        let mut v = vec![Vec::new(); subjects.len()];
        for r in &rows {
            v[index[r.subject_id.as_str()]].push((r.content_id.as_str(), r.score));
        }
        v
    };

    let splits: Vec<SplitOutcome> = (0..n_splits)
        .into_par_iter()
        .map(|split| {
            let mut order: Vec<usize> = (0..subjects.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(
                seed.wrapping_add(split as u64),
            ));
            let cut = order.len().div_ceil(2);
            let half_mos = |members: &[usize]| {
                let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
                let mut members = members.to_vec();
                members.sort_unstable();
                for &s in &members {
                    for &(c, x) in &by_subject[s] {
                        let e = acc.entry(c).or_insert((0.0, 0));
                        e.0 += x;
                        e.1 += 1;
                    }
                }
                acc.into_iter()
                    .map(|(c, (sum, n))| (c, sum / n as f64))
                    .collect::<BTreeMap<_, _>>()
            };
            let (a, b) = (half_mos(&order[..cut]), half_mos(&order[cut..]));
            let (xs, ys): (Vec<f64>, Vec<f64>) = a
                .iter()
                .filter_map(|(c, &ma)| b.get(c).map(|&mb| (ma, mb)))
                .unzip();
            let r = srcc(&xs, &ys).map_err(|e| AnalysisError::Split {
                split,
                source: Box::new(e),
            })?;
            Ok(SplitOutcome {
                srcc: r,
                n_common: xs.len(),
            })
        })
        .collect::<Result<_, AnalysisError>>()?;

    let values: Vec<f64> = splits.iter().map(|s| s.srcc).collect();
    Ok(ConsistencyResult {
        mean_srcc: if values.is_empty() {
            f64::NAN
        } else {
            mean(&values)
        },
        std_srcc: if values.is_empty() {
            f64::NAN
        } else {
            population_std(&values)
        },
        n_splits,
        seed,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenConsistency {
    pub median_lcc: f64,
    pub n_subjects: usize,
    pub n_skipped: usize,
}

pub const MIN_GOLDEN_RATINGS: usize = 3;

/// Median over subjects of the LCC between each subject's scores on golden
/// videos and the reference scores. Subjects with fewer than three golden
/// ratings, or with a constant series, are skipped.
pub fn intra_subject_golden(
    table: &RatingTable,
    golden: &BTreeMap<String, f64>,
) -> Result<GoldenConsistency, AnalysisError> {
    let mut per_subject: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in table
        .rows()
        .iter()
        .filter(|r| r.content_kind == ContentKind::Video)
    {
        if let Some(&g) = golden.get(&r.content_id) {
            let e = per_subject.entry(&r.subject_id).or_default();
            e.0.push(r.score);
            e.1.push(g);
        }
    }
    let n_total = per_subject.len();
    let lccs: Vec<f64> = per_subject
        .values()
        .filter(|(s, _)| s.len() >= MIN_GOLDEN_RATINGS)
        .filter_map(|(s, g)| lcc(s, g).ok())
        .collect();
    if lccs.is_empty() {
        return Err(AnalysisError::NoGoldenData);
    }
    Ok(GoldenConsistency {
        median_lcc: median(&lccs),
        n_subjects: lccs.len(),
        n_skipped: n_total - lccs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCorrelation {
    pub kind: ContentKind,
    pub srcc: f64,
    pub n_pairs: usize,
}

/// SRCC between video MOS and the MOS of one patch kind, paired by id (a
/// patch carries its source video's id).
pub fn patch_video_correlation(
    video_mos: &MosTable,
    patch_mos: &MosTable,
    kind: ContentKind,
) -> Result<PatchCorrelation, AnalysisError> {
    let videos: BTreeMap<&str, f64> = video_mos
        .of_kind(ContentKind::Video)
        .map(|r| (r.content_id.as_str(), r.mos))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = patch_mos
        .of_kind(kind)
        .filter_map(|p| videos.get(p.content_id.as_str()).map(|&v| (v, p.mos)))
        .unzip();
    if xs.is_empty() {
        return Err(AnalysisError::NoPairs);
    }
    Ok(PatchCorrelation {
        kind,
        srcc: srcc(&xs, &ys)?,
        n_pairs: xs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Equal-width bins over [0, 100]; the last bin is closed so 100 is counted.
pub fn export_histogram(mos: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = 100.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &m in mos {
        let b = ((m / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_low: i as f64 * width,
            bin_high: (i + 1) as f64 * width,
            count,
        })
        .collect()
}

pub fn write_histogram_csv<W: Write>(out: W, bins: &[HistogramBin]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}
