//! Histogram-matched subset selection.
//!
//! Every feature of the reference corpus is cut into equal-frequency bins.
//! A selection is scored by the L1 distance between its per-feature bin
//! proportions and the reference proportions, averaged over the features
//! that are not constant in the reference:
//!
//! ```text
//! J(S) = 1/F * sum_f sum_b | h_fb(S) / |S| - p_fb |
//! ```
//!
//! Two solvers share that objective: a depth-first branch-and-bound that is
//! exact for small candidate pools, and a greedy construction followed by
//! first-improvement single swaps for production-size pools. Both honor
//! optional per-group (min, max) quotas and break ties by candidate id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::quantile_sorted;

/// Objective differences below this are treated as ties.
pub const OBJECTIVE_EPS: f64 = 1e-12;

/// Largest pool the exact solver accepts.
pub const EXACT_MAX_CANDIDATES: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid selection problem: {0}")]
    InvalidProblem(String),
    #[error("reference has {rows} rows, need at least {bins} for {bins} bins")]
    TooFewReference { rows: usize, bins: usize },
    #[error("infeasible quotas: {0}")]
    InfeasibleQuotas(String),
    #[error("exact solver limited to {max} candidates, got {got}", max = EXACT_MAX_CANDIDATES)]
    ExactTooLarge { got: usize },
    #[error("empty selection")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub group: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    pub candidates: Vec<Candidate>,
    pub reference: Vec<Vec<f64>>,
    pub target_size: usize,
    pub bins_per_feature: usize,
    /// group -> (min, max) selected from that group.
    pub group_quotas: Option<BTreeMap<String, (usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureBins {
    /// Interior cut points; a value `v` lands in bin `#{c in cuts : c < v}`.
    pub cuts: Vec<f64>,
    pub target: Vec<f64>,
    /// Constant in the reference: one bin, excluded from the objective.
    pub degenerate: bool,
}

impl FeatureBins {
    pub fn bin_of(&self, v: f64) -> usize {
        self.cuts.partition_point(|&c| c < v)
    }

    pub fn bin_count(&self) -> usize {
        self.target.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinEdges {
    pub features: Vec<FeatureBins>,
}

impl BinEdges {
    pub fn active_features(&self) -> usize {
        self.features.iter().filter(|f| !f.degenerate).count()
    }

    pub fn label(&self, values: &[f64]) -> Vec<usize> {
        self.features
            .iter()
            .zip(values)
            .map(|(fb, &v)| fb.bin_of(v))
            .collect()
    }
}

pub fn build_bins(reference: &[Vec<f64>], bins: usize) -> Result<BinEdges> {
    if bins < 2 {
        return Err(SamplerError::InvalidProblem(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    if reference.len() < bins {
        return Err(SamplerError::TooFewReference {
            rows: reference.len(),
            bins,
        });
    }
    let n_features = reference[0].len();
    if reference.iter().any(|r| r.len() != n_features) {
        return Err(SamplerError::InvalidProblem("ragged reference rows".into()));
    }
    let k = reference.len() as f64;
    let features = (0..n_features)
        .map(|f| {
            let mut col: Vec<f64> = reference.iter().map(|r| r[f]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(SamplerError::InvalidProblem(format!(
                    "non-finite reference value in feature {f}"
                )));
            }
            col.sort_by(f64::total_cmp);
            if col[0] == col[col.len() - 1] {
                return Ok(FeatureBins {
                    cuts: Vec::new(),
                    target: vec![1.0],
                    degenerate: true,
                });
            }
            let cuts: Vec<f64> = (1..bins)
                .map(|b| quantile_sorted(&col, b as f64 / bins as f64))
                .collect();
            let mut fb = FeatureBins {
                cuts,
                target: vec![0.0; bins],
                degenerate: false,
            };
            let mut counts = vec![0usize; bins];
            for &v in &col {
                counts[fb.bin_of(v)] += 1;
            }
            fb.target = counts.iter().map(|&c| c as f64 / k).collect();
            Ok(fb)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinEdges { features })
}

/// Candidates reduced to their bin labels, sorted by id.
#[derive(Debug, Clone)]
pub struct BinnedCandidates {
    pub ids: Vec<String>,
    groups: Vec<usize>,
    group_names: Vec<String>,
    pub labels: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    width: usize,
}

impl BinnedCandidates {
    pub fn new(candidates: &[Candidate], edges: &BinEdges) -> Result<Self> {
        let mut order: Vec<&Candidate> = candidates.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(SamplerError::InvalidProblem(format!(
                "duplicate candidate id {:?}",
                w[0].id
            )));
        }
        let n_features = edges.features.len();
        if let Some(c) = order.iter().find(|c| c.values.len() != n_features) {
            return Err(SamplerError::InvalidProblem(format!(
                "candidate {:?} has {} features, reference has {}",
                c.id,
                c.values.len(),
                n_features
            )));
        }
        let group_names: Vec<String> = order
            .iter()
            .map(|c| c.group.clone().unwrap_or_default())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let groups = order
            .iter()
            .map(|c| {
                let g = c.group.clone().unwrap_or_default();
                group_names.binary_search(&g).expect("group indexed")
            })
            .collect();
        let mut offsets = Vec::with_capacity(n_features);
        let mut width = 0;
        for fb in &edges.features {
            offsets.push(width);
            width += fb.bin_count();
        }
        Ok(Self {
            ids: order.iter().map(|c| c.id.clone()).collect(),
            groups,
            group_names,
            labels: order.iter().map(|c| edges.label(&c.values)).collect(),
            offsets,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn slot(&self, f: usize, b: usize) -> usize {
        self.offsets[f] + b
    }

    fn add(&self, counts: &mut [u32], idx: usize) {
        for (f, &b) in self.labels[idx].iter().enumerate() {
            counts[self.slot(f, b)] += 1;
        }
    }

    fn remove(&self, counts: &mut [u32], idx: usize) {
        for (f, &b) in self.labels[idx].iter().enumerate() {
            counts[self.slot(f, b)] -= 1;
        }
    }

    fn histogram(&self, selection: &[usize]) -> Vec<u32> {
        let mut counts = vec![0; self.width];
        for &i in selection {
            self.add(&mut counts, i);
        }
        counts
    }

    /// Objective of the candidates at `selection` (indices into `ids`).
    pub fn evaluate(&self, selection: &[usize], edges: &BinEdges) -> Result<f64> {
        if selection.is_empty() {
            return Err(SamplerError::EmptySelection);
        }
        Ok(objective_from_counts(
            &self.histogram(selection),
            selection.len(),
            edges,
            &self.offsets,
        ))
    }
}

fn feature_deviation(counts: &[u32], size: usize, fb: &FeatureBins, offset: usize) -> f64 {
    if fb.degenerate {
        return 0.0;
    }
    let n = size as f64;
    fb.target
        .iter()
        .enumerate()
        .map(|(b, p)| (counts[offset + b] as f64 / n - p).abs())
        .sum()
}

fn objective_from_counts(counts: &[u32], size: usize, edges: &BinEdges, offsets: &[usize]) -> f64 {
    let active = edges.active_features();
    if active == 0 {
        return 0.0;
    }
    let total: f64 = edges
        .features
        .iter()
        .zip(offsets)
        .map(|(fb, &off)| feature_deviation(counts, size, fb, off))
        .sum();
    total / active as f64
}

/// Objective of a selection given as rows of raw feature values.
pub fn evaluate_objective(selection: &[Vec<f64>], edges: &BinEdges) -> Result<f64> {
    if selection.is_empty() {
        return Err(SamplerError::EmptySelection);
    }
    let mut offsets = Vec::new();
    let mut width = 0;
    for fb in &edges.features {
        offsets.push(width);
        width += fb.bin_count();
    }
    let mut counts = vec![0u32; width];
    for row in selection {
        for (f, b) in edges.label(row).into_iter().enumerate() {
            counts[offsets[f] + b] += 1;
        }
    }
    Ok(objective_from_counts(
        &counts,
        selection.len(),
        edges,
        &offsets,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub selected: Vec<String>,
    pub objective: f64,
    pub solver: SolverMode,
    pub iterations: u64,
    pub per_feature_deviation: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub mode: SolverMode,
    pub seed: u64,
    /// Local search stops after `swap_cap_factor * M` accepted swaps.
    pub swap_cap_factor: usize,
}

impl SolveOptions {
    pub fn new(mode: SolverMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            swap_cap_factor: 50,
        }
    }
}

/// Per-group limits indexed like `BinnedCandidates::group_names`.
#[derive(Debug, Clone)]
struct Quotas {
    min: Vec<usize>,
    max: Vec<usize>,
}

impl Quotas {
    fn resolve(problem: &SelectionProblem, binned: &BinnedCandidates) -> Result<Self> {
        let n_groups = binned.group_names.len();
        let mut avail = vec![0usize; n_groups];
        for &g in &binned.groups {
            avail[g] += 1;
        }
        let mut min = vec![0; n_groups];
        let mut max = avail.clone();
        if let Some(quotas) = &problem.group_quotas {
            for (name, &(lo, hi)) in quotas {
                if lo > hi {
                    return Err(SamplerError::InfeasibleQuotas(format!(
                        "group {name:?}: min {lo} > max {hi}"
                    )));
                }
                match binned.group_names.binary_search(name) {
                    Ok(g) => {
                        if lo > avail[g] {
                            return Err(SamplerError::InfeasibleQuotas(format!(
                                "group {name:?} needs {lo} but has {} candidates",
                                avail[g]
                            )));
                        }
                        min[g] = lo;
                        max[g] = hi.min(avail[g]);
                    }
                    Err(_) if lo > 0 => {
                        return Err(SamplerError::InfeasibleQuotas(format!(
                            "group {name:?} has no candidates"
                        )));
                    }
                    Err(_) => {}
                }
            }
        }
        let lo: usize = min.iter().sum();
        let hi: usize = max.iter().sum();
        let n = problem.target_size;
        if lo > n || n > hi {
            return Err(SamplerError::InfeasibleQuotas(format!(
                "target size {n} outside the quota range [{lo}, {hi}]"
            )));
        }
        Ok(Self { min, max })
    }
}

fn validate(problem: &SelectionProblem) -> Result<()> {
    let m = problem.candidates.len();
    if problem.target_size == 0 || problem.target_size > m {
        return Err(SamplerError::InvalidProblem(format!(
            "target size {} must be in 1..={m}",
            problem.target_size
        )));
    }
    if problem
        .candidates
        .iter()
        .flat_map(|c| &c.values)
        .any(|v| !v.is_finite())
    {
        return Err(SamplerError::InvalidProblem(
            "non-finite candidate feature".into(),
        ));
    }
    Ok(())
}

pub fn solve(problem: &SelectionProblem, opts: SolveOptions) -> Result<SelectionResult> {
    validate(problem)?;
    if opts.mode == SolverMode::Exact && problem.candidates.len() > EXACT_MAX_CANDIDATES {
        return Err(SamplerError::ExactTooLarge {
            got: problem.candidates.len(),
        });
    }
    let edges = build_bins(&problem.reference, problem.bins_per_feature)?;
    let binned = BinnedCandidates::new(&problem.candidates, &edges)?;
    let quotas = Quotas::resolve(problem, &binned)?;
    let (mut selection, iterations) = match opts.mode {
        SolverMode::Exact => exact(&binned, &edges, &quotas, problem.target_size),
        SolverMode::Heuristic => heuristic(&binned, &edges, &quotas, problem.target_size, opts),
    };
    selection.sort_unstable();
    let counts = binned.histogram(&selection);
    let per_feature_deviation = edges
        .features
        .iter()
        .zip(&binned.offsets)
        .map(|(fb, &off)| feature_deviation(&counts, selection.len(), fb, off))
        .collect();
    Ok(SelectionResult {
        objective: objective_from_counts(&counts, selection.len(), &edges, &binned.offsets),
        selected: selection.iter().map(|&i| binned.ids[i].clone()).collect(),
        solver: opts.mode,
        iterations,
        per_feature_deviation,
    })
}

struct Search<'a> {
    binned: &'a BinnedCandidates,
    edges: &'a BinEdges,
    quotas: &'a Quotas,
    target: usize,
    /// suffix_bins[i][slot] = candidates at positions >= i in that bin.
    suffix_bins: Vec<Vec<u32>>,
    suffix_groups: Vec<Vec<usize>>,
    counts: Vec<u32>,
    group_counts: Vec<usize>,
    chosen: Vec<usize>,
    best: f64,
    best_selection: Vec<usize>,
    nodes: u64,
}

impl Search<'_> {
    /// Lower bound on the objective of any completion from position `pos`.
    ///
    /// Final deviations sum to zero per feature, so the L1 distance equals
    /// twice the positive excess and also twice the deficit. Bins already
    /// over target can only grow; bins that even every remaining candidate
    /// (capped at the open slots) cannot fill stay short.
    fn lower_bound(&self, pos: usize) -> f64 {
        let active = self.edges.active_features();
        if active == 0 {
            return 0.0;
        }
        let n = self.target as f64;
        let open = (self.target - self.chosen.len()) as u32;
        let avail = &self.suffix_bins[pos];
        let mut total = 0.0;
        for (fb, &off) in self.edges.features.iter().zip(&self.binned.offsets) {
            if fb.degenerate {
                continue;
            }
            let (mut excess, mut deficit) = (0.0f64, 0.0f64);
            for (b, p) in fb.target.iter().enumerate() {
                let c = self.counts[off + b];
                excess += (c as f64 / n - p).max(0.0);
                let reach = c + avail[off + b].min(open);
                deficit += (p - reach as f64 / n).max(0.0);
            }
            total += 2.0 * excess.max(deficit);
        }
        total / active as f64
    }

    fn quotas_reachable(&self, pos: usize) -> bool {
        let open = self.target - self.chosen.len();
        let mut needed = 0;
        let mut room = 0;
        for g in 0..self.group_counts.len() {
            let have = self.group_counts[g];
            let rest = self.suffix_groups[pos][g];
            let need = self.quotas.min[g].saturating_sub(have);
            if need > rest {
                return false;
            }
            needed += need;
            room += (self.quotas.max[g] - have).min(rest);
        }
        needed <= open && open <= room
    }

    fn dfs(&mut self, pos: usize) {
        self.nodes += 1;
        if self.chosen.len() == self.target {
            let j =
                objective_from_counts(&self.counts, self.target, self.edges, &self.binned.offsets);
            if j < self.best - OBJECTIVE_EPS {
                self.best = j;
                self.best_selection = self.chosen.clone();
            }
            return;
        }
        if !self.quotas_reachable(pos) || self.lower_bound(pos) >= self.best - OBJECTIVE_EPS {
            return;
        }
        // include first: leaves are then visited in lexicographic id order
        let g = self.binned.groups[pos];
        if self.group_counts[g] < self.quotas.max[g] {
            self.binned.add(&mut self.counts, pos);
            self.group_counts[g] += 1;
            self.chosen.push(pos);
            self.dfs(pos + 1);
            self.chosen.pop();
            self.group_counts[g] -= 1;
            self.binned.remove(&mut self.counts, pos);
        }
        self.dfs(pos + 1);
    }
}

fn exact(
    binned: &BinnedCandidates,
    edges: &BinEdges,
    quotas: &Quotas,
    target: usize,
) -> (Vec<usize>, u64) {
    let m = binned.len();
    let n_groups = quotas.min.len();
    let mut suffix_bins = vec![vec![0u32; binned.width]; m + 1];
    let mut suffix_groups = vec![vec![0usize; n_groups]; m + 1];
    for i in (0..m).rev() {
        suffix_bins[i] = suffix_bins[i + 1].clone();
        binned.add(&mut suffix_bins[i], i);
        suffix_groups[i] = suffix_groups[i + 1].clone();
        suffix_groups[i][binned.groups[i]] += 1;
    }
    let mut search = Search {
        binned,
        edges,
        quotas,
        target,
        suffix_bins,
        suffix_groups,
        counts: vec![0; binned.width],
        group_counts: vec![0; n_groups],
        chosen: Vec::with_capacity(target),
        best: f64::INFINITY,
        best_selection: Vec::new(),
        nodes: 0,
    };
    search.dfs(0);
    (search.best_selection, search.nodes)
}

/// Can `open` more slots still be filled within quotas given group counts?
fn fill_feasible(
    quotas: &Quotas,
    group_counts: &[usize],
    remaining: &[usize],
    open: usize,
) -> bool {
    let mut needed = 0;
    let mut room = 0;
    for g in 0..group_counts.len() {
        let need = quotas.min[g].saturating_sub(group_counts[g]);
        if need > remaining[g] {
            return false;
        }
        needed += need;
        room += (quotas.max[g] - group_counts[g]).min(remaining[g]);
    }
    needed <= open && open <= room
}

fn heuristic(
    binned: &BinnedCandidates,
    edges: &BinEdges,
    quotas: &Quotas,
    target: usize,
    opts: SolveOptions,
) -> (Vec<usize>, u64) {
    let m = binned.len();
    let n_groups = quotas.min.len();
    let mut counts = vec![0u32; binned.width];
    let mut group_counts = vec![0usize; n_groups];
    let mut unselected_per_group = vec![0usize; n_groups];
    for &g in &binned.groups {
        unselected_per_group[g] += 1;
    }
    let mut in_sel = vec![false; m];
    let mut selection = Vec::with_capacity(target);
    let mut iterations = 0u64;

    // greedy construction
    while selection.len() < target {
        let size = selection.len() + 1;
        let open_after = target - size;
        let best = (0..m)
            .into_par_iter()
            .filter(|&c| !in_sel[c])
            .filter_map(|c| {
                let g = binned.groups[c];
                if group_counts[g] >= quotas.max[g] {
                    return None;
                }
                let mut gc = group_counts.clone();
                gc[g] += 1;
                let mut rest = unselected_per_group.clone();
                rest[g] -= 1;
                if !fill_feasible(quotas, &gc, &rest, open_after) {
                    return None;
                }
                let mut trial = counts.clone();
                binned.add(&mut trial, c);
                Some((
                    objective_from_counts(&trial, size, edges, &binned.offsets),
                    c,
                ))
            })
            .reduce_with(|a, b| {
                // strict improvement wins, otherwise the smaller index (= id)
                if b.0 < a.0 - OBJECTIVE_EPS || (b.0 <= a.0 + OBJECTIVE_EPS && b.1 < a.1) {
                    b
                } else {
                    a
                }
            })
            .expect("quota feasibility guarantees a candidate");
        let c = best.1;
        binned.add(&mut counts, c);
        group_counts[binned.groups[c]] += 1;
        unselected_per_group[binned.groups[c]] -= 1;
        in_sel[c] = true;
        selection.push(c);
        iterations += 1;
    }

    // first-improvement 1-swap local search
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cap = (opts.swap_cap_factor * m) as u64;
    let mut current = objective_from_counts(&counts, target, edges, &binned.offsets);
    let mut swaps = 0u64;
    'search: while swaps < cap {
        let mut outgoing: Vec<usize> = (0..m).filter(|&i| in_sel[i]).collect();
        let mut incoming: Vec<usize> = (0..m).filter(|&i| !in_sel[i]).collect();
        outgoing.shuffle(&mut rng);
        incoming.shuffle(&mut rng);
        for &out in &outgoing {
            let g_out = binned.groups[out];
            for &inc in &incoming {
                let g_in = binned.groups[inc];
                if g_out != g_in
                    && (group_counts[g_out] <= quotas.min[g_out]
                        || group_counts[g_in] >= quotas.max[g_in])
                {
                    continue;
                }
                binned.remove(&mut counts, out);
                binned.add(&mut counts, inc);
                let trial = objective_from_counts(&counts, target, edges, &binned.offsets);
                if trial < current - OBJECTIVE_EPS {
                    current = trial;
                    in_sel[out] = false;
                    in_sel[inc] = true;
                    group_counts[g_out] -= 1;
                    group_counts[g_in] += 1;
                    swaps += 1;
                    continue 'search;
                }
                binned.remove(&mut counts, inc);
                binned.add(&mut counts, out);
            }
        }
        break;
    }
    let selection = (0..m).filter(|&i| in_sel[i]).collect();
    (selection, iterations + swaps)
}

/// A CSV table whose first column is an id and the rest numeric features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl FeatureTable {
    pub fn read<R: Read>(input: R) -> std::result::Result<Self, String> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
        if headers.len() < 2 {
            return Err("feature table needs an id column and at least one feature".into());
        }
        let names = headers.iter().skip(1).map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format!("row {}: {e}", line + 2))?;
            rows.push((rec[0].to_owned(), values));
        }
        Ok(Self { names, rows })
    }
}

pub fn write_selection<W: Write>(mut out: W, result: &SelectionResult) -> std::io::Result<()> {
    for id in &result.selected {
        writeln!(out, "{id}")?;
    }
    out.flush()
}

/// JSON report: objective, solver, iterations and per-feature deviations.
pub fn report_json(result: &SelectionResult, feature_names: &[String]) -> serde_json::Value {
    let per_feature: serde_json::Map<String, serde_json::Value> = feature_names
        .iter()
        .zip(&result.per_feature_deviation)
        .map(|(n, d)| (n.clone(), serde_json::json!(d)))
        .collect();
    serde_json::json!({
        "objective": result.objective,
        "solver": result.solver,
        "iterations": result.iterations,
        "selected": result.selected.len(),
        "per_feature_deviation": per_feature,
    })
}
