//! Reference implementations for the acceptance suite. Each one is written
//! straight from the textbook definition, with its own loops, and shares no
//! code with the library beyond plain data types.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

// ---------- features ----------

fn gauss(u: f64, sigma: f64) -> f64 {
    (-(u * u) / (2.0 * sigma * sigma)).exp()
}

fn smoothing_taps(sigma: f64, r: i64) -> Vec<f64> {
    let raw: Vec<f64> = (-r..=r).map(|u| gauss(u as f64, sigma)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

fn derivative_taps(sigma: f64, r: i64) -> Vec<f64> {
    let raw: Vec<f64> = (-r..=r)
        .map(|u| u as f64 * gauss(u as f64, sigma))
        .collect();
    let m: f64 = (-r..=r)
        .map(|u| u as f64 * u as f64 * gauss(u as f64, sigma))
        .sum();
    raw.iter().map(|v| v / m).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    let m = s / n;
    let mut v = 0.0;
    for x in xs {
        v += (x - m) * (x - m);
    }
    (m, (v / n).sqrt())
}

/// One frame as interleaved RGB rows, `px[y][x] = [r, g, b]`.
pub type Frame = Vec<Vec<[u8; 3]>>;

fn luma_plane(f: &Frame) -> Vec<Vec<f64>> {
    f.iter()
        .map(|row| {
            row.iter()
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect()
        })
        .collect()
}

/// Mean |response| of the full 2-D oriented kernel over the valid region.
/// `vertical` rotates the kernel by 90 degrees.
fn oriented_energy(y: &[Vec<f64>], sigma: f64, elong: f64, vertical: bool) -> f64 {
    let h = y.len() as i64;
    let w = y[0].len() as i64;
    let r = (3.0 * sigma * elong).ceil() as i64;
    let d = derivative_taps(sigma, r);
    let g = smoothing_taps(sigma * elong, r);
    let side = (2 * r + 1) as usize;
    let mut kernel = vec![vec![0.0; side]; side];
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            // row index i runs along y, column j along x
            *k = if vertical { g[j] * d[i] } else { d[j] * g[i] };
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let mut acc = 0.0;
            for i in 0..side {
                for j in 0..side {
                    acc += kernel[i][j] * y[(cy - r) as usize + i][(cx - r) as usize + j];
                }
            }
            total += acc.abs();
            count += 1;
        }
    }
    total / count as f64
}

/// The 26-entry descriptor of a clip, computed pixel by pixel.
pub fn reference_features(frames: &[Frame]) -> [f64; 26] {
    let scales = [1.0, std::f64::consts::SQRT_2, 2.0];
    let mut per_frame: Vec<[f64; 10]> = Vec::new();
    for f in frames {
        let n = (f.len() * f[0].len()) as f64;
        let mut lum = 0.0;
        let mut rg = Vec::new();
        let mut yb = Vec::new();
        for row in f {
            for p in row {
                let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
                lum += r + g + b;
                rg.push(r - g);
                yb.push((r + g) / 2.0 - b);
            }
        }
        let (m_rg, s_rg) = mean_std(&rg);
        let (m_yb, s_yb) = mean_std(&yb);
        let color = (s_rg * s_rg + s_yb * s_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt();
        let y = luma_plane(f);
        let flat: Vec<f64> = y.iter().flatten().copied().collect();
        let (my, sy) = mean_std(&flat);
        let contrast = if my == 0.0 { 0.0 } else { sy / my };
        let mut row = [0.0; 10];
        row[0] = lum / n;
        row[1] = color;
        row[2] = contrast;
        row[3] = 0.0;
        for (s, &sigma) in scales.iter().enumerate() {
            row[4 + 2 * s] = oriented_energy(&y, sigma, 3.0, false);
            row[5 + 2 * s] = oriented_energy(&y, sigma, 3.0, true);
        }
        per_frame.push(row);
    }

    let mut out = [0.0; 26];
    for k in 0..10 {
        let series: Vec<f64> = per_frame.iter().map(|r| r[k]).collect();
        let (m, s) = mean_std(&series);
        out[2 * k] = m;
        out[2 * k + 1] = s;
    }

    let planes: Vec<Vec<Vec<f64>>> = frames.iter().map(luma_plane).collect();
    let t_len = planes.len() as i64;
    let (h, w) = (planes[0].len(), planes[0][0].len());
    for (s, &sigma) in [1.0f64, 2.0, 4.0].iter().enumerate() {
        let r = (3.0 * sigma).ceil() as i64;
        let d = derivative_taps(sigma, r);
        let mut avg = Vec::with_capacity(w * h);
        for yy in 0..h {
            for xx in 0..w {
                let mut total = 0.0;
                for t in r..t_len - r {
                    let mut acc = 0.0;
                    for u in -r..=r {
                        acc += d[(u + r) as usize] * planes[(t + u) as usize][yy][xx];
                    }
                    total += acc.abs();
                }
                avg.push(total / (t_len - 2 * r) as f64);
            }
        }
        let (m, sd) = mean_std(&avg);
        out[20 + 2 * s] = m;
        out[21 + 2 * s] = sd;
    }
    out
}

// ---------- sampler ----------

fn type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub struct BruteForceProblem<'a> {
    pub ids: &'a [String],
    pub groups: &'a [String],
    pub values: &'a [Vec<f64>],
    pub reference: &'a [Vec<f64>],
    pub size: usize,
    pub bins: usize,
    pub quotas: &'a BTreeMap<String, (usize, usize)>,
}

/// Enumerates every subset in lexicographic id order and keeps the first
/// one whose objective beats the incumbent by more than `eps`.
/// Returns the selected ids (sorted) and the objective.
pub fn brute_force_select(p: &BruteForceProblem, eps: f64) -> Option<(Vec<String>, f64)> {
    let n_feat = p.reference[0].len();
    // per feature: cut points and target proportions, or None if constant
    let mut tables: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();
    for f in 0..n_feat {
        let mut col: Vec<f64> = p.reference.iter().map(|r| r[f]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if col[0] == col[col.len() - 1] {
            tables.push(None);
            continue;
        }
        let cuts: Vec<f64> = (1..p.bins)
            .map(|b| type7(&col, b as f64 / p.bins as f64))
            .collect();
        let mut target = vec![0.0; p.bins];
        for v in &col {
            target[cuts.iter().filter(|c| **c < *v).count()] += 1.0 / col.len() as f64;
        }
        tables.push(Some((cuts, target)));
    }
    let active = tables.iter().filter(|t| t.is_some()).count();

    let mut order: Vec<usize> = (0..p.ids.len()).collect();
    order.sort_by(|&a, &b| p.ids[a].cmp(&p.ids[b]));

    let objective = |sel: &[usize]| -> f64 {
        if active == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (f, t) in tables.iter().enumerate() {
            let Some((cuts, target)) = t else { continue };
            let mut hist = vec![0.0; p.bins];
            for &i in sel {
                let v = p.values[i][f];
                hist[cuts.iter().filter(|c| **c < v).count()] += 1.0;
            }
            for b in 0..p.bins {
                total += (hist[b] / sel.len() as f64 - target[b]).abs();
            }
        }
        total / active as f64
    };
    let quota_ok = |sel: &[usize]| -> bool {
        p.quotas.iter().all(|(g, &(lo, hi))| {
            let c = sel.iter().filter(|&&i| &p.groups[i] == g).count();
            lo <= c && c <= hi
        })
    };

    let m = order.len();
    let k = p.size;
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let sel: Vec<usize> = idx.iter().map(|&i| order[i]).collect();
        if quota_ok(&sel) {
            let j = objective(&sel);
            if best.as_ref().is_none_or(|(_, b)| j < b - eps) {
                best = Some((sel, j));
            }
        }
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best.map(|(sel, j)| {
                    let mut ids: Vec<String> = sel.iter().map(|&i| p.ids[i].clone()).collect();
                    ids.sort();
                    (ids, j)
                });
            }
            i -= 1;
            if idx[i] < m - k + i {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

// ---------- BT.500 ----------

/// `ratings[subject] = [(content, score)]`. Returns rejected subjects.
pub fn annex1_reject(ratings: &BTreeMap<String, Vec<(String, f64)>>) -> Vec<String> {
    let mut per_stimulus: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for list in ratings.values() {
        for (c, x) in list {
            per_stimulus.entry(c).or_default().push(*x);
        }
    }
    let mut band: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (c, xs) in &per_stimulus {
        let n = xs.len();
        if n < 2 {
            continue;
        }
        let mut sum = 0.0;
        for x in xs {
            sum += x;
        }
        let mu = sum / n as f64;
        let (mut ss, mut s4) = (0.0, 0.0);
        for x in xs {
            ss += (x - mu).powi(2);
            s4 += (x - mu).powi(4);
        }
        if ss == 0.0 {
            continue;
        }
        let sd = (ss / (n - 1) as f64).sqrt();
        let m2 = ss / n as f64;
        let beta2 = (s4 / n as f64) / (m2 * m2);
        let k = if n >= 4 && (2.0..=4.0).contains(&beta2) {
            2.0
        } else {
            20f64.sqrt()
        };
        band.insert(c, (mu - k * sd, mu + k * sd));
    }
    let mut out = Vec::new();
    for (subject, list) in ratings {
        let (mut p, mut q) = (0.0, 0.0);
        for (c, x) in list {
            if let Some(&(lo, hi)) = band.get(c.as_str()) {
                if *x > hi {
                    p += 1.0;
                }
                if *x < lo {
                    q += 1.0;
                }
            }
        }
        let j = list.len() as f64;
        if p + q > 0.0 && (p + q) / j > 0.05 && ((p - q) / (p + q)).abs() < 0.3 {
            out.push(subject.clone());
        }
    }
    out
}

// ---------- correlation ----------

pub fn pearson_definition(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        num += (x[i] - mx) * (y[i] - my);
        dx += (x[i] - mx) * (x[i] - mx);
        dy += (y[i] - my) * (y[i] - my);
    }
    num / (dx * dy).sqrt()
}

/// Average rank by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn rank_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let smaller = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_definition(x: &[f64], y: &[f64]) -> f64 {
    pearson_definition(&rank_by_counting(x), &rank_by_counting(y))
}
