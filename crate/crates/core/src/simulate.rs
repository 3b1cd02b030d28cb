//! Synthetic rating studies with ground truth.
//!
//! A world holds regular videos with a latent quality, a small pool of
//! golden videos whose reference score is their quality, and training clips.
//! Each simulated subject produces a full session log in the screening
//! format; the first showing of every test and golden video also lands in a
//! rating table in the cleaning format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleaning::{write_flags_csv, ContentKind, RatingRow, RatingTable, SubjectFlags};
use crate::screening::{
    write_golden_csv, write_session_log, Device, RatingRole, ScreeningConfig, SessionEvent,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad simulation spec: {0}")]
    BadSpec(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModel {
    pub n_videos: usize,
    pub quality_lo: f64,
    pub quality_hi: f64,
    /// Golden references are spread evenly over the quality range.
    pub n_golden_pool: usize,
    pub n_training: usize,
    pub n_test: usize,
    pub n_repeat: usize,
    pub n_golden: usize,
}

impl Default for WorldModel {
    fn default() -> Self {
        Self {
            n_videos: 1200,
            quality_lo: 20.0,
            quality_hi: 80.0,
            n_golden_pool: 8,
            n_training: 5,
            n_test: 90,
            n_repeat: 4,
            n_golden: 4,
        }
    }
}

impl WorldModel {
    pub fn n_regular(&self) -> usize {
        self.n_test.saturating_sub(self.n_repeat + self.n_golden)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::BadSpec(m.into()));
        if !(0.0 <= self.quality_lo
            && self.quality_lo <= self.quality_hi
            && self.quality_hi <= 100.0)
        {
            return bad("need 0 <= quality_lo <= quality_hi <= 100");
        }
        if self.n_repeat + self.n_golden >= self.n_test {
            return bad("n_repeat + n_golden must be below n_test");
        }
        if self.n_videos < self.n_regular() {
            return bad("n_videos must cover one session's regular videos");
        }
        if self.n_repeat > self.n_regular() {
            return bad("more repeats than regular videos");
        }
        if self.n_golden_pool < self.n_golden.max(2) {
            return bad("n_golden_pool must be at least max(n_golden, 2)");
        }
        if self.n_training == 0 {
            return bad("n_training must be positive");
        }
        Ok(())
    }

    /// The screening thresholds with this world's session shape.
    pub fn screening_config(&self, base: &ScreeningConfig) -> ScreeningConfig {
        ScreeningConfig {
            n_training: self.n_training,
            n_test: self.n_test,
            n_repeat: self.n_repeat,
            n_golden: self.n_golden,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    Sincere,
    SpammerUniform,
    SpammerConstant,
    SpammerNudge,
}

impl SubjectKind {
    pub fn is_spammer(self) -> bool {
        self != SubjectKind::Sincere
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubjectKind::Sincere => "sincere",
            SubjectKind::SpammerUniform => "spammer_uniform",
            SubjectKind::SpammerConstant => "spammer_constant",
            SubjectKind::SpammerNudge => "spammer_nudge",
        }
    }
}

/// Session-level misbehaviour injected on top of the scoring model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    None,
    /// Window below the resolution floor.
    EnvFail,
    /// Training clips take too long to load.
    SlowLoad,
    QuizFail,
    /// One training playback stalls for 3 s.
    TrainingDelay,
    /// One test playback finishes early (sped-up playback).
    Speedup,
    /// Leaves after the mid-task check without finishing.
    Dropout,
    NoLenses,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectGroup {
    pub count: usize,
    pub kind: SubjectKind,
    pub bias_mean: f64,
    pub bias_std: f64,
    pub noise_std: f64,
    pub stall_prob: f64,
    pub training_stall_prob: f64,
    pub fault: Fault,
}

impl Default for SubjectGroup {
    fn default() -> Self {
        Self {
            count: 1,
            kind: SubjectKind::Sincere,
            bias_mean: 0.0,
            bias_std: 5.0,
            noise_std: 10.0,
            stall_prob: 0.02,
            training_stall_prob: 0.0,
            fault: Fault::None,
        }
    }
}

impl SubjectGroup {
    pub fn new(count: usize, kind: SubjectKind) -> Self {
        Self {
            count,
            kind,
            ..Self::default()
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(prob(self.stall_prob) && prob(self.training_stall_prob)) {
            return Err(SimError::BadSpec("probabilities must lie in [0, 1]".into()));
        }
        if !(self.bias_std >= 0.0 && self.noise_std >= 0.0 && self.bias_mean.is_finite()) {
            return Err(SimError::BadSpec(
                "standard deviations must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub world: WorldModel,
    pub population: Vec<SubjectGroup>,
}

impl Default for SimSpec {
    /// 500 subjects, 10% of them spammers split over the three styles.
    fn default() -> Self {
        Self {
            world: WorldModel::default(),
            population: vec![
                SubjectGroup::new(450, SubjectKind::Sincere),
                SubjectGroup::new(17, SubjectKind::SpammerUniform),
                SubjectGroup::new(17, SubjectKind::SpammerConstant),
                SubjectGroup::new(16, SubjectKind::SpammerNudge),
            ],
        }
    }
}

impl SimSpec {
    pub fn n_subjects(&self) -> usize {
        self.population.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.world.validate()?;
        if self.n_subjects() == 0 {
            return Err(SimError::BadSpec("population is empty".into()));
        }
        self.population.iter().try_for_each(SubjectGroup::validate)
    }

    /// A small study with one group per screening outcome.
    pub fn reason_coverage() -> Self {
        let g = SubjectGroup::new;
        Self {
            world: WorldModel {
                n_videos: 120,
                ..WorldModel::default()
            },
            population: vec![
                g(3, SubjectKind::Sincere),
                g(2, SubjectKind::Sincere).with_fault(Fault::EnvFail),
                g(2, SubjectKind::Sincere).with_fault(Fault::SlowLoad),
                g(2, SubjectKind::Sincere).with_fault(Fault::QuizFail),
                g(2, SubjectKind::Sincere).with_fault(Fault::TrainingDelay),
                g(2, SubjectKind::Sincere).with_fault(Fault::Speedup),
                g(2, SubjectKind::Sincere).with_fault(Fault::Dropout),
                g(2, SubjectKind::Sincere).with_fault(Fault::NoLenses),
                g(2, SubjectKind::Sincere).with_fault(Fault::Blocked),
                SubjectGroup {
                    stall_prob: 0.9,
                    ..g(2, SubjectKind::Sincere)
                },
                g(2, SubjectKind::SpammerConstant),
                g(2, SubjectKind::SpammerNudge),
                // erratic but unbiased: repeats disagree
                SubjectGroup {
                    noise_std: 40.0,
                    ..g(2, SubjectKind::Sincere)
                },
                // consistent but shifted: golden scores disagree
                SubjectGroup {
                    bias_mean: 35.0,
                    bias_std: 0.0,
                    noise_std: 3.0,
                    ..g(2, SubjectKind::Sincere)
                },
                g(2, SubjectKind::SpammerUniform),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLabel {
    pub subject_id: String,
    pub kind: SubjectKind,
    pub fault: Fault,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub logs: Vec<(String, Vec<SessionEvent>)>,
    pub table: RatingTable,
    pub flags: BTreeMap<String, SubjectFlags>,
    pub golden: BTreeMap<String, f64>,
    pub quality: BTreeMap<String, f64>,
    pub labels: Vec<SubjectLabel>,
}

struct World {
    videos: Vec<(String, f64)>,
    golden: Vec<(String, f64)>,
    training: Vec<String>,
}

fn build_world(w: &WorldModel, rng: &mut ChaCha8Rng) -> World {
    let width = w.n_videos.saturating_sub(1).to_string().len().max(4);
    let videos = (0..w.n_videos)
        .map(|i| {
            (
                format!("vid{i:0width$}"),
                rng.random_range(w.quality_lo..=w.quality_hi),
            )
        })
        .collect();
    let step = (w.quality_hi - w.quality_lo) / (w.n_golden_pool - 1) as f64;
    let golden = (0..w.n_golden_pool)
        .map(|i| (format!("gold{i}"), w.quality_lo + step * i as f64))
        .collect();
    let training = (0..w.n_training).map(|i| format!("train{i}")).collect();
    World {
        videos,
        golden,
        training,
    }
}

struct Subject<'a> {
    id: String,
    group: &'a SubjectGroup,
    regular: Vec<usize>,
}

fn score_value(x: f64) -> f64 {
    x.round().clamp(0.0, 100.0)
}

fn simulate_subject(
    s: &Subject<'_>,
    world: &World,
    w: &WorldModel,
    mut rng: ChaCha8Rng,
) -> (
    Vec<SessionEvent>,
    Vec<RatingRow>,
    SubjectFlags,
    SubjectLabel,
) {
    let g = s.group;
    let bias = if g.bias_std > 0.0 {
        Normal::new(g.bias_mean, g.bias_std)
            .unwrap()
            .sample(&mut rng)
    } else {
        g.bias_mean
    };
    let noise = Normal::new(0.0, g.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let constant = score_value(rng.random_range(20.0..80.0));

    // returns (score, slider travel)
    let rate = |q: f64, rng: &mut ChaCha8Rng| -> (f64, f64) {
        let start: f64 = rng.random_range(0.0..100.0);
        let score = match g.kind {
            SubjectKind::Sincere => {
                let e = if g.noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                score_value(q + bias + e)
            }
            SubjectKind::SpammerUniform => score_value(rng.random_range(0.0..=100.0)),
            SubjectKind::SpammerConstant => constant,
            SubjectKind::SpammerNudge => score_value(start + rng.random_range(-4.0..=4.0)),
        };
        (score, (score - start).abs())
    };
    let delay = |stall: bool, rng: &mut ChaCha8Rng| -> f64 {
        if stall {
            rng.random_range(2.5..8.0)
        } else {
            rng.random_range(0.0..0.3)
        }
    };

    let mut ev = Vec::new();
    let (window_w, window_h) = if g.fault == Fault::EnvFail {
        (1280, 600)
    } else {
        (1920, 1080)
    };
    ev.push(SessionEvent::EnvReport {
        window_w,
        window_h,
        zoom: 100.0,
        browser: ["chrome", "firefox", "safari", "edge"]
            .choose(&mut rng)
            .unwrap()
            .to_string(),
        device: Device::Desktop,
    });
    for t in &world.training {
        let load_time = if g.fault == Fault::SlowLoad {
            rng.random_range(5.0..7.0)
        } else {
            rng.random_range(0.2..2.0)
        };
        ev.push(SessionEvent::VideoLoad {
            video_id: t.clone(),
            load_time,
        });
    }
    let correct = if g.fault == Fault::QuizFail {
        3
    } else {
        rng.random_range(5..=6)
    };
    ev.push(SessionEvent::QuizResult { correct });
    for (i, t) in world.training.iter().enumerate() {
        let stalled = rng.random_bool(g.training_stall_prob);
        let d = if g.fault == Fault::TrainingDelay && i == 0 {
            3.0
        } else {
            delay(stalled, &mut rng)
        };
        ev.push(SessionEvent::Playback {
            video_id: t.clone(),
            delay: d,
        });
        let q = rng.random_range(w.quality_lo..=w.quality_hi);
        let (score, slider_travel) = rate(q, &mut rng);
        ev.push(SessionEvent::Rating {
            video_id: t.clone(),
            role: RatingRole::Training,
            score,
            slider_travel,
        });
    }

    // test order: regular and golden shuffled, repeats after their first showing
    #[derive(Clone, Copy)]
    enum Slot {
        Regular(usize),
        Golden(usize),
        Repeat(usize),
    }
    let golden_pick: Vec<usize> =
        rand::seq::index::sample(&mut rng, world.golden.len(), w.n_golden).into_vec();
    let mut order: Vec<Slot> = s
        .regular
        .iter()
        .map(|&v| Slot::Regular(v))
        .chain(golden_pick.iter().map(|&gi| Slot::Golden(gi)))
        .collect();
    order.shuffle(&mut rng);
    let repeats: Vec<usize> = s
        .regular
        .choose_multiple(&mut rng, w.n_repeat)
        .copied()
        .collect();
    for r in repeats {
        let first = order
            .iter()
            .position(|sl| matches!(sl, Slot::Regular(v) if *v == r))
            .unwrap();
        let at = rng.random_range(first + 1..=order.len());
        order.insert(at, Slot::Repeat(r));
    }

    let n_shown = if g.fault == Fault::Dropout {
        rng.random_range(w.n_test / 2 + 1..w.n_test)
    } else {
        w.n_test
    };
    let speedup_at = rng.random_range(0..w.n_test);
    let mut stalled = 0usize;
    let mut rows = Vec::new();
    for (k, slot) in order.iter().take(n_shown).enumerate() {
        let (video_id, q, role) = match *slot {
            Slot::Regular(v) => (&world.videos[v].0, world.videos[v].1, RatingRole::Test),
            Slot::Repeat(v) => (&world.videos[v].0, world.videos[v].1, RatingRole::Repeat),
            Slot::Golden(gi) => (&world.golden[gi].0, world.golden[gi].1, RatingRole::Golden),
        };
        let is_stall = rng.random_bool(g.stall_prob);
        let d = if g.fault == Fault::Speedup && k == speedup_at {
            -rng.random_range(0.5..2.0)
        } else {
            delay(is_stall, &mut rng)
        };
        stalled += usize::from(d > 2.0);
        ev.push(SessionEvent::Playback {
            video_id: video_id.clone(),
            delay: d,
        });
        let (score, slider_travel) = rate(q, &mut rng);
        ev.push(SessionEvent::Rating {
            video_id: video_id.clone(),
            role,
            score,
            slider_travel,
        });
        if role != RatingRole::Repeat {
            rows.push(RatingRow {
                subject_id: s.id.clone(),
                content_id: video_id.clone(),
                content_kind: ContentKind::Video,
                score,
            });
        }
    }
    let wore_lenses = g.fault != Fault::NoLenses;
    if n_shown == w.n_test {
        ev.push(SessionEvent::Survey {
            wore_prescribed_lenses: wore_lenses,
            age_group: ["18-25", "26-35", "36-50", "50+"]
                .choose(&mut rng)
                .unwrap()
                .to_string(),
            gender: ["female", "male", "other"]
                .choose(&mut rng)
                .unwrap()
                .to_string(),
            viewing_distance: ["<15in", "15-30in", ">30in"]
                .choose(&mut rng)
                .unwrap()
                .to_string(),
        });
    }
    let flags = SubjectFlags {
        blocked: g.fault == Fault::Blocked,
        stall_fraction: if n_shown == 0 {
            0.0
        } else {
            stalled as f64 / n_shown as f64
        },
        wore_lenses,
    };
    let label = SubjectLabel {
        subject_id: s.id.clone(),
        kind: g.kind,
        fault: g.fault,
        bias,
    };
    (ev, rows, flags, label)
}

/// Deterministic for a given spec and seed. Subject `i` draws from stream
/// `i + 1` of the seeded generator; the world and the video assignment use
/// stream 0.
pub fn simulate_study(spec: &SimSpec, seed: u64) -> Result<SimOutput, SimError> {
    spec.validate()?;
    let w = &spec.world;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(w, &mut rng);

    // consecutive windows over one cyclic permutation keep per-video counts balanced
    let mut perm: Vec<usize> = (0..w.n_videos).collect();
    perm.shuffle(&mut rng);
    let n_reg = w.n_regular();
    let width = spec.n_subjects().saturating_sub(1).to_string().len().max(4);
    let subjects: Vec<Subject<'_>> = spec
        .population
        .iter()
        .flat_map(|g| std::iter::repeat_n(g, g.count))
        .enumerate()
        .map(|(i, group)| Subject {
            id: format!("subj{i:0width$}"),
            group,
            regular: (0..n_reg)
                .map(|k| perm[(i * n_reg + k) % w.n_videos])
                .collect(),
        })
        .collect();

    let results: Vec<_> = subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            simulate_subject(s, &world, w, r)
        })
        .collect();

    let mut out = SimOutput {
        logs: Vec::with_capacity(results.len()),
        table: RatingTable::default(),
        flags: BTreeMap::new(),
        golden: world.golden.iter().cloned().collect(),
        quality: world.videos.iter().cloned().collect(),
        labels: Vec::with_capacity(results.len()),
    };
    let mut rows = Vec::new();
    for (s, (ev, r, f, label)) in subjects.iter().zip(results) {
        out.logs.push((s.id.clone(), ev));
        rows.extend(r);
        out.flags.insert(s.id.clone(), f);
        out.labels.push(label);
    }
    out.table = RatingTable::new(rows).map_err(|e| SimError::BadSpec(e.to_string()))?;
    Ok(out)
}

impl SimOutput {
    pub fn spammer_ids(&self) -> BTreeSet<&str> {
        self.labels
            .iter()
            .filter(|l| l.kind.is_spammer())
            .map(|l| l.subject_id.as_str())
            .collect()
    }

    /// Writes `logs/<subject>.jsonl`, `ratings.csv`, `flags.csv`,
    /// `golden.csv`, `truth.csv` and `quality.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| SimError::Io { path, source }
        };
        let create = |p: &Path| fs::File::create(p).map(BufWriter::new).map_err(io(p));
        let csv_err = |p: &Path| {
            let path = p.display().to_string();
            move |source| SimError::Csv { path, source }
        };
        let logs = dir.join("logs");
        fs::create_dir_all(&logs).map_err(io(&logs))?;
        for (id, ev) in &self.logs {
            let p = logs.join(format!("{id}.jsonl"));
            write_session_log(create(&p)?, ev).map_err(io(&p))?;
        }
        let p = dir.join("ratings.csv");
        self.table.write_csv(create(&p)?).map_err(csv_err(&p))?;
        let p = dir.join("flags.csv");
        write_flags_csv(create(&p)?, &self.flags).map_err(csv_err(&p))?;
        let p = dir.join("golden.csv");
        write_golden_csv(create(&p)?, &self.golden).map_err(csv_err(&p))?;

        let p = dir.join("truth.csv");
        let mut wtr = csv::Writer::from_writer(create(&p)?);
        for l in &self.labels {
            wtr.serialize(l).map_err(csv_err(&p))?;
        }
        wtr.flush().map_err(io(&p))?;

        let p = dir.join("quality.csv");
        let mut wtr = csv::Writer::from_writer(create(&p)?);
        wtr.write_record(["content_id", "quality"])
            .map_err(csv_err(&p))?;
        for (id, q) in &self.quality {
            wtr.write_record([id.clone(), q.to_string()])
                .map_err(csv_err(&p))?;
        }
        wtr.flush().map_err(io(&p))?;
        Ok(())
    }
}
