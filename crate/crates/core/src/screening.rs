//! Offline replay of a rating session through the study's gating checks.
//!
//! A session moves through `Instructions -> Training -> Test -> Survey`.
//! Environment and quiz checks gate the instructions, playback delays gate
//! training, a mid-task audit runs after half of the test ratings, and the
//! repeated and golden videos are checked once the session is complete.
//! Rejection is absorbing: later events are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{mean, population_std};

#[derive(Debug, Error, PartialEq)]
pub enum ScreenError {
    #[error("event {index} ({event}) not allowed in phase {phase:?}")]
    PhaseOrder {
        index: usize,
        event: &'static str,
        phase: Phase,
    },
    #[error("event {index}: {message}")]
    InvalidEvent { index: usize, message: String },
    #[error("golden video {0:?} has no reference score")]
    MissingGolden(String),
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Mobile,
    Desktop,
    Laptop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingRole {
    Training,
    Test,
    Repeat,
    Golden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    EnvReport {
        window_w: u32,
        window_h: u32,
        zoom: f64,
        browser: String,
        device: Device,
    },
    VideoLoad {
        video_id: String,
        load_time: f64,
    },
    /// `delay` is measured playback time minus nominal duration, in seconds.
    Playback {
        video_id: String,
        delay: f64,
    },
    Rating {
        video_id: String,
        role: RatingRole,
        score: f64,
        slider_travel: f64,
    },
    QuizResult {
        correct: u8,
    },
    Survey {
        wore_prescribed_lenses: bool,
        age_group: String,
        gender: String,
        viewing_distance: String,
    },
}

impl SessionEvent {
    fn name(&self) -> &'static str {
        match self {
            SessionEvent::EnvReport { .. } => "env_report",
            SessionEvent::VideoLoad { .. } => "video_load",
            SessionEvent::Playback { .. } => "playback",
            SessionEvent::Rating { .. } => "rating",
            SessionEvent::QuizResult { .. } => "quiz_result",
            SessionEvent::Survey { .. } => "survey",
        }
    }

    fn validate(&self, index: usize) -> Result<(), ScreenError> {
        let bad = |message: String| Err(ScreenError::InvalidEvent { index, message });
        match self {
            SessionEvent::Rating {
                score,
                slider_travel,
                ..
            } => {
                if !(0.0..=100.0).contains(score) {
                    return bad(format!("score {score} outside [0, 100]"));
                }
                if !(0.0..=100.0).contains(slider_travel) {
                    return bad(format!("slider travel {slider_travel} outside [0, 100]"));
                }
            }
            SessionEvent::QuizResult { correct } if *correct > 6 => {
                return bad(format!("quiz score {correct} outside [0, 6]"));
            }
            SessionEvent::Playback { delay, .. } if !delay.is_finite() => {
                return bad("non-finite delay".into());
            }
            SessionEvent::VideoLoad { load_time, .. }
                if !(load_time.is_finite() && *load_time >= 0.0) =>
            {
                return bad(format!("load time {load_time} must be non-negative"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub min_short_side_mobile: u32,
    pub min_short_side_other: u32,
    pub required_zoom: f64,
    pub browser_allowlist: Vec<String>,
    /// Total training-video load time must stay below this (seconds).
    pub max_total_load: f64,
    pub quiz_pass: u8,
    pub per_video_delay_max: f64,
    pub training_delay_total_max: f64,
    pub mid_stall_fraction: f64,
    pub flat_score_min_std: f64,
    pub min_slider_travel: f64,
    pub repeat_mad_max: f64,
    pub golden_mad_max: f64,
    pub n_training: usize,
    pub n_test: usize,
    pub n_repeat: usize,
    pub n_golden: usize,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            min_short_side_mobile: 480,
            min_short_side_other: 720,
            required_zoom: 100.0,
            browser_allowlist: ["chrome", "firefox", "edge", "safari"]
                .map(String::from)
                .to_vec(),
            max_total_load: 20.0,
            quiz_pass: 5,
            per_video_delay_max: 2.0,
            training_delay_total_max: 5.0,
            mid_stall_fraction: 0.5,
            flat_score_min_std: 5.0,
            min_slider_travel: 5.0,
            repeat_mad_max: 20.0,
            golden_mad_max: 25.0,
            n_training: 5,
            n_test: 90,
            n_repeat: 4,
            n_golden: 4,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("max_total_load", self.max_total_load),
            ("per_video_delay_max", self.per_video_delay_max),
            ("training_delay_total_max", self.training_delay_total_max),
            ("mid_stall_fraction", self.mid_stall_fraction),
            ("flat_score_min_std", self.flat_score_min_std),
            ("min_slider_travel", self.min_slider_travel),
            ("repeat_mad_max", self.repeat_mad_max),
            ("golden_mad_max", self.golden_mad_max),
            ("required_zoom", self.required_zoom),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("screening.{name} must be positive"));
        }
        if self.n_training == 0 || self.n_test < 2 {
            return Err("screening needs n_training >= 1 and n_test >= 2".into());
        }
        if self.n_repeat + self.n_golden >= self.n_test {
            return Err("screening.n_repeat + n_golden must be below n_test".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Instructions,
    Training,
    Test,
    AwaitSurvey,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    None,
    EnvFail,
    QuizFail,
    TrainingDelay,
    NegativeDelay,
    MidStall,
    FlatScores,
    SliderNudge,
    RepeatInconsistent,
    GoldenInconsistent,
    Incomplete,
}

impl Reason {
    pub const REJECTIONS: [Reason; 10] = [
        Reason::EnvFail,
        Reason::QuizFail,
        Reason::TrainingDelay,
        Reason::NegativeDelay,
        Reason::MidStall,
        Reason::FlatScores,
        Reason::SliderNudge,
        Reason::RepeatInconsistent,
        Reason::GoldenInconsistent,
        Reason::Incomplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::None => "None",
            Reason::EnvFail => "EnvFail",
            Reason::QuizFail => "QuizFail",
            Reason::TrainingDelay => "TrainingDelay",
            Reason::NegativeDelay => "NegativeDelay",
            Reason::MidStall => "MidStall",
            Reason::FlatScores => "FlatScores",
            Reason::SliderNudge => "SliderNudge",
            Reason::RepeatInconsistent => "RepeatInconsistent",
            Reason::GoldenInconsistent => "GoldenInconsistent",
            Reason::Incomplete => "Incomplete",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(Reason::None)
            .chain(Reason::REJECTIONS)
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown reason {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rating {
    pub video_id: String,
    pub role: RatingRole,
    pub score: f64,
    pub slider_travel: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionState {
    phase: Option<Phase>,
    rejected: Option<Reason>,
    env_reported: bool,
    events_seen: usize,
    load_total: f64,
    training_ratings: usize,
    training_delay_total: f64,
    test_ratings: Vec<Rating>,
    test_playbacks: usize,
    stalled_playbacks: usize,
    wore_lenses: Option<bool>,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self) -> Phase {
        self.phase.unwrap_or(Phase::Instructions)
    }

    pub fn rejected(&self) -> Option<Reason> {
        self.rejected
    }

    pub fn test_ratings(&self) -> &[Rating] {
        &self.test_ratings
    }

    /// Fraction of test-phase playbacks that stalled.
    pub fn stall_fraction(&self) -> f64 {
        if self.test_playbacks == 0 {
            0.0
        } else {
            self.stalled_playbacks as f64 / self.test_playbacks as f64
        }
    }

    fn reject(mut self, reason: Reason) -> Self {
        self.rejected = Some(reason);
        self
    }

    fn mid_check(self, cfg: &ScreeningConfig) -> Self {
        if self.stall_fraction() > cfg.mid_stall_fraction {
            return self.reject(Reason::MidStall);
        }
        let scores: Vec<f64> = self.test_ratings.iter().map(|r| r.score).collect();
        if population_std(&scores) < cfg.flat_score_min_std {
            return self.reject(Reason::FlatScores);
        }
        let max_travel = self
            .test_ratings
            .iter()
            .map(|r| r.slider_travel)
            .fold(0.0, f64::max);
        if max_travel < cfg.min_slider_travel {
            return self.reject(Reason::SliderNudge);
        }
        self
    }
}

fn env_ok(cfg: &ScreeningConfig, w: u32, h: u32, zoom: f64, browser: &str, device: Device) -> bool {
    let short = w.min(h);
    let need = match device {
        Device::Mobile => cfg.min_short_side_mobile,
        Device::Desktop | Device::Laptop => cfg.min_short_side_other,
    };
    let browser_ok = cfg
        .browser_allowlist
        .iter()
        .any(|b| b.eq_ignore_ascii_case(browser.trim()));
    short >= need && (zoom - cfg.required_zoom).abs() < 1e-9 && browser_ok
}

/// Advances the session by one event.
pub fn apply_event(
    state: SessionState,
    event: &SessionEvent,
    cfg: &ScreeningConfig,
) -> Result<SessionState, ScreenError> {
    if state.rejected.is_some() {
        return Ok(state);
    }
    let index = state.events_seen;
    event.validate(index)?;
    let mut s = state;
    s.events_seen += 1;
    let phase = s.phase();
    let order = || ScreenError::PhaseOrder {
        index,
        event: event.name(),
        phase,
    };

    match (phase, event) {
        (
            Phase::Instructions,
            SessionEvent::EnvReport {
                window_w,
                window_h,
                zoom,
                browser,
                device,
            },
        ) => {
            s.env_reported = true;
            if !env_ok(cfg, *window_w, *window_h, *zoom, browser, *device) {
                return Ok(s.reject(Reason::EnvFail));
            }
        }
        (Phase::Instructions | Phase::Training, SessionEvent::VideoLoad { load_time, .. }) => {
            s.load_total += load_time;
            if s.load_total >= cfg.max_total_load {
                return Ok(s.reject(Reason::EnvFail));
            }
        }
        (Phase::Test | Phase::AwaitSurvey, SessionEvent::VideoLoad { .. }) => {}
        (Phase::Instructions, SessionEvent::QuizResult { correct }) => {
            if !s.env_reported {
                return Ok(s.reject(Reason::EnvFail));
            }
            if *correct < cfg.quiz_pass {
                return Ok(s.reject(Reason::QuizFail));
            }
            s.phase = Some(Phase::Training);
        }
        (Phase::Training, SessionEvent::Playback { delay, .. }) => {
            if *delay < 0.0 {
                return Ok(s.reject(Reason::NegativeDelay));
            }
            s.training_delay_total += delay;
            if *delay > cfg.per_video_delay_max
                || s.training_delay_total > cfg.training_delay_total_max
            {
                return Ok(s.reject(Reason::TrainingDelay));
            }
        }
        (Phase::Training, SessionEvent::Rating { role, .. }) => {
            if *role != RatingRole::Training {
                return Err(order());
            }
            s.training_ratings += 1;
            if s.training_ratings == cfg.n_training {
                s.phase = Some(Phase::Test);
            }
        }
        (Phase::Test, SessionEvent::Playback { delay, .. }) => {
            if *delay < 0.0 {
                return Ok(s.reject(Reason::NegativeDelay));
            }
            s.test_playbacks += 1;
            if *delay > cfg.per_video_delay_max {
                s.stalled_playbacks += 1;
            }
        }
        (
            Phase::Test,
            SessionEvent::Rating {
                video_id,
                role,
                score,
                slider_travel,
            },
        ) => {
            if *role == RatingRole::Training {
                return Err(order());
            }
            s.test_ratings.push(Rating {
                video_id: video_id.clone(),
                role: *role,
                score: *score,
                slider_travel: *slider_travel,
            });
            let n = s.test_ratings.len();
            if n == cfg.n_test / 2 {
                s = s.mid_check(cfg);
                if s.rejected.is_some() {
                    return Ok(s);
                }
            }
            if n == cfg.n_test {
                s.phase = Some(Phase::AwaitSurvey);
            }
        }
        (
            Phase::AwaitSurvey,
            SessionEvent::Survey {
                wore_prescribed_lenses,
                ..
            },
        ) => {
            s.wore_lenses = Some(*wore_prescribed_lenses);
            s.phase = Some(Phase::Done);
        }
        _ => return Err(order()),
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictState {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionVerdict {
    pub subject_id: String,
    pub state: VerdictState,
    pub reason: Reason,
    pub ratings: Vec<Rating>,
    pub stall_fraction: f64,
    pub wore_lenses: Option<bool>,
}

impl SessionVerdict {
    pub fn accepted(&self) -> bool {
        self.state == VerdictState::Accepted
    }
}

/// Post-task checks on a replayed session.
///
/// A session that never reached the survey, or lacks the configured number
/// of repeated pairs or golden ratings, is rejected as `Incomplete`.
pub fn finalize_session(
    subject_id: &str,
    state: &SessionState,
    cfg: &ScreeningConfig,
    golden: &BTreeMap<String, f64>,
) -> Result<SessionVerdict, ScreenError> {
    let verdict = |reason: Reason| SessionVerdict {
        subject_id: subject_id.to_string(),
        state: if reason == Reason::None {
            VerdictState::Accepted
        } else {
            VerdictState::Rejected
        },
        reason,
        ratings: state.test_ratings.clone(),
        stall_fraction: state.stall_fraction(),
        wore_lenses: state.wore_lenses,
    };
    if let Some(reason) = state.rejected {
        return Ok(verdict(reason));
    }
    if state.phase() != Phase::Done || state.test_ratings.len() < cfg.n_test {
        return Ok(verdict(Reason::Incomplete));
    }

    let ratings = &state.test_ratings;
    let mut repeat_diffs = Vec::new();
    for (i, r) in ratings
        .iter()
        .enumerate()
        .filter(|(_, r)| r.role == RatingRole::Repeat)
    {
        if let Some(first) = ratings[..i]
            .iter()
            .find(|f| f.video_id == r.video_id && f.role == RatingRole::Test)
        {
            repeat_diffs.push((first.score - r.score).abs());
        }
    }
    let golden_ratings: Vec<&Rating> = ratings
        .iter()
        .filter(|r| r.role == RatingRole::Golden)
        .collect();
    if repeat_diffs.len() < cfg.n_repeat || golden_ratings.len() < cfg.n_golden {
        return Ok(verdict(Reason::Incomplete));
    }
    let mut golden_diffs = Vec::with_capacity(golden_ratings.len());
    for r in golden_ratings {
        let reference = golden
            .get(&r.video_id)
            .ok_or_else(|| ScreenError::MissingGolden(r.video_id.clone()))?;
        golden_diffs.push((r.score - reference).abs());
    }
    if !repeat_diffs.is_empty() && mean(&repeat_diffs) > cfg.repeat_mad_max {
        return Ok(verdict(Reason::RepeatInconsistent));
    }
    if !golden_diffs.is_empty() && mean(&golden_diffs) > cfg.golden_mad_max {
        return Ok(verdict(Reason::GoldenInconsistent));
    }
    Ok(verdict(Reason::None))
}

/// Folds a whole event log and finalizes it.
pub fn screen_session(
    subject_id: &str,
    events: &[SessionEvent],
    cfg: &ScreeningConfig,
    golden: &BTreeMap<String, f64>,
) -> Result<SessionVerdict, ScreenError> {
    let state = events
        .iter()
        .try_fold(SessionState::new(), |s, e| apply_event(s, e, cfg))?;
    finalize_session(subject_id, &state, cfg, golden)
}

pub fn read_session_log<R: BufRead>(input: R) -> Result<Vec<SessionEvent>, ScreenError> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ScreenError::Parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line)
                .map_err(|e| ScreenError::Parse(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(events)
}

pub fn write_session_log<W: Write>(mut out: W, events: &[SessionEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads every `*.jsonl` file in `dir`, keyed by file stem, in name order.
pub fn read_session_dir(dir: &Path) -> Result<Vec<(String, Vec<SessionEvent>)>, ScreenError> {
    let io = |e: std::io::Error| ScreenError::Parse(format!("{}: {e}", dir.display()));
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let file = std::fs::File::open(&p).map_err(io)?;
            let events = read_session_log(std::io::BufReader::new(file))
                .map_err(|e| ScreenError::Parse(format!("{}: {e}", p.display())))?;
            Ok((id, events))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldenRow {
    video_id: String,
    mos: f64,
}

pub fn read_golden_csv<R: Read>(input: R) -> Result<BTreeMap<String, f64>, ScreenError> {
    csv::Reader::from_reader(input)
        .deserialize::<GoldenRow>()
        .map(|r| {
            r.map(|r| (r.video_id, r.mos))
                .map_err(|e| ScreenError::Parse(e.to_string()))
        })
        .collect()
}

pub fn write_golden_csv<W: Write>(out: W, golden: &BTreeMap<String, f64>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (video_id, &mos) in golden {
        w.serialize(GoldenRow {
            video_id: video_id.clone(),
            mos,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub subject_id: String,
    pub state: VerdictState,
    pub reason: String,
}

pub fn write_verdicts_csv<W: Write>(out: W, verdicts: &[SessionVerdict]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for v in verdicts {
        w.serialize(VerdictRow {
            subject_id: v.subject_id.clone(),
            state: v.state,
            reason: v.reason.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Verdict rows keyed by subject.
pub fn read_verdicts_csv<R: Read>(
    input: R,
) -> Result<BTreeMap<String, (VerdictState, Reason)>, ScreenError> {
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<VerdictRow>() {
        let row = row.map_err(|e| ScreenError::Parse(e.to_string()))?;
        let reason = row.reason.parse().map_err(ScreenError::Parse)?;
        out.insert(row.subject_id, (row.state, reason));
    }
    Ok(out)
}
