//! Command-line front end.
//!
//! Domain failures exit with status 1 and print one `error[CODE]: message`
//! line on stderr; usage errors exit with status 2.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::cleaning::{self, CleanError, ContentKind, RatingTable};
use crate::config::{ConfigError, PipelineConfig};
use crate::features::{self, FaceSidecar, FeatureError};
use crate::media_io::{self, InputFormat, MediaError};
use crate::patchgen::{self, PatchError};
use crate::sampler::{
    self, Candidate, FeatureTable, SamplerError, SelectionProblem, SolveOptions, SolverMode,
};
use crate::screening::{self, ScreenError};
use crate::simulate::{self, SimError, SimSpec};

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self::new("IO", format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => "IO",
            ConfigError::Parse(_) | ConfigError::Invalid(_) => "CONFIG",
        };
        Self::new(code, e.to_string())
    }
}

impl From<MediaError> for CliError {
    fn from(e: MediaError) -> Self {
        let code = match e {
            MediaError::Io { .. } => "IO",
            MediaError::Format(_) => "MEDIA_FORMAT",
            MediaError::Empty(_) => "MEDIA_EMPTY",
        };
        Self::new(code, e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        let code = match e {
            FeatureError::FrameTooSmall { .. } => "FRAME_TOO_SMALL",
            FeatureError::TooFewFrames { .. } => "TOO_FEW_FRAMES",
            FeatureError::SidecarMismatch(_) => "SIDECAR_MISMATCH",
            FeatureError::BadConfig(_) => "CONFIG",
        };
        Self::new(code, e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        let code = match e {
            SamplerError::InvalidProblem(_) => "INVALID_PROBLEM",
            SamplerError::TooFewReference { .. } => "TOO_FEW_REFERENCE",
            SamplerError::InfeasibleQuotas(_) => "INFEASIBLE_QUOTAS",
            SamplerError::ExactTooLarge { .. } => "EXACT_TOO_LARGE",
            SamplerError::EmptySelection => "EMPTY_SELECTION",
        };
        Self::new(code, e.to_string())
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        let code = match e {
            PatchError::BadMeta { .. } => "BAD_META",
            PatchError::InfeasibleGeometry { .. } => "INFEASIBLE_GEOMETRY",
            PatchError::BadConfig(_) => "CONFIG",
        };
        Self::new(code, e.to_string())
    }
}

impl From<ScreenError> for CliError {
    fn from(e: ScreenError) -> Self {
        let code = match e {
            ScreenError::PhaseOrder { .. } => "PHASE_ORDER",
            ScreenError::InvalidEvent { .. } => "INVALID_EVENT",
            ScreenError::MissingGolden(_) => "MISSING_GOLDEN",
            ScreenError::Parse(_) => "PARSE",
        };
        Self::new(code, e.to_string())
    }
}

impl From<CleanError> for CliError {
    fn from(e: CleanError) -> Self {
        let code = match e {
            CleanError::TooFew { .. } | CleanError::ZeroVariance => "DEGENERATE_DATA",
            CleanError::EmptyTable => "EMPTY_TABLE",
            CleanError::DuplicateScore { .. } => "DUPLICATE_SCORE",
            CleanError::ScoreRange(_) => "SCORE_RANGE",
            CleanError::MissingFlags(_) => "MISSING_FLAGS",
            CleanError::MissingVerdict(_) => "MISSING_VERDICT",
            CleanError::Parse(_) => "PARSE",
        };
        Self::new(code, e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::EmptyTable => "EMPTY_TABLE",
            AnalysisError::TooFewSubjects(_) => "TOO_FEW_SUBJECTS",
            AnalysisError::NoGoldenData => "NO_GOLDEN_DATA",
            AnalysisError::NoPairs => "NO_PAIRS",
            _ => "DEGENERATE_DATA",
        };
        Self::new(code, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::BadSpec(_) => "BAD_SPEC",
            SimError::Io { .. } | SimError::Csv { .. } => "IO",
        };
        Self::new(code, e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "vqforge",
    version,
    about = "Video quality dataset construction and subjective-study analysis"
)]
pub struct Cli {
    /// Pipeline configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the 26 holistic features for each input video.
    ExtractFeatures {
        #[arg(long, value_enum)]
        format: InputFormat,
        /// Directory holding `<video_id>.json` face-count sidecars.
        #[arg(long)]
        faces: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Pick a subset whose feature histograms match a reference set.
    Sample {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV with `video_id,group` rows for quota constraints.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<SolverMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Place sv/tv/stv patches for every video in a metadata CSV.
    GenPatches {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay session logs and write accept/reject verdicts.
    Screen {
        /// Directory of `<subject_id>.jsonl` logs.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        /// Also write subject flags derived from the sessions.
        #[arg(long)]
        flags_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the four cleaning stages to a ratings table.
    Clean {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        flags: PathBuf,
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MOS, split-half consistency, golden agreement and histograms.
    Analyze {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        golden: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for mos.csv, consistency.json, histogram.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic study with ground truth.
    Simulate {
        /// Simulation spec (TOML); overrides the config's [simulate] section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full default configuration.
    Defaults {
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

fn is_stdout(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn create_out(p: &Path) -> Result<Box<dyn Write>> {
    if is_stdout(p) {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = File::create(p).map_err(|e| CliError::io(p, e))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn open_in(p: &Path) -> Result<BufReader<File>> {
    File::open(p)
        .map(BufReader::new)
        .map_err(|e| CliError::io(p, e))
}

fn out_dir(p: &Path) -> Result<&Path> {
    if is_stdout(p) {
        return Err(CliError::new(
            "INVALID_ARGUMENT",
            "this command writes several files; --out must be a directory",
        ));
    }
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
    Ok(p)
}

fn csv_err(p: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::new("IO", format!("{}: {e}", p.display()))
}

fn parse_err(p: &Path) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::new("PARSE", format!("{}: {e}", p.display()))
}

fn write_json(p: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create_out(p)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::new("IO", e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(p, e))
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("VQFORGE_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message.replace('\n', " "));
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let pool = match cli.jobs {
        Some(0) => return Err(CliError::new("INVALID_ARGUMENT", "--jobs must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::new("INTERNAL", e.to_string()))?;
    pool.install(|| dispatch(cli.command, &cfg))
}

fn dispatch(cmd: Command, cfg: &PipelineConfig) -> Result<()> {
    match cmd {
        Command::ExtractFeatures {
            format,
            faces,
            out,
            inputs,
        } => extract(cfg, format, faces.as_deref(), &inputs, &out),
        Command::Sample {
            candidates,
            reference,
            groups,
            size,
            bins,
            mode,
            seed,
            report,
            out,
        } => {
            let mut s = cfg.sampler.clone();
            s.target_size = size.unwrap_or(s.target_size);
            s.bins_per_feature = bins.unwrap_or(s.bins_per_feature);
            s.mode = mode.unwrap_or(s.mode);
            s.seed = seed.unwrap_or(s.seed);
            sample(
                &s,
                &candidates,
                &reference,
                groups.as_deref(),
                report.as_deref(),
                &out,
            )
        }
        Command::GenPatches { meta, seed, out } => {
            let mut p = cfg.patches.clone();
            p.seed = seed.unwrap_or(p.seed);
            gen_patches(&p, &meta, &out)
        }
        Command::Screen {
            logs,
            golden,
            flags_out,
            out,
        } => screen(cfg, &logs, &golden, flags_out.as_deref(), &out),
        Command::Clean {
            ratings,
            flags,
            verdicts,
            report,
            out,
        } => clean(
            cfg,
            &ratings,
            &flags,
            verdicts.as_deref(),
            report.as_deref(),
            &out,
        ),
        Command::Analyze {
            ratings,
            golden,
            seed,
            out,
        } => analyze(
            cfg,
            &ratings,
            golden.as_deref(),
            seed.unwrap_or(cfg.analysis.seed),
            &out,
        ),
        Command::Simulate { spec, seed, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                    toml::from_str::<SimSpec>(&text)
                        .map_err(|e| CliError::new("BAD_SPEC", format!("{}: {e}", p.display())))?
                }
                None => cfg.simulate.spec.clone(),
            };
            let seed = seed.unwrap_or(cfg.simulate.seed);
            let dir = out_dir(&out)?;
            let result = simulate::simulate_study(&spec, seed)?;
            result.write(dir)?;
            info!(
                "simulated {} subjects into {}",
                result.labels.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Defaults { out } => {
            let mut w = create_out(&out)?;
            w.write_all(PipelineConfig::default().to_toml().as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| CliError::io(&out, e))
        }
    }
}

fn extract(
    cfg: &PipelineConfig,
    format: InputFormat,
    faces: Option<&Path>,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let seq = media_io::load_frames(input, format)?;
        let id = seq.meta().id.clone();
        let sidecar = match faces.map(|d| d.join(format!("{id}.json"))) {
            Some(p) if p.exists() => Some(FaceSidecar::load(&p).map_err(|e| CliError::io(&p, e))?),
            _ => None,
        };
        let fv = features::extract_features(&seq, sidecar.as_ref(), &cfg.features)?;
        info!("features for {id}: {} frames", seq.frames().len());
        rows.push((id, fv));
    }
    features::write_features_csv(create_out(out)?, &rows).map_err(csv_err(out))
}

fn sample(
    s: &crate::config::SamplerConfig,
    candidates: &Path,
    reference: &Path,
    groups: Option<&Path>,
    report: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if s.target_size == 0 {
        return Err(CliError::new(
            "INVALID_ARGUMENT",
            "target size not set (use --size or sampler.target_size)",
        ));
    }
    let cands = FeatureTable::read(open_in(candidates)?).map_err(parse_err(candidates))?;
    let refs = FeatureTable::read(open_in(reference)?).map_err(parse_err(reference))?;
    if cands.names != refs.names {
        return Err(CliError::new(
            "INVALID_PROBLEM",
            "candidate and reference feature columns differ",
        ));
    }
    let group_of: BTreeMap<String, String> = match groups {
        Some(p) => {
            let mut m = BTreeMap::new();
            for rec in csv::Reader::from_reader(open_in(p)?).records() {
                let rec = rec.map_err(csv_err(p))?;
                if rec.len() < 2 {
                    return Err(CliError::new(
                        "PARSE",
                        format!("{}: expected video_id,group rows", p.display()),
                    ));
                }
                m.insert(rec[0].to_string(), rec[1].to_string());
            }
            m
        }
        None => BTreeMap::new(),
    };
    let problem = SelectionProblem {
        candidates: cands
            .rows
            .iter()
            .map(|(id, values)| Candidate {
                id: id.clone(),
                group: group_of.get(id).cloned(),
                values: values.clone(),
            })
            .collect(),
        reference: refs.rows.into_iter().map(|(_, v)| v).collect(),
        target_size: s.target_size,
        bins_per_feature: s.bins_per_feature,
        group_quotas: (!s.quotas.is_empty()).then(|| {
            s.quotas
                .iter()
                .map(|(g, q)| (g.clone(), (q.min, q.max)))
                .collect()
        }),
    };
    let opts = SolveOptions {
        swap_cap_factor: s.swap_cap_factor,
        ..SolveOptions::new(s.mode, s.seed)
    };
    let result = sampler::solve(&problem, opts)?;
    info!(
        "selected {} of {} (objective {:.6})",
        result.selected.len(),
        problem.candidates.len(),
        result.objective
    );
    sampler::write_selection(create_out(out)?, &result).map_err(|e| CliError::io(out, e))?;
    if let Some(p) = report {
        write_json(p, &sampler::report_json(&result, &cands.names))?;
    }
    Ok(())
}

fn gen_patches(p: &patchgen::PatchConfig, meta: &Path, out: &Path) -> Result<()> {
    let metas = patchgen::read_meta_csv(open_in(meta)?).map_err(csv_err(meta))?;
    let triplets = metas
        .par_iter()
        .map(|m| patchgen::gen_patch_triplet_with(m, patchgen::video_seed(p.seed, &m.id), p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    info!("placed patches for {} videos", triplets.len());
    patchgen::write_patches_csv(create_out(out)?, &triplets).map_err(csv_err(out))
}

fn screen(
    cfg: &PipelineConfig,
    logs: &Path,
    golden: &Path,
    flags_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let golden_scores = screening::read_golden_csv(open_in(golden)?)?;
    let sessions = screening::read_session_dir(logs)?;
    let verdicts = sessions
        .par_iter()
        .map(|(id, ev)| {
            screening::screen_session(id, ev, &cfg.screening, &golden_scores).map_err(|e| (id, e))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|(id, e)| {
            let mut err = CliError::from(e);
            err.message = format!("{id}: {}", err.message);
            err
        })?;
    let accepted = verdicts.iter().filter(|v| v.accepted()).count();
    info!("screened {} sessions, {accepted} accepted", verdicts.len());
    screening::write_verdicts_csv(create_out(out)?, &verdicts).map_err(csv_err(out))?;
    if let Some(p) = flags_out {
        let flags = verdicts
            .iter()
            .map(|v| {
                (
                    v.subject_id.clone(),
                    cleaning::SubjectFlags::from_verdict(v),
                )
            })
            .collect();
        cleaning::write_flags_csv(create_out(p)?, &flags).map_err(csv_err(p))?;
    }
    Ok(())
}

fn clean(
    cfg: &PipelineConfig,
    ratings: &Path,
    flags: &Path,
    verdicts: Option<&Path>,
    report: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let table = RatingTable::read_csv(open_in(ratings)?)?;
    let flags = cleaning::read_flags_csv(open_in(flags)?)?;
    let verdict_map = match verdicts {
        Some(p) => Some(screening::read_verdicts_csv(open_in(p)?)?),
        None => None,
    };
    let (cleaned, rep) = cleaning::clean(&table, &flags, verdict_map.as_ref(), &cfg.cleaning)?;
    info!(
        "kept {} of {} ratings; dropped subjects {}/{}/{} and {} scores",
        cleaned.len(),
        table.len(),
        rep.subjects_dropped_stage1.len(),
        rep.subjects_dropped_stage2.len(),
        rep.subjects_dropped_stage3
            .values()
            .map(Vec::len)
            .sum::<usize>(),
        rep.scores_dropped_stage4.len()
    );
    cleaned.write_csv(create_out(out)?).map_err(csv_err(out))?;
    if let Some(p) = report {
        write_json(p, &rep)?;
    }
    Ok(())
}

fn analyze(
    cfg: &PipelineConfig,
    ratings: &Path,
    golden: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let dir = out_dir(out)?;
    let table = RatingTable::read_csv(open_in(ratings)?)?;
    let mos = analysis::compute_mos(&table, None)?;
    let p = dir.join("mos.csv");
    mos.write_csv(create_out(&p)?).map_err(csv_err(&p))?;

    let mut inter = BTreeMap::new();
    let mut patch_video = Vec::new();
    for kind in table.kinds() {
        match analysis::inter_subject_consistency(&table, kind, cfg.analysis.n_splits, seed) {
            Ok(r) => {
                inter.insert(kind, r);
            }
            Err(e) => warn!("{kind}: split-half consistency skipped: {e}"),
        }
        if kind != ContentKind::Video {
            match analysis::patch_video_correlation(&mos, &mos, kind) {
                Ok(r) => patch_video.push(r),
                Err(e) => warn!("{kind}: patch/video correlation skipped: {e}"),
            }
        }
    }
    let golden_result = match golden {
        Some(p) => {
            let refs = screening::read_golden_csv(open_in(p)?)?;
            Some(analysis::intra_subject_golden(&table, &refs)?)
        }
        None => None,
    };
    write_json(
        &dir.join("consistency.json"),
        &serde_json::json!({
            "inter_subject": inter,
            "intra_subject_golden": golden_result,
            "patch_video": patch_video,
        }),
    )?;

    let video_mos: Vec<f64> = mos.of_kind(ContentKind::Video).map(|r| r.mos).collect();
    let values = if video_mos.is_empty() {
        mos.rows.iter().map(|r| r.mos).collect()
    } else {
        video_mos
    };
    let p = dir.join("histogram.csv");
    analysis::write_histogram_csv(
        create_out(&p)?,
        &analysis::export_histogram(&values, cfg.analysis.histogram_bins),
    )
    .map_err(csv_err(&p))
}
