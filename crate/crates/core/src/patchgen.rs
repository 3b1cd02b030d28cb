//! Space-time patch placement.
//!
//! Every source video yields three boxes: a spatial patch (40% of width and
//! height, full duration), a temporal patch (full frame, 40% of the
//! duration) and a spatio-temporal patch (40% along all three axes). The
//! spatio-temporal patch is placed uniformly first. The spatial and temporal
//! patches are then each drawn uniformly from the origins whose volumetric
//! overlap with it is at most 25% of its volume (rejection sampling for the
//! spatial patch, direct enumeration for the one-dimensional temporal one).
//! A spatio-temporal placement that admits no valid partner is redrawn; this
//! only happens when rounding makes 40% of a short axis exceed two fifths.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media_io::VideoMeta;

pub const PATCH_SCALE_NUM: usize = 2;
pub const PATCH_SCALE_DEN: usize = 5;
pub const MAX_OVERLAP: f64 = 0.25;
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("{id}: patch generation needs width, height and frame count >= 5, got {w}x{h}x{t}")]
    BadMeta {
        id: String,
        w: usize,
        h: usize,
        t: usize,
    },
    #[error("{id}: no placement within the overlap limit after {attempts} attempts")]
    InfeasibleGeometry { id: String, attempts: usize },
    #[error("bad patch config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Largest allowed `vol(other ∩ stv) / vol(stv)` for the sv and tv patches.
    pub max_overlap: f64,
    /// Redraw budget for both the spatio-temporal and the spatial patch.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            max_overlap: MAX_OVERLAP,
            max_attempts: MAX_ATTEMPTS,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        if !(self.max_overlap > 0.0 && self.max_overlap <= 1.0) {
            return Err(PatchError::BadConfig(
                "max_overlap must lie in (0, 1]".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(PatchError::BadConfig(
                "max_attempts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub t0: usize,
    pub d: usize,
}

impl PatchBox {
    pub fn volume(&self) -> u64 {
        self.w as u64 * self.h as u64 * self.d as u64
    }

    pub fn contained_in(&self, meta: &VideoMeta) -> bool {
        self.x0 + self.w <= meta.width
            && self.y0 + self.h <= meta.height
            && self.t0 + self.d <= meta.frame_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Sv,
    Tv,
    Stv,
}

impl PatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchKind::Sv => "sv",
            PatchKind::Tv => "tv",
            PatchKind::Stv => "stv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchTriplet {
    pub video_id: String,
    pub sv: PatchBox,
    pub tv: PatchBox,
    pub stv: PatchBox,
}

fn overlap_1d(a0: usize, alen: usize, b0: usize, blen: usize) -> u64 {
    let lo = a0.max(b0);
    let hi = (a0 + alen).min(b0 + blen);
    hi.saturating_sub(lo) as u64
}

/// `vol(a ∩ b) / vol(b)`.
pub fn overlap_fraction(a: &PatchBox, b: &PatchBox) -> f64 {
    let inter = overlap_1d(a.x0, a.w, b.x0, b.w)
        * overlap_1d(a.y0, a.h, b.y0, b.h)
        * overlap_1d(a.t0, a.d, b.t0, b.d);
    inter as f64 / b.volume() as f64
}

/// `round(0.4 * dim)`, half away from zero, in integer arithmetic.
pub fn scaled_dim(dim: usize) -> usize {
    (2 * PATCH_SCALE_NUM * dim + PATCH_SCALE_DEN) / (2 * PATCH_SCALE_DEN)
}

/// Per-video seed: the global seed mixed with a stable FNV-1a hash of the id.
pub fn video_seed(global: u64, video_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    global ^ h
}

pub fn gen_patch_triplet(meta: &VideoMeta, seed: u64) -> Result<PatchTriplet, PatchError> {
    gen_patch_triplet_with(meta, seed, &PatchConfig::default())
}

pub fn gen_patch_triplet_with(
    meta: &VideoMeta,
    seed: u64,
    cfg: &PatchConfig,
) -> Result<PatchTriplet, PatchError> {
    cfg.validate()?;
    let (w, h, t) = (meta.width, meta.height, meta.frame_count);
    if w < 5 || h < 5 || t < 5 {
        return Err(PatchError::BadMeta {
            id: meta.id.clone(),
            w,
            h,
            t,
        });
    }
    let (pw, ph, pd) = (scaled_dim(w), scaled_dim(h), scaled_dim(t));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..cfg.max_attempts {
        let stv = PatchBox {
            x0: rng.random_range(0..=w - pw),
            y0: rng.random_range(0..=h - ph),
            w: pw,
            h: ph,
            t0: rng.random_range(0..=t - pd),
            d: pd,
        };
        // tv is one-dimensional: draw uniformly from its exact feasible set
        let tv_starts: Vec<usize> = (0..=t - pd)
            .filter(|&t0| overlap_1d(t0, pd, stv.t0, pd) as f64 <= cfg.max_overlap * pd as f64)
            .collect();
        if tv_starts.is_empty() || !spatial_placement_exists(&stv, w, h, cfg.max_overlap) {
            continue;
        }
        let tv = PatchBox {
            x0: 0,
            y0: 0,
            w,
            h,
            t0: tv_starts[rng.random_range(0..tv_starts.len())],
            d: pd,
        };
        let sv = (0..cfg.max_attempts)
            .map(|_| PatchBox {
                x0: rng.random_range(0..=w - pw),
                y0: rng.random_range(0..=h - ph),
                w: pw,
                h: ph,
                t0: 0,
                d: t,
            })
            .find(|b| overlap_fraction(b, &stv) <= cfg.max_overlap);
        if let Some(sv) = sv {
            return Ok(PatchTriplet {
                video_id: meta.id.clone(),
                sv,
                tv,
                stv,
            });
        }
    }
    Err(PatchError::InfeasibleGeometry {
        id: meta.id.clone(),
        attempts: cfg.max_attempts,
    })
}

/// Whether some spatial-patch origin keeps the overlap with `stv` in bounds.
/// The minimum overlap along each axis is reached at one of the two extremes.
fn spatial_placement_exists(stv: &PatchBox, w: usize, h: usize, max_overlap: f64) -> bool {
    let min_x =
        overlap_1d(0, stv.w, stv.x0, stv.w).min(overlap_1d(w - stv.w, stv.w, stv.x0, stv.w));
    let min_y =
        overlap_1d(0, stv.h, stv.y0, stv.h).min(overlap_1d(h - stv.h, stv.h, stv.y0, stv.h));
    (min_x * min_y) as f64 <= max_overlap * (stv.w * stv.h) as f64
}

/// Reads `id,width,height,frame_count,fps,source_tag` rows.
pub fn read_meta_csv<R: Read>(input: R) -> csv::Result<Vec<VideoMeta>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_patches_csv<W: Write>(out: W, triplets: &[PatchTriplet]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "patch_kind", "x0", "y0", "w", "h", "t0", "d"])?;
    for tr in triplets {
        for (kind, b) in [
            (PatchKind::Sv, tr.sv),
            (PatchKind::Tv, tr.tv),
            (PatchKind::Stv, tr.stv),
        ] {
            w.write_record([
                tr.video_id.clone(),
                kind.as_str().to_string(),
                b.x0.to_string(),
                b.y0.to_string(),
                b.w.to_string(),
                b.h.to_string(),
                b.t0.to_string(),
                b.d.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(w: usize, h: usize, t: usize) -> VideoMeta {
        VideoMeta {
            id: "vid".into(),
            width: w,
            height: h,
            frame_count: t,
            fps: 30.0,
            source_tag: String::new(),
        }
    }

    fn cube(x0: usize, y0: usize, t0: usize, side: usize) -> PatchBox {
        PatchBox {
            x0,
            y0,
            w: side,
            h: side,
            t0,
            d: side,
        }
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(
            overlap_fraction(&cube(0, 0, 0, 10), &cube(20, 0, 0, 10)),
            0.0
        );
        assert_eq!(
            overlap_fraction(&cube(3, 4, 5, 10), &cube(3, 4, 5, 10)),
            1.0
        );
        assert_eq!(
            overlap_fraction(&cube(0, 0, 0, 10), &cube(5, 0, 0, 10)),
            0.5
        );
        // touching boxes share no volume
        assert_eq!(
            overlap_fraction(&cube(0, 0, 0, 10), &cube(10, 0, 0, 10)),
            0.0
        );
    }

    #[test]
    fn hd_sizes() {
        let tr = gen_patch_triplet(&meta(1920, 1080, 210), 42).unwrap();
        assert_eq!((tr.sv.w, tr.sv.h, tr.sv.t0, tr.sv.d), (768, 432, 0, 210));
        assert_eq!(
            (tr.tv.x0, tr.tv.y0, tr.tv.w, tr.tv.h, tr.tv.d),
            (0, 0, 1920, 1080, 84)
        );
        assert_eq!((tr.stv.w, tr.stv.h, tr.stv.d), (768, 432, 84));
    }

    #[test]
    fn scaled_dim_matches_float_rounding() {
        for d in 1..5000usize {
            assert_eq!(scaled_dim(d), (0.4 * d as f64).round() as usize, "dim {d}");
        }
    }

    #[test]
    fn deterministic() {
        let m = meta(640, 360, 150);
        assert_eq!(gen_patch_triplet(&m, 9), gen_patch_triplet(&m, 9));
        assert_ne!(gen_patch_triplet(&m, 9), gen_patch_triplet(&m, 10));
    }

    #[test]
    fn bad_meta() {
        assert!(matches!(
            gen_patch_triplet(&meta(4, 100, 100), 0),
            Err(PatchError::BadMeta { .. })
        ));
    }

    #[test]
    fn video_seed_is_stable() {
        assert_eq!(video_seed(0, ""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(video_seed(7, "a"), video_seed(7, "b"));
    }

    #[test]
    fn csv_layout() {
        let tr = gen_patch_triplet(&meta(100, 50, 30), 1).unwrap();
        let mut buf = Vec::new();
        write_patches_csv(&mut buf, &[tr]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "video_id,patch_kind,x0,y0,w,h,t0,d");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("vid,tv,0,0,100,50,"));
    }

    proptest! {
        #[test]
        fn constraints_hold_for_any_geometry(w in 5usize..400, h in 5usize..400, t in 5usize..300, seed in any::<u64>()) {
            let m = meta(w, h, t);
            let tr = gen_patch_triplet(&m, seed).unwrap();
            for b in [tr.sv, tr.tv, tr.stv] {
                prop_assert!(b.contained_in(&m));
            }
            prop_assert!(overlap_fraction(&tr.sv, &tr.stv) <= MAX_OVERLAP);
            prop_assert!(overlap_fraction(&tr.tv, &tr.stv) <= MAX_OVERLAP);
            prop_assert_eq!((tr.sv.w, tr.sv.h), (scaled_dim(w), scaled_dim(h)));
            prop_assert_eq!(tr.stv.d, scaled_dim(t));
        }
    }
}
