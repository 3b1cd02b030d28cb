//! Frame ingestion: YUV4MPEG2 (4:2:0), PNG frame directories and headerless
//! planar RGB with a JSON sidecar.
//!
//! Nothing here resizes or filters pixel data. Chroma in y4m input is
//! upsampled nearest-neighbor and converted with BT.601 full-range
//! coefficients.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{0}: no frames")]
    Empty(PathBuf),
}

impl MediaError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        MediaError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MediaError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub fps: f64,
    #[serde(default)]
    pub source_tag: String,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return Err(MediaError::Format(format!(
                "{}: dimensions must be positive ({}x{}x{})",
                self.id, self.width, self.height, self.frame_count
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(MediaError::Format(format!(
                "{}: fps must be positive, got {}",
                self.id, self.fps
            )));
        }
        Ok(())
    }
}

/// One 8-bit RGB image stored as three consecutive planes (R, G, B).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbFrame {
    /// `data` must hold the R plane, then G, then B, each `width * height` bytes.
    pub fn from_planar(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(MediaError::Format(format!(
                "planar buffer of {} bytes does not match {}x{} RGB",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let n = width * height;
        let mut data = vec![0u8; 3 * n];
        for y in 0..height {
            for x in 0..width {
                let [r, g, b] = f(x, y);
                let i = y * width + x;
                data[i] = r;
                data[n + i] = g;
                data[2 * n + i] = b;
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn uniform(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn r(&self) -> &[u8] {
        &self.data[..self.pixel_count()]
    }

    pub fn g(&self) -> &[u8] {
        let n = self.pixel_count();
        &self.data[n..2 * n]
    }

    pub fn b(&self) -> &[u8] {
        let n = self.pixel_count();
        &self.data[2 * n..]
    }

    pub fn as_planar(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = y * self.width + x;
        [self.r()[i], self.g()[i], self.b()[i]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    meta: VideoMeta,
    frames: Vec<RgbFrame>,
}

impl FrameSequence {
    /// Builds a sequence, rewriting `frame_count`, `width` and `height` from
    /// the frames themselves and checking that all frames agree.
    pub fn new(mut meta: VideoMeta, frames: Vec<RgbFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| MediaError::Empty(PathBuf::from(&meta.id)))?;
        let (w, h) = (first.width, first.height);
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.width != w || f.height != h)
        {
            return Err(MediaError::Format(format!(
                "{}: frame {} is {}x{}, expected {}x{}",
                meta.id, i, f.width, f.height, w, h
            )));
        }
        meta.width = w;
        meta.height = h;
        meta.frame_count = frames.len();
        meta.validate()?;
        Ok(Self { meta, frames })
    }

    pub fn meta(&self) -> &VideoMeta {
        &self.meta
    }

    pub fn frames(&self) -> &[RgbFrame] {
        &self.frames
    }
}

/// Luma samples of one frame, row-major, values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayPlane {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn transposed(&self) -> GrayPlane {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                data[x * self.height + y] = self.data[y * self.width + x];
            }
        }
        GrayPlane {
            width: self.height,
            height: self.width,
            data,
        }
    }
}

/// Luma volume indexed as `[t][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayVolume {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<GrayPlane>,
}

impl GrayVolume {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    LUMA_R * r as f64 + LUMA_G * g as f64 + LUMA_B * b as f64
}

pub fn frame_to_gray(frame: &RgbFrame) -> GrayPlane {
    let data = frame
        .r()
        .iter()
        .zip(frame.g())
        .zip(frame.b())
        .map(|((&r, &g), &b)| luma(r, g, b))
        .collect();
    GrayPlane {
        width: frame.width,
        height: frame.height,
        data,
    }
}

pub fn to_gray(seq: &FrameSequence) -> GrayVolume {
    GrayVolume {
        width: seq.meta.width,
        height: seq.meta.height,
        frames: seq.frames.iter().map(frame_to_gray).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Y4m,
    PngSequenceDir,
    RawRgb,
}

pub fn load_frames(path: &Path, format: InputFormat) -> Result<FrameSequence> {
    match format {
        InputFormat::Y4m => load_y4m(path),
        InputFormat::PngSequenceDir => load_png_dir(path),
        InputFormat::RawRgb => load_raw_rgb(path),
    }
}

fn stem_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Y4mHeader {
    width: usize,
    height: usize,
    fps: f64,
}

fn parse_y4m_header(line: &str) -> Result<Y4mHeader> {
    let mut tokens = line.split_ascii_whitespace();
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(MediaError::Format("missing YUV4MPEG2 signature".into()));
    }
    let (mut width, mut height, mut fps) = (None, None, 30.0);
    for tok in tokens {
        let (tag, val) = tok.split_at(1);
        match tag {
            "W" => width = val.parse().ok(),
            "H" => height = val.parse().ok(),
            "F" => {
                let (n, d) = val
                    .split_once(':')
                    .ok_or_else(|| MediaError::Format(format!("bad frame rate {val:?}")))?;
                let n: f64 = n
                    .parse()
                    .map_err(|_| MediaError::Format(format!("bad frame rate {val:?}")))?;
                let d: f64 = d
                    .parse()
                    .map_err(|_| MediaError::Format(format!("bad frame rate {val:?}")))?;
                if d <= 0.0 || n <= 0.0 {
                    return Err(MediaError::Format(format!("bad frame rate {val:?}")));
                }
                fps = n / d;
            }
            "C" if !val.starts_with("420") => {
                return Err(MediaError::Format(format!(
                    "unsupported colorspace C{val}, only 4:2:0"
                )));
            }
            _ => {}
        }
    }
    match (width, height) {
        (Some(width), Some(height)) if width > 0 && height > 0 => {
            Ok(Y4mHeader { width, height, fps })
        }
        _ => Err(MediaError::Format("y4m header lacks valid W/H".into())),
    }
}

fn read_line(reader: &mut impl BufRead, path: &Path) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let n = reader
        .read_until(b'\n', &mut buf)
        .map_err(|e| MediaError::io(path, e))?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        return Err(MediaError::Format(format!(
            "{}: truncated header line",
            path.display()
        )));
    }
    buf.pop();
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| MediaError::Format(format!("{}: non-ASCII header", path.display())))
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// BT.601 full-range YCbCr to RGB.
pub fn ycbcr_to_rgb(y: u8, cb: u8, cr: u8) -> [u8; 3] {
    let y = y as f64;
    let cb = cb as f64 - 128.0;
    let cr = cr as f64 - 128.0;
    [
        clamp_u8(y + 1.402 * cr),
        clamp_u8(y - 0.344136 * cb - 0.714136 * cr),
        clamp_u8(y + 1.772 * cb),
    ]
}

fn load_y4m(path: &Path) -> Result<FrameSequence> {
    let file = File::open(path).map_err(|e| MediaError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_line(&mut reader, path)?
        .ok_or_else(|| MediaError::Format(format!("{}: empty file", path.display())))?;
    let hdr = parse_y4m_header(&header)?;
    let (w, h) = (hdr.width, hdr.height);
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let mut luma_buf = vec![0u8; w * h];
    let mut cb_buf = vec![0u8; cw * ch];
    let mut cr_buf = vec![0u8; cw * ch];

    let mut frames = Vec::new();
    while let Some(line) = read_line(&mut reader, path)? {
        if !line.starts_with("FRAME") {
            return Err(MediaError::Format(format!(
                "{}: expected FRAME marker before frame {}",
                path.display(),
                frames.len()
            )));
        }
        for buf in [&mut luma_buf, &mut cb_buf, &mut cr_buf] {
            reader.read_exact(buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    MediaError::Format(format!(
                        "{}: truncated frame {}",
                        path.display(),
                        frames.len()
                    ))
                } else {
                    MediaError::io(path, e)
                }
            })?;
        }
        frames.push(RgbFrame::from_fn(w, h, |x, y| {
            let ci = (y / 2) * cw + x / 2;
            ycbcr_to_rgb(luma_buf[y * w + x], cb_buf[ci], cr_buf[ci])
        }));
    }
    if frames.is_empty() {
        return Err(MediaError::Empty(path.to_path_buf()));
    }
    let meta = VideoMeta {
        id: stem_id(path),
        width: w,
        height: h,
        frame_count: frames.len(),
        fps: hdr.fps,
        source_tag: "y4m".into(),
    };
    FrameSequence::new(meta, frames)
}

/// Frame rate assumed for PNG directories, which carry no timing.
pub const PNG_SEQUENCE_FPS: f64 = 30.0;

fn decode_png(path: &Path) -> Result<RgbFrame> {
    let file = File::open(path).map_err(|e| MediaError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| MediaError::Format(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| MediaError::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(MediaError::Format(format!(
                "{}: unexpanded palette",
                path.display()
            )))
        }
    };
    let stride = info.line_size;
    Ok(RgbFrame::from_fn(w, h, |x, y| {
        let p = &buf[y * stride + x * channels..];
        if channels < 3 {
            [p[0], p[0], p[0]]
        } else {
            [p[0], p[1], p[2]]
        }
    }))
}

fn load_png_dir(dir: &Path) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| MediaError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| MediaError::io(dir, e))?;
        let p = entry.path();
        let is_png = p
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(MediaError::Empty(dir.to_path_buf()));
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let frames = files
        .iter()
        .map(|p| decode_png(p))
        .collect::<Result<Vec<_>>>()?;
    let meta = VideoMeta {
        id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        width: frames[0].width,
        height: frames[0].height,
        frame_count: frames.len(),
        fps: PNG_SEQUENCE_FPS,
        source_tag: "png".into(),
    };
    FrameSequence::new(meta, frames)
}

/// Sidecar path for a raw RGB file: same stem, `.json` extension.
pub fn raw_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn load_raw_rgb(path: &Path) -> Result<FrameSequence> {
    let sidecar = raw_sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| MediaError::io(&sidecar, e))?;
    let meta: VideoMeta = serde_json::from_str(&text)
        .map_err(|e| MediaError::Format(format!("{}: {e}", sidecar.display())))?;
    meta.validate()?;
    let bytes = fs::read(path).map_err(|e| MediaError::io(path, e))?;
    let frame_bytes = 3 * meta.width * meta.height;
    if bytes.is_empty() {
        return Err(MediaError::Empty(path.to_path_buf()));
    }
    if bytes.len() != frame_bytes * meta.frame_count {
        return Err(MediaError::Format(format!(
            "{}: {} bytes, sidecar promises {} frames of {} bytes",
            path.display(),
            bytes.len(),
            meta.frame_count,
            frame_bytes
        )));
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .map(|chunk| RgbFrame::from_planar(meta.width, meta.height, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(meta, frames)
}

/// Writes frames back-to-back as planar RGB plus the JSON sidecar.
pub fn write_raw_rgb(seq: &FrameSequence, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| MediaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in &seq.frames {
        w.write_all(f.as_planar())
            .map_err(|e| MediaError::io(path, e))?;
    }
    w.flush().map_err(|e| MediaError::io(path, e))?;
    let sidecar = raw_sidecar_path(path);
    let json = serde_json::to_string_pretty(&seq.meta).expect("VideoMeta serializes");
    fs::write(&sidecar, json).map_err(|e| MediaError::io(&sidecar, e))
}

/// Writes one PNG per frame as `frame_000.png`, `frame_001.png`, ...
pub fn write_png_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MediaError::io(dir, e))?;
    let digits = seq.frames.len().saturating_sub(1).to_string().len().max(3);
    for (i, f) in seq.frames.iter().enumerate() {
        write_png(f, &dir.join(format!("frame_{i:0digits$}.png")))?;
    }
    Ok(())
}

pub fn write_png(frame: &RgbFrame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| MediaError::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width as u32,
        frame.height as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| MediaError::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(bad)?;
    let mut interleaved = Vec::with_capacity(3 * frame.pixel_count());
    for i in 0..frame.pixel_count() {
        interleaved.extend_from_slice(&[frame.r()[i], frame.g()[i], frame.b()[i]]);
    }
    writer.write_image_data(&interleaved).map_err(bad)?;
    writer.finish().map_err(bad)
}
