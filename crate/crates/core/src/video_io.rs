//! Codec-free frame sequences: directories of binary PGM/PPM files with a
//! `stream.json` sidecar, or a single file of concatenated PGM/PPM images.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const METADATA_FILE: &str = "stream.json";

/// One decoded image. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    index: u64,
    timestamp_ms: u64,
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(
        index: u64,
        timestamp_ms: u64,
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidFrame(format!("empty dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidFrame(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidFrame(format!(
                "buffer holds {} bytes, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(Frame {
            index,
            timestamp_ms,
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A frame filled with one value per channel.
    pub fn filled(index: u64, timestamp_ms: u64, width: usize, height: usize, value: &[u8]) -> Result<Self> {
        let pixels = value.iter().copied().cycle().take(width * height * value.len()).collect();
        Frame::new(index, timestamp_ms, width, height, value.len(), pixels)
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.pixels[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn with_position(mut self, index: u64, timestamp_ms: u64) -> Self {
        self.index = index;
        self.timestamp_ms = timestamp_ms;
        self
    }

    /// Copies the pixels under `bbox`, row-major, all channels.
    pub fn crop(&self, bbox: &BBox) -> Vec<u8> {
        let mut out = Vec::with_capacity(bbox.area() * self.channels);
        for y in bbox.y..bbox.bottom() {
            let start = (y * self.width + bbox.x) * self.channels;
            out.extend_from_slice(&self.pixels[start..start + bbox.w * self.channels]);
        }
        out
    }
}

/// Rec.601 luma, rounded; 1-channel frames are returned unchanged.
pub fn to_luma(frame: &Frame) -> Frame {
    if frame.channels == 1 {
        return frame.clone();
    }
    let pixels = frame
        .pixels
        .chunks_exact(3)
        .map(|p| luma_of(p[0], p[1], p[2]))
        .collect();
    Frame {
        index: frame.index,
        timestamp_ms: frame.timestamp_ms,
        width: frame.width,
        height: frame.height,
        channels: 1,
        pixels,
    }
}

pub fn luma_of(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

/// Milliseconds from stream start for frame `index` at a constant rate.
pub fn timestamp_ms(index: u64, fps: f64) -> u64 {
    (index as f64 * 1000.0 / fps).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub fps: f64,
    pub frame_count: u64,
    pub width: usize,
    pub height: usize,
    pub source_id: String,
}

impl StreamMeta {
    pub fn new(fps: f64, frame_count: u64, width: usize, height: usize, source_id: impl Into<String>) -> Self {
        StreamMeta {
            fps,
            frame_count,
            width,
            height,
            source_id: source_id.into(),
        }
    }
}

/// The `stream.json` sidecar, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    fps: f64,
    width: usize,
    height: usize,
    count: u64,
}

enum Backing {
    Files(Vec<PathBuf>),
    Stream { reader: BufReader<File>, path: PathBuf },
}

/// Yields the frames of a stored sequence in ascending index order.
pub struct FrameSource {
    backing: Backing,
    meta: StreamMeta,
    channels: Option<usize>,
    next: u64,
    failed: bool,
}

impl FrameSource {
    pub fn meta(&self) -> &StreamMeta {
        &self.meta
    }
}

impl std::fmt::Debug for FrameSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameSource").field("meta", &self.meta).field("next", &self.next).finish()
    }
}

impl Iterator for FrameSource {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Result<Frame>> {
        if self.failed || self.next >= self.meta.frame_count {
            return None;
        }
        let index = self.next;
        let decoded = match &mut self.backing {
            Backing::Files(files) => {
                let path = &files[index as usize];
                File::open(path)
                    .map_err(|e| Error::io(path, e))
                    .and_then(|f| read_pnm(&mut BufReader::new(f), path))
            }
            Backing::Stream { reader, path } => read_pnm(reader, path),
        };
        let result = decoded.and_then(|(w, h, c, pixels)| {
            let want_c = *self.channels.get_or_insert(c);
            if w != self.meta.width || h != self.meta.height || c != want_c {
                return Err(Error::DimensionMismatch {
                    index,
                    got_w: w,
                    got_h: h,
                    got_c: c,
                    want_w: self.meta.width,
                    want_h: self.meta.height,
                    want_c,
                });
            }
            Frame::new(index, timestamp_ms(index, self.meta.fps), w, h, c, pixels)
        });
        self.next += 1;
        if result.is_err() {
            self.failed = true;
        }
        Some(result)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.meta.frame_count - self.next.min(self.meta.frame_count)) as usize;
        (0, Some(left))
    }
}

/// Opens a directory sequence (numbered `.pgm`/`.ppm` files plus optional
/// `stream.json`) or a single file holding concatenated images.
pub fn open_sequence(path: impl AsRef<Path>, fps_override: Option<f64>) -> Result<FrameSource> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if let Some(fps) = fps_override {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Metadata(format!("fps must be positive, got {fps}")));
        }
    }
    if path.is_dir() {
        open_directory(path, fps_override)
    } else {
        open_stream_file(path, fps_override)
    }
}

fn open_directory(dir: &Path, fps_override: Option<f64>) -> Result<FrameSource> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pgm") | Some("ppm")) {
            continue;
        }
        let Some(n) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        numbered.push((n, p));
    }
    numbered.sort();
    let files: Vec<PathBuf> = numbered.into_iter().map(|(_, p)| p).collect();

    let sidecar_path = dir.join(METADATA_FILE);
    let sidecar = if sidecar_path.exists() {
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let s: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Metadata(format!("{}: {e}", sidecar_path.display())))?;
        if !(s.fps > 0.0 && s.fps.is_finite()) {
            return Err(Error::Metadata(format!("fps must be positive, got {}", s.fps)));
        }
        if s.count != files.len() as u64 {
            return Err(Error::Metadata(format!(
                "stream.json declares {} frames but {} were found",
                s.count,
                files.len()
            )));
        }
        Some(s)
    } else {
        None
    };

    if files.is_empty() && sidecar.is_none() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let fps = fps_override
        .or(sidecar.as_ref().map(|s| s.fps))
        .ok_or(Error::MissingFps)?;

    let (width, height) = match (&sidecar, files.first()) {
        (Some(s), _) => (s.width, s.height),
        (None, Some(first)) => {
            let f = File::open(first).map_err(|e| Error::io(first, e))?;
            let (w, h, _) = read_pnm_header(&mut BufReader::new(f), first)?;
            (w, h)
        }
        (None, None) => unreachable!("checked above"),
    };

    Ok(FrameSource {
        meta: StreamMeta::new(fps, files.len() as u64, width, height, dir.display().to_string()),
        backing: Backing::Files(files),
        channels: None,
        next: 0,
        failed: false,
    })
}

fn open_stream_file(path: &Path, fps_override: Option<f64>) -> Result<FrameSource> {
    let fps = fps_override.ok_or(Error::MissingFps)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);

    // Walk the headers once to count frames and fix the geometry.
    let mut count = 0u64;
    let mut dims = None;
    loop {
        let pos = reader.stream_position().map_err(|e| Error::io(path, e))?;
        if pos >= len {
            break;
        }
        let (w, h, c) = read_pnm_header(&mut reader, path)?;
        let want = *dims.get_or_insert((w, h, c));
        if (w, h, c) != want {
            return Err(Error::DimensionMismatch {
                index: count,
                got_w: w,
                got_h: h,
                got_c: c,
                want_w: want.0,
                want_h: want.1,
                want_c: want.2,
            });
        }
        reader
            .seek(SeekFrom::Current((w * h * c) as i64))
            .map_err(|e| Error::io(path, e))?;
        count += 1;
    }
    let Some((width, height, channels)) = dims else {
        return Err(Error::NoFrames(path.to_path_buf()));
    };
    reader.seek(SeekFrom::Start(0)).map_err(|e| Error::io(path, e))?;
    Ok(FrameSource {
        meta: StreamMeta::new(fps, count, width, height, path.display().to_string()),
        backing: Backing::Stream {
            reader,
            path: path.to_path_buf(),
        },
        channels: Some(channels),
        next: 0,
        failed: false,
    })
}

fn read_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let bad = |reason: &str| Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            return if token.is_empty() { Err(bad("truncated header")) } else { Ok(token) };
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut comment = Vec::new();
            reader.read_until(b'\n', &mut comment).map_err(|e| Error::io(path, e))?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            // The single whitespace byte after the last header field is consumed here.
            return Ok(token);
        }
        token.push(b as char);
        if token.len() > 16 {
            return Err(bad("header token too long"));
        }
    }
}

fn read_pnm_header(reader: &mut impl BufRead, path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let magic = read_token(reader, path)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic {other:?}"))),
    };
    let mut field = |name: &str| -> Result<usize> {
        read_token(reader, path)?
            .parse::<usize>()
            .map_err(|_| bad(format!("bad {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(bad(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension".into()));
    }
    Ok((width, height, channels))
}

fn read_pnm(reader: &mut impl BufRead, path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (w, h, c) = read_pnm_header(reader, path)?;
    let mut pixels = vec![0u8; w * h * c];
    reader.read_exact(&mut pixels).map_err(|e| Error::io(path, e))?;
    Ok((w, h, c, pixels))
}

fn write_pnm(out: &mut impl Write, frame: &Frame) -> std::io::Result<()> {
    let magic = if frame.channels == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", frame.width, frame.height)?;
    out.write_all(&frame.pixels)
}

pub fn frame_file_name(index: u64, channels: usize) -> String {
    format!("{index:06}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

/// Incremental directory writer; `finish` writes the sidecar.
pub struct SequenceWriter {
    dir: PathBuf,
    fps: f64,
    dims: Option<(usize, usize, usize)>,
    count: u64,
}

impl SequenceWriter {
    pub fn create(dir: impl AsRef<Path>, fps: f64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Metadata(format!("fps must be positive, got {fps}")));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SequenceWriter {
            dir,
            fps,
            dims: None,
            count: 0,
        })
    }

    /// Fixes the expected geometry before any frame arrives.
    pub fn expect_dims(mut self, width: usize, height: usize, channels: usize) -> Self {
        if width > 0 && height > 0 {
            self.dims = Some((width, height, channels));
        }
        self
    }

    pub fn push(&mut self, frame: &Frame) -> Result<()> {
        let got = (frame.width, frame.height, frame.channels);
        let want = *self.dims.get_or_insert(got);
        // A fixed width/height with unknown channel count is set by expect_dims(.., 0).
        if got.0 != want.0 || got.1 != want.1 || (want.2 != 0 && got.2 != want.2) {
            return Err(Error::DimensionMismatch {
                index: self.count,
                got_w: got.0,
                got_h: got.1,
                got_c: got.2,
                want_w: want.0,
                want_h: want.1,
                want_c: want.2,
            });
        }
        if want.2 == 0 {
            self.dims = Some(got);
        }
        let path = self.dir.join(frame_file_name(self.count, frame.channels));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        write_pnm(&mut out, frame)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> Result<StreamMeta> {
        let (width, height, _) = self.dims.unwrap_or((0, 0, 0));
        let sidecar = Sidecar {
            fps: self.fps,
            width,
            height,
            count: self.count,
        };
        let path = self.dir.join(METADATA_FILE);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("stream.json", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(StreamMeta::new(self.fps, self.count, width, height, self.dir.display().to_string()))
    }
}

/// Writes `frames` as a numbered directory sequence and returns the stored
/// metadata. Frames must match `meta`'s geometry when it is non-zero.
pub fn write_sequence<'a>(
    sink: impl AsRef<Path>,
    frames: impl IntoIterator<Item = &'a Frame>,
    meta: &StreamMeta,
) -> Result<StreamMeta> {
    let mut writer = SequenceWriter::create(sink, meta.fps)?.expect_dims(meta.width, meta.height, 0);
    for frame in frames {
        writer.push(frame)?;
    }
    writer.finish()
}

/// Writes frames as one file of concatenated binary images.
pub fn write_stream_file<'a>(path: impl AsRef<Path>, frames: impl IntoIterator<Item = &'a Frame>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for frame in frames {
        write_pnm(&mut out, frame).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
