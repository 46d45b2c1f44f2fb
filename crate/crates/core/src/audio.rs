//! Audio loading, resampling and framing.
//!
//! Everything downstream works on 16 kHz mono clips cut into non-overlapping
//! 20 ms frames of [`FRAME_LEN`] samples.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Samples per frame: 20 ms at 16 kHz.
pub const FRAME_LEN: usize = 320;
pub const FRAME_SECONDS: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
    pub source_path: String,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, sample_rate: u32, samples: Vec<f32>) -> Self {
        AudioClip {
            clip_id: clip_id.into(),
            sample_rate,
            samples,
            source_path: String::new(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn is_canonical(&self) -> bool {
        self.sample_rate == SAMPLE_RATE
    }
}

/// Frame layout of a canonical clip. Frames past the end of the signal are
/// implicitly zero-padded; the padding is never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameGrid {
    pub clip_id: String,
    pub num_frames: usize,
    pub frame_len: usize,
    pub hop: usize,
}

impl FrameGrid {
    /// Grid for a clip of `len` samples. Clips shorter than one frame still
    /// get a single frame.
    pub fn for_len(clip_id: impl Into<String>, len: usize) -> Self {
        FrameGrid {
            clip_id: clip_id.into(),
            num_frames: len.div_ceil(FRAME_LEN).max(1),
            frame_len: FRAME_LEN,
            hop: FRAME_LEN,
        }
    }

    pub fn duration(&self) -> f64 {
        self.num_frames as f64 * FRAME_SECONDS
    }
}

pub fn frame_grid(clip: &AudioClip) -> Result<FrameGrid> {
    if !clip.is_canonical() {
        return Err(Error::InvalidArgument(format!(
            "clip {} is at {} Hz; resample to {SAMPLE_RATE} Hz before framing",
            clip.clip_id, clip.sample_rate
        )));
    }
    Ok(FrameGrid::for_len(&clip.clip_id, clip.samples.len()))
}

/// Reads a PCM WAV file as a mono clip with amplitudes in [-1, 1].
///
/// Integer samples are divided by 2^(bits-1); stereo is averaged.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedFormat(
            path.into(),
            format!("{} channels", spec.channels),
        ));
    }
    if reader.len() == 0 {
        return Err(Error::EmptyAudio(path.into()));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if !matches!(spec.bits_per_sample, 8 | 16 | 24 | 32) {
                return Err(Error::UnsupportedFormat(
                    path.into(),
                    format!("{}-bit integer PCM", spec.bits_per_sample),
                ));
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedFormat(
                    path.into(),
                    format!("{}-bit float", spec.bits_per_sample),
                ));
            }
            let raw: Vec<f32> = reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?;
            if raw.iter().any(|x| !x.is_finite()) {
                return Err(Error::CorruptFile(path.into(), "non-finite sample".into()));
            }
            raw.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect()
        }
    };
    let channels = spec.channels as usize;
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|c| c.iter().map(|&x| x as f64).sum::<f64>() as f32 / channels as f32)
            .collect()
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.into()));
    }
    Ok(AudioClip {
        clip_id: clip_id_of(path),
        sample_rate: spec.sample_rate,
        samples,
        source_path: path.display().to_string(),
    })
}

pub(crate) fn clip_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::io(path, io)
        }
        hound::Error::IoError(io) => Error::CorruptFile(path.into(), io.to_string()),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat(path.into(), "not integer or float PCM".into())
        }
        hound::Error::FormatError(msg) => Error::CorruptFile(path.into(), msg.into()),
        other => Error::CorruptFile(path.into(), other.to_string()),
    }
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let tmp = tmp_path(path);
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::CorruptFile(path.into(), other.to_string()),
    };
    let mut writer = hound::WavWriter::create(&tmp, spec).map_err(to_err)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

// Windowed-sinc interpolation with a Kaiser window: 64 zero crossings,
// beta ≈ 14.77, passband edge at 94.76% of the lower Nyquist frequency.
const ZERO_CROSSINGS: usize = 64;
const KAISER_BETA: f64 = 14.769_656_459_379_492;
const ROLLOFF: f64 = 0.947_593_716_739_959_6;
const TABLE_DENSITY: usize = 512;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Half of the symmetric interpolation filter, sampled `TABLE_DENSITY`
/// times per zero crossing.
fn sinc_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ZERO_CROSSINGS * TABLE_DENSITY;
        let norm = bessel_i0(KAISER_BETA);
        (0..=n)
            .map(|i| {
                let x = i as f64 / TABLE_DENSITY as f64;
                let sinc = if i == 0 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                let u = x / ZERO_CROSSINGS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / norm;
                sinc * window
            })
            .collect()
    })
}

#[inline]
fn interp(table: &[f64], x: f64) -> f64 {
    let pos = x * TABLE_DENSITY as f64;
    let i = pos as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - i as f64;
    table[i] + frac * (table[i + 1] - table[i])
}

/// Band-limited sample-rate conversion. The output has
/// `round(len * target / source)` samples; equal rates return the input
/// unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate < 8000 {
        return Err(Error::InvalidArgument(format!(
            "target rate {target_rate} Hz is below 8000 Hz"
        )));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let in_len = clip.samples.len();
    let out_len = ((in_len as f64 * dst / src).round() as usize).max(1);
    let scale = (dst / src).min(1.0) * ROLLOFF;
    let half_width = ZERO_CROSSINGS as f64 / scale;
    let table = sinc_table();
    let x = &clip.samples;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * src / dst;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(in_len - 1);
            let mut acc = 0.0;
            for (i, &s) in x.iter().enumerate().take(hi + 1).skip(lo) {
                acc += s as f64 * interp(table, (scale * (t - i as f64)).abs());
            }
            ((acc * scale) as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(AudioClip {
        clip_id: clip.clip_id.clone(),
        sample_rate: target_rate,
        samples,
        source_path: clip.source_path.clone(),
    })
}

/// Resamples to 16 kHz.
pub fn canonicalize(clip: &AudioClip) -> Result<AudioClip> {
    resample(clip, SAMPLE_RATE)
}
