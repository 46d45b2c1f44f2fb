//! Frame-level feature sequences and the APEF feature file format.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{tmp_path, AudioClip, FrameGrid, FRAME_LEN};
use crate::error::{Error, Result};
use crate::nn::tensor::Mat;

pub const SPECTROGRAM_FFT: usize = 400;
pub const WAVEFORM_DIM: usize = FRAME_LEN;
pub const SPECTROGRAM_DIM: usize = SPECTROGRAM_FFT / 2 + 1;
pub const EXTERNAL_DIM: usize = 768;
/// Largest row-count difference tolerated when aligning external features.
pub const EXTERNAL_FRAME_SLACK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Waveform,
    Spectrogram,
    External,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Waveform => WAVEFORM_DIM,
            FeatureKind::Spectrogram => SPECTROGRAM_DIM,
            FeatureKind::External => EXTERNAL_DIM,
        }
    }

    fn code(self) -> u8 {
        match self {
            FeatureKind::Waveform => 0,
            FeatureKind::Spectrogram => 1,
            FeatureKind::External => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Waveform),
            1 => Some(FeatureKind::Spectrogram),
            2 => Some(FeatureKind::External),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Waveform => "waveform",
            FeatureKind::Spectrogram => "spectrogram",
            FeatureKind::External => "external",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waveform" => Ok(FeatureKind::Waveform),
            "spectrogram" => Ok(FeatureKind::Spectrogram),
            "external" => Ok(FeatureKind::External),
            other => Err(Error::InvalidArgument(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// T×D features of one clip; row t describes frame t.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    pub clip_id: String,
    pub kind: FeatureKind,
    pub values: Mat<f32>,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

pub fn waveform_features(clip: &AudioClip, grid: &FrameGrid) -> FrameMatrix {
    let mut data = clip.samples.clone();
    data.truncate(grid.num_frames * FRAME_LEN);
    data.resize(grid.num_frames * FRAME_LEN, 0.0);
    FrameMatrix {
        clip_id: clip.clip_id.clone(),
        kind: FeatureKind::Waveform,
        values: Mat::from_vec(grid.num_frames, FRAME_LEN, data),
    }
}

/// Index into `0..n` after mirroring at both ends without repeating the
/// edge sample, for any offset.
fn reflect_index(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = j.rem_euclid(period);
    if i >= n as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram: centred 400-point STFT with a Hann window and hop 320,
/// reflect-padded at the edges. Column t is centred on the first sample of
/// frame t; the column count is truncated or edge-replicated to `grid`.
pub fn spectrogram_features(clip: &AudioClip, grid: &FrameGrid) -> FrameMatrix {
    let n_fft = SPECTROGRAM_FFT;
    let bins = SPECTROGRAM_DIM;
    let len = clip.samples.len();
    let columns = if len == 0 { 0 } else { 1 + len / FRAME_LEN };
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let half = (n_fft / 2) as isize;
    let mut values = Mat::zeros(grid.num_frames, bins);
    for t in 0..columns.min(grid.num_frames) {
        let start = (t * FRAME_LEN) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = clip.samples[reflect_index(start + i as isize, len)] as f64;
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, x) in values.row_mut(t).iter_mut().zip(&buf[..bins]) {
            *dst = x.norm_sqr() as f32;
        }
    }
    if columns > 0 {
        for t in columns..grid.num_frames {
            let last = values.row(columns - 1).to_vec();
            values.row_mut(t).copy_from_slice(&last);
        }
    }
    FrameMatrix {
        clip_id: clip.clip_id.clone(),
        kind: FeatureKind::Spectrogram,
        values,
    }
}

pub fn compute_features(clip: &AudioClip, grid: &FrameGrid, kind: FeatureKind) -> Result<FrameMatrix> {
    match kind {
        FeatureKind::Waveform => Ok(waveform_features(clip, grid)),
        FeatureKind::Spectrogram => Ok(spectrogram_features(clip, grid)),
        FeatureKind::External => Err(Error::InvalidArgument(
            "external features are produced by the exporter, not computed here".into(),
        )),
    }
}

/// Aligns `m` to `num_frames` rows by truncation or by repeating the last
/// row. Fails when the counts differ by more than `slack`.
pub fn align_rows(m: &FrameMatrix, num_frames: usize, slack: usize) -> Result<FrameMatrix> {
    let have = m.num_frames();
    if have.abs_diff(num_frames) > slack || have == 0 {
        return Err(Error::FrameCountMismatch {
            expected: num_frames,
            found: have,
        });
    }
    let dim = m.dim();
    let mut data = m.values.as_slice().to_vec();
    data.truncate(num_frames * dim);
    while data.len() < num_frames * dim {
        let last = data[data.len() - dim..].to_vec();
        data.extend_from_slice(&last);
    }
    Ok(FrameMatrix {
        clip_id: m.clip_id.clone(),
        kind: m.kind,
        values: Mat::from_vec(num_frames, dim, data),
    })
}

pub fn load_external_features(path: impl AsRef<Path>, grid: &FrameGrid) -> Result<FrameMatrix> {
    let m = read_apef(path)?;
    if m.dim() != EXTERNAL_DIM {
        return Err(Error::DimMismatch {
            expected: EXTERNAL_DIM,
            found: m.dim(),
        });
    }
    align_rows(&m, grid.num_frames, EXTERNAL_FRAME_SLACK)
}

const APEF_MAGIC: &[u8; 4] = b"APEF";
const APEF_VERSION: u32 = 1;
const APEF_HEADER: usize = 20;

pub fn encode_apef(m: &FrameMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(APEF_HEADER + m.values.len() * 4);
    out.extend_from_slice(APEF_MAGIC);
    out.extend_from_slice(&APEF_VERSION.to_le_bytes());
    out.push(m.kind.code());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(m.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for v in m.values.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_apef(bytes: &[u8], path: &Path) -> Result<FrameMatrix> {
    if bytes.len() < 4 || &bytes[..4] != APEF_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "APEF",
        });
    }
    if bytes.len() < APEF_HEADER {
        return Err(Error::CorruptFile(path.into(), "truncated APEF header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != APEF_VERSION {
        return Err(Error::CorruptFile(path.into(), format!("APEF version {version}")));
    }
    let kind = FeatureKind::from_code(bytes[8])
        .ok_or_else(|| Error::CorruptFile(path.into(), format!("feature kind code {}", bytes[8])))?;
    let rows = u32_at(12) as usize;
    let cols = u32_at(16) as usize;
    let payload = &bytes[APEF_HEADER..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::CorruptFile(
            path.into(),
            format!("{rows}x{cols} matrix needs {} bytes, found {}", rows * cols * 4, payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::CorruptFile(path.into(), "non-finite feature value".into()));
    }
    Ok(FrameMatrix {
        clip_id: crate::audio::clip_id_of(path),
        kind,
        values: Mat::from_vec(rows, cols, data),
    })
}

pub fn read_apef(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_apef(&bytes, path)
}

pub fn write_apef(path: impl AsRef<Path>, m: &FrameMatrix) -> Result<()> {
    write_atomic(path.as_ref(), &encode_apef(m))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new("c", SAMPLE_RATE, samples)
    }

    fn grid_of(c: &AudioClip) -> FrameGrid {
        FrameGrid::for_len(&c.clip_id, c.samples.len())
    }

    #[test]
    fn waveform_copy_and_padding() {
        let c = clip(vec![0.5; 640]);
        let m = waveform_features(&c, &grid_of(&c));
        assert_eq!(m.values.shape(), (2, 320));
        assert!(m.values.as_slice().iter().all(|&x| x == 0.5));

        let c = clip((0..400).map(|i| i as f32 / 400.0).collect());
        let m = waveform_features(&c, &grid_of(&c));
        assert_eq!(m.values.shape(), (2, 320));
        assert!(m.values.row(1)[80..].iter().all(|&x| x == 0.0));
        assert_eq!(&m.values.as_slice()[..400], &c.samples[..]);
    }

    #[test]
    fn zero_clip_has_zero_spectrogram() {
        let c = clip(vec![0.0; 5000]);
        let m = spectrogram_features(&c, &grid_of(&c));
        assert_eq!(m.values.shape(), (16, 201));
        assert!(m.values.as_slice().iter().all(|&x| x == 0.0));
    }

    /// Plain O(N²) DFT power of one window, independent of rustfft.
    fn dft_power(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn sine_peak_lands_in_expected_bin() {
        let c = clip(
            (0..16000)
                .map(|n| (0.3 * (2.0 * std::f64::consts::PI * 2000.0 * n as f64 / 16000.0).sin()) as f32)
                .collect(),
        );
        let m = spectrogram_features(&c, &grid_of(&c));
        let mut mean = vec![0.0f64; 201];
        for t in 0..m.num_frames() {
            for (acc, &v) in mean.iter_mut().zip(m.values.row(t)) {
                *acc += v as f64;
            }
        }
        let argmax = (0..201).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(argmax, 50);

        // frame 10 is centred at sample 3200, far from the edges
        let w = hann(400);
        let window: Vec<f64> = (0..400).map(|i| c.samples[3000 + i] as f64 * w[i]).collect();
        let reference = dft_power(&window);
        for (a, b) in m.values.row(10).iter().zip(&reference) {
            assert!((*a as f64 - b).abs() <= 1e-3 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn parseval_on_one_window() {
        let c = clip((0..2000).map(|i| (i as f32 * 0.37).sin() * 0.4 + (i as f32 * 0.05).cos() * 0.2).collect());
        let m = spectrogram_features(&c, &grid_of(&c));
        let w = hann(400);
        let t = 3;
        let energy: f64 = (0..400)
            .map(|i| {
                let v = c.samples[t * 320 - 200 + i] as f64 * w[i];
                v * v
            })
            .sum();
        let weighted: f64 = m
            .values
            .row(t)
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == 0 || k == 200 { p as f64 } else { 2.0 * p as f64 })
            .sum();
        let rel = (weighted / 400.0 - energy).abs() / energy;
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn spectrogram_rows_match_grid_for_short_and_odd_lengths() {
        for len in [1, 2, 199, 200, 201, 319, 320, 321, 16000, 16100] {
            let c = clip(vec![0.1; len]);
            let g = grid_of(&c);
            let m = spectrogram_features(&c, &g);
            assert_eq!(m.num_frames(), g.num_frames, "len {len}");
            assert!(m.values.as_slice().iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    fn external(rows: usize, dim: usize) -> FrameMatrix {
        FrameMatrix {
            clip_id: "c".into(),
            kind: FeatureKind::External,
            values: Mat::from_vec(rows, dim, (0..rows * dim).map(|i| i as f32).collect()),
        }
    }

    #[test]
    fn external_alignment_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.apef");
        let grid = FrameGrid::for_len("c", 320 * 10);

        write_apef(&path, &external(10, 768)).unwrap();
        assert_eq!(load_external_features(&path, &grid).unwrap(), external(10, 768));

        write_apef(&path, &external(9, 768)).unwrap();
        let m = load_external_features(&path, &grid).unwrap();
        assert_eq!(m.num_frames(), 10);
        assert_eq!(m.values.row(9), m.values.row(8));

        write_apef(&path, &external(12, 768)).unwrap();
        let m = load_external_features(&path, &grid).unwrap();
        assert_eq!(m.values.as_slice(), &external(12, 768).values.as_slice()[..10 * 768]);

        write_apef(&path, &external(5, 768)).unwrap();
        assert!(matches!(
            load_external_features(&path, &grid),
            Err(Error::FrameCountMismatch { expected: 10, found: 5 })
        ));

        write_apef(&path, &external(10, 512)).unwrap();
        assert!(matches!(
            load_external_features(&path, &grid),
            Err(Error::DimMismatch { expected: 768, found: 512 })
        ));

        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_external_features(&path, &grid), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn apef_header_layout() {
        let bytes = encode_apef(&external(2, 3));
        assert_eq!(&bytes[..4], b"APEF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 2);
        assert_eq!(&bytes[9..12], &[0, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 6 * 4);
        let back = decode_apef(&bytes, Path::new("c.apef")).unwrap();
        assert_eq!(back, external(2, 3));
        assert!(decode_apef(&bytes[..bytes.len() - 1], Path::new("c.apef")).is_err());
    }
}
