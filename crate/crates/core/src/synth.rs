//! Synthetic corpora: low-level noise with amplitude-modulated tones whose
//! pitch identifies the call class.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg32;

use crate::annotations::{format_annotations, AnnotationUnit, ClassVocab};
use crate::audio::{write_wav, AudioClip, FRAME_LEN, FRAME_SECONDS, SAMPLE_RATE};
use crate::dataset::{seeded_pcg, ClipEntry, CorpusManifest};
use crate::error::{Error, Result};
use crate::features::{write_atomic, FeatureKind};

pub const MAX_CLASSES: usize = 8;
pub const MIN_CLIPS: usize = 5;

const NOISE_STD: f64 = 0.005;
const MIN_FRAMES: usize = 150;
const MAX_FRAMES: usize = 500;
const MIN_CALL_FRAMES: usize = 10;
const MAX_CALL_FRAMES: usize = 50;
const MIN_GAP_FRAMES: usize = 5;
const MODULATION_HZ: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_clips: usize,
    pub num_classes: usize,
    pub feature_kind: FeatureKind,
    /// Maximum shift, in seconds, applied independently to each annotated
    /// boundary; at most 0.1. The audio keeps the true spans.
    pub boundary_noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, num_clips: usize, num_classes: usize) -> Self {
        SynthConfig {
            seed,
            num_clips,
            num_classes,
            feature_kind: FeatureKind::Spectrogram,
            boundary_noise: 0.0,
        }
    }
}

/// Paths of a generated corpus and the spans actually rendered.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub vocab: ClassVocab,
    pub true_units: Vec<AnnotationUnit>,
    pub written_units: Vec<AnnotationUnit>,
}

/// Name of call class `k` (1-based).
pub fn class_name(k: usize) -> String {
    format!("call{k}")
}

/// Carrier frequency of call class `k` (1-based).
pub fn class_frequency(k: usize) -> f64 {
    500.0 + 700.0 * k as f64
}

/// Writes `wav/`, `annotations.tsv`, `vocab.json` and `manifest.json` under
/// `out_dir`. The manifest points at `features/` and `labels/`, which the
/// featurize and annotate steps fill in.
pub fn synth(out_dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if !(1..=MAX_CLASSES).contains(&cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {}",
            cfg.num_classes
        )));
    }
    if cfg.num_clips < MIN_CLIPS {
        return Err(Error::InvalidArgument(format!(
            "num_clips must be at least {MIN_CLIPS}, got {}",
            cfg.num_clips
        )));
    }
    let max_noise = MIN_GAP_FRAMES as f64 * FRAME_SECONDS;
    if !(0.0..=max_noise).contains(&cfg.boundary_noise) {
        return Err(Error::InvalidArgument(format!(
            "boundary noise must lie in [0, {max_noise}] seconds"
        )));
    }
    let out = out_dir.as_ref();
    for sub in ["wav", "features", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let vocab = ClassVocab::new((1..=cfg.num_classes).map(class_name).collect())?;
    let mut rng = seeded_pcg(cfg.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");

    let mut true_units = Vec::new();
    let mut written_units = Vec::new();
    let mut clips = Vec::with_capacity(cfg.num_clips);
    for i in 0..cfg.num_clips {
        let id = format!("clip{i:03}");
        let frames = rng.random_range(MIN_FRAMES..=MAX_FRAMES);
        let len = (frames - 1) * FRAME_LEN + rng.random_range(1..=FRAME_LEN);
        let mut samples: Vec<f64> = (0..len).map(|_| noise.sample(&mut rng)).collect();

        let spans = place_spans(&mut rng, frames);
        let mut units = Vec::with_capacity(spans.len());
        for &(start, end) in &spans {
            let k = rng.random_range(1..=cfg.num_classes);
            let amp = rng.random_range(0.01..0.02);
            render_call(&mut samples, start * FRAME_LEN, (end * FRAME_LEN).min(len), k, amp);
            units.push(AnnotationUnit {
                clip_id: id.clone(),
                start: round_cs(start as f64 * FRAME_SECONDS),
                end: round_cs(end as f64 * FRAME_SECONDS),
                call_type: class_name(k),
            });
        }
        let duration = len as f64 / SAMPLE_RATE as f64;
        let noisy = jitter(&mut rng, &units, cfg.boundary_noise, duration);
        true_units.extend(units);
        written_units.extend(noisy);

        let clip = AudioClip::new(
            id.clone(),
            SAMPLE_RATE,
            samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect(),
        );
        write_wav(out.join("wav").join(format!("{id}.wav")), &clip)?;
        clips.push(ClipEntry {
            wav: PathBuf::from(format!("wav/{id}.wav")),
            apef: PathBuf::from(format!("features/{id}.apef")),
            apel: PathBuf::from(format!("labels/{id}.apel")),
            id,
        });
    }

    let annotations = out.join("annotations.tsv");
    write_atomic(&annotations, format_annotations(&written_units).as_bytes())?;
    vocab.save(out.join("vocab.json"))?;
    let manifest = CorpusManifest {
        name: format!("synth-{}", cfg.seed),
        feature_kind: cfg.feature_kind,
        vocab_path: PathBuf::from("vocab.json"),
        clips,
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SynthCorpus {
        manifest: manifest_path,
        annotations,
        vocab,
        true_units,
        written_units,
    })
}

/// Up to four non-overlapping frame spans `[start, end)` with gaps between
/// them, in time order.
fn place_spans(rng: &mut Pcg32, frames: usize) -> Vec<(usize, usize)> {
    let wanted = rng.random_range(1..=4);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while spans.len() < wanted && attempts < 100 {
        attempts += 1;
        let dur = rng.random_range(MIN_CALL_FRAMES..=MAX_CALL_FRAMES);
        let start = rng.random_range(0..=frames - dur);
        let end = start + dur;
        let clear = spans
            .iter()
            .all(|&(s, e)| end + MIN_GAP_FRAMES <= s || e + MIN_GAP_FRAMES <= start);
        if clear {
            spans.push((start, end));
        }
    }
    spans.sort_unstable();
    spans
}

/// Adds a tone with a slow amplitude modulation and 5 ms raised-cosine
/// ramps to `samples[start..end]`.
fn render_call(samples: &mut [f64], start: usize, end: usize, class: usize, amp: f64) {
    let freq = class_frequency(class);
    let rate = SAMPLE_RATE as f64;
    let ramp = (0.005 * rate) as usize;
    let n = end - start;
    for (i, s) in samples[start..end].iter_mut().enumerate() {
        let t = i as f64 / rate;
        let edge = i.min(n - 1 - i);
        let env = if edge < ramp {
            0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let am = 0.75 + 0.25 * (2.0 * PI * MODULATION_HZ * t).sin();
        *s += amp * env * am * (2.0 * PI * freq * t).sin();
    }
}

/// Shifts every boundary by up to `max_shift` seconds, keeping spans
/// non-empty, inside the clip and non-overlapping.
fn jitter(rng: &mut Pcg32, units: &[AnnotationUnit], max_shift: f64, duration: f64) -> Vec<AnnotationUnit> {
    if max_shift == 0.0 {
        return units.to_vec();
    }
    let mut out: Vec<AnnotationUnit> = Vec::with_capacity(units.len());
    for (i, u) in units.iter().enumerate() {
        let lo = out.last().map_or(0.0, |p| p.end);
        let hi = units.get(i + 1).map_or(duration, |n| n.start - max_shift);
        let mut start = round_cs(u.start + rng.random_range(-max_shift..=max_shift)).max(lo);
        let mut end = round_cs(u.end + rng.random_range(-max_shift..=max_shift)).min(hi.max(lo));
        if end - start < 0.02 {
            start = u.start.max(lo);
            end = u.end.min(hi.max(start + 0.02));
        }
        out.push(AnnotationUnit {
            start: round_cs(start),
            end: round_cs(end),
            ..u.clone()
        });
    }
    out
}

/// Rounds to 10 ms so timestamps print and parse exactly.
fn round_cs(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::parse_annotations;

    #[test]
    fn argument_checks() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth(dir.path(), &SynthConfig::new(1, 5, 0)).is_err());
        assert!(synth(dir.path(), &SynthConfig::new(1, 5, 9)).is_err());
        assert!(synth(dir.path(), &SynthConfig::new(1, 4, 2)).is_err());
    }

    #[test]
    fn spans_are_frame_aligned_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth(dir.path(), &SynthConfig::new(7, 6, 3)).unwrap();
        assert_eq!(c.vocab.num_classes(), 4);
        let parsed = parse_annotations(&c.annotations).unwrap();
        assert_eq!(parsed, c.true_units);
        for u in &c.true_units {
            let (s, e) = (u.start / FRAME_SECONDS, u.end / FRAME_SECONDS);
            assert!((s - s.round()).abs() < 1e-9 && (e - e.round()).abs() < 1e-9);
            assert!(u.end - u.start >= 0.2 - 1e-9 && u.end - u.start <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn noisy_boundaries_stay_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(3, 8, 2);
        cfg.boundary_noise = 0.06;
        let c = synth(dir.path(), &cfg).unwrap();
        let parsed = parse_annotations(&c.annotations).unwrap();
        assert_eq!(parsed.len(), c.true_units.len());
        assert_ne!(parsed, c.true_units);
        for (n, t) in parsed.iter().zip(&c.true_units) {
            assert!(n.end > n.start);
            assert!((n.start - t.start).abs() <= 0.06 + 1e-9);
        }
    }
}
