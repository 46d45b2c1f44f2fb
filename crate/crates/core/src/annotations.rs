//! Call annotations and frame-level label tracks.
//!
//! Annotations are time spans tagged with a call type. They are rasterized
//! onto the 20 ms frame grid: a frame takes a span's class when the frame
//! midpoint falls inside the half-open span. Class 0 is always "no call".

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio::{FrameGrid, FRAME_SECONDS};
use crate::error::{Error, Result};
use crate::features::write_atomic;

pub const NON_CALL: &str = "none";
pub const BINARY_CALL: &str = "call";

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationUnit {
    pub clip_id: String,
    pub start: f64,
    pub end: f64,
    pub call_type: String,
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationUnit>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text)
}

/// Parses TSV with header `clip_id  start  end  label` (tab separated).
pub fn parse_annotations_str(text: &str) -> Result<Vec<AnnotationUnit>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "missing header".into(),
        });
    };
    let header: Vec<&str> = header.split('\t').map(str::trim).collect();
    if header != ["clip_id", "start", "end", "label"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header clip_id\\tstart\\tend\\tlabel, found {header:?}"),
        });
    }
    let mut units = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let mut fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            fields = line.split_whitespace().collect();
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line: line_no,
                    message: format!("bad {what} {s:?}"),
                }),
            }
        };
        let start = num(fields[1], "start")?;
        let end = num(fields[2], "end")?;
        if start < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("negative start {start}"),
            });
        }
        if end <= start {
            return Err(Error::NegativeSpan {
                line: line_no,
                start,
                end,
            });
        }
        if fields[0].is_empty() || fields[3].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty clip id or label".into(),
            });
        }
        units.push(AnnotationUnit {
            clip_id: fields[0].to_string(),
            start,
            end,
            call_type: fields[3].to_string(),
        });
    }
    check_overlaps(&units)?;
    Ok(units)
}

fn check_overlaps(units: &[AnnotationUnit]) -> Result<()> {
    let mut by_clip: HashMap<&str, Vec<&AnnotationUnit>> = HashMap::new();
    for u in units {
        by_clip.entry(&u.clip_id).or_default().push(u);
    }
    let mut clips: Vec<_> = by_clip.into_iter().collect();
    clips.sort_by(|a, b| a.0.cmp(b.0));
    for (clip, mut spans) in clips {
        spans.sort_by(|a, b| a.start.total_cmp(&b.start));
        for pair in spans.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::Overlap {
                    clip: clip.to_string(),
                    a_start: pair[0].start,
                    a_end: pair[0].end,
                    b_start: pair[1].start,
                    b_end: pair[1].end,
                });
            }
        }
    }
    Ok(())
}

pub fn format_annotations(units: &[AnnotationUnit]) -> String {
    let mut out = String::from("clip_id\tstart\tend\tlabel\n");
    for u in units {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", u.clip_id, u.start, u.end, u.call_type));
    }
    out
}

/// Call types in index order; class k (1-based) is `types[k - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocab {
    types: Vec<String>,
}

impl ClassVocab {
    pub fn new(types: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &types {
            if t == NON_CALL || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("call type {t:?} is reserved or repeated")));
            }
        }
        Ok(ClassVocab { types })
    }

    /// `{call: 1}`
    pub fn binary() -> Self {
        ClassVocab {
            types: vec![BINARY_CALL.to_string()],
        }
    }

    /// Number of call classes C, excluding non-call.
    pub fn num_calls(&self) -> usize {
        self.types.len()
    }

    /// C + 1.
    pub fn num_classes(&self) -> usize {
        self.types.len() + 1
    }

    pub fn index_of(&self, call_type: &str) -> Option<usize> {
        self.types.iter().position(|t| t == call_type).map(|i| i + 1)
    }

    pub fn name(&self, index: usize) -> &str {
        if index == 0 {
            NON_CALL
        } else {
            &self.types[index - 1]
        }
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn is_binary(&self) -> bool {
        self.types.len() == 1 && self.types[0] == BINARY_CALL
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("vocab serializes");
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }
}

impl Serialize for ClassVocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.types.len() + 1))?;
        map.serialize_entry(NON_CALL, &0)?;
        for (i, t) in self.types.iter().enumerate() {
            map.serialize_entry(t, &(i + 1))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ClassVocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw: BTreeMap<String, usize> = BTreeMap::deserialize(d)?;
        if raw.get(NON_CALL) != Some(&0) {
            return Err(D::Error::custom("vocab must map \"none\" to 0"));
        }
        let mut by_index: Vec<(usize, String)> = raw
            .into_iter()
            .filter(|(k, _)| k != NON_CALL)
            .map(|(k, v)| (v, k))
            .collect();
        by_index.sort();
        for (expect, (idx, name)) in by_index.iter().enumerate() {
            if *idx != expect + 1 {
                return Err(D::Error::custom(format!(
                    "class indices must be contiguous from 1; {name:?} has {idx}"
                )));
            }
        }
        Ok(ClassVocab {
            types: by_index.into_iter().map(|(_, n)| n).collect(),
        })
    }
}

/// Distinct call types sorted lexicographically and numbered from 1.
pub fn build_vocab(units: &[AnnotationUnit]) -> Result<ClassVocab> {
    let types: BTreeSet<&str> = units.iter().map(|u| u.call_type.as_str()).collect();
    ClassVocab::new(types.into_iter().map(String::from).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelTrack {
    pub clip_id: String,
    pub labels: Vec<usize>,
    pub vocab: ClassVocab,
}

impl LabelTrack {
    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }

    /// Frame counts per class index 0..=C.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Midpoint of frame `t` in seconds, computed so that it compares exactly
/// against decimal timestamps such as `0.51`.
#[inline]
fn frame_midpoint(t: usize) -> f64 {
    (2 * t + 1) as f64 / 100.0
}

pub fn rasterize(units: &[AnnotationUnit], grid: &FrameGrid, vocab: &ClassVocab) -> Result<LabelTrack> {
    let mut labels = vec![0; grid.num_frames];
    let duration = grid.duration();
    for u in units {
        if u.clip_id != grid.clip_id {
            return Err(Error::InvalidArgument(format!(
                "annotation for clip {} rasterized onto clip {}",
                u.clip_id, grid.clip_id
            )));
        }
        if u.end > duration + FRAME_SECONDS + 1e-9 {
            return Err(Error::SpanPastEnd {
                clip: u.clip_id.clone(),
                end: u.end,
                duration,
            });
        }
        let class = vocab
            .index_of(&u.call_type)
            .ok_or_else(|| Error::UnknownClass(u.call_type.clone()))?;
        let first = ((u.start / FRAME_SECONDS).floor() as usize).saturating_sub(1);
        for (t, label) in labels.iter_mut().enumerate().skip(first) {
            let mid = frame_midpoint(t);
            if mid >= u.end {
                break;
            }
            if mid >= u.start {
                *label = class;
            }
        }
    }
    Ok(LabelTrack {
        clip_id: grid.clip_id.clone(),
        labels,
        vocab: vocab.clone(),
    })
}

/// Collapses every call class to class 1.
pub fn to_binary(track: &LabelTrack) -> LabelTrack {
    LabelTrack {
        clip_id: track.clip_id.clone(),
        labels: track.labels.iter().map(|&l| usize::from(l > 0)).collect(),
        vocab: ClassVocab::binary(),
    }
}

pub fn units_to_binary(units: &[AnnotationUnit]) -> Vec<AnnotationUnit> {
    units
        .iter()
        .map(|u| AnnotationUnit {
            call_type: BINARY_CALL.to_string(),
            ..u.clone()
        })
        .collect()
}

const APEL_MAGIC: &[u8; 4] = b"APEL";
const APEL_VERSION: u32 = 1;
const APEL_HEADER: usize = 16;

pub fn encode_apel(track: &LabelTrack) -> Vec<u8> {
    let mut out = Vec::with_capacity(APEL_HEADER + 2 * track.labels.len());
    out.extend_from_slice(APEL_MAGIC);
    out.extend_from_slice(&APEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(track.labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(track.vocab.num_calls() as u32).to_le_bytes());
    for &l in &track.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out
}

pub fn write_apel(path: impl AsRef<Path>, track: &LabelTrack) -> Result<()> {
    write_atomic(path.as_ref(), &encode_apel(track))
}

/// Reads a label track; its class count must match `vocab`.
pub fn read_apel(path: impl AsRef<Path>, vocab: &ClassVocab) -> Result<LabelTrack> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != APEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "APEL",
        });
    }
    if bytes.len() < APEL_HEADER {
        return Err(Error::CorruptFile(path.into(), "truncated APEL header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != APEL_VERSION as usize {
        return Err(Error::CorruptFile(path.into(), format!("APEL version {}", u32_at(4))));
    }
    let frames = u32_at(8);
    let calls = u32_at(12);
    if calls != vocab.num_calls() {
        return Err(Error::CorruptFile(
            path.into(),
            format!("track has {calls} call classes, vocab has {}", vocab.num_calls()),
        ));
    }
    let payload = &bytes[APEL_HEADER..];
    if payload.len() != 2 * frames {
        return Err(Error::CorruptFile(path.into(), "label payload length".into()));
    }
    let labels: Vec<usize> = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l > calls) {
        return Err(Error::CorruptFile(path.into(), format!("label {bad} exceeds {calls}")));
    }
    Ok(LabelTrack {
        clip_id: crate::audio::clip_id_of(path),
        labels,
        vocab: vocab.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(clip: &str, start: f64, end: f64, t: &str) -> AnnotationUnit {
        AnnotationUnit {
            clip_id: clip.into(),
            start,
            end,
            call_type: t.into(),
        }
    }

    #[test]
    fn parses_rows() {
        let units = parse_annotations_str("clip_id\tstart\tend\tlabel\nc1\t0.50\t1.00\t intro \n\n").unwrap();
        assert_eq!(units, vec![unit("c1", 0.5, 1.0, "intro")]);
        let units = parse_annotations_str("clip_id\tstart\tend\tlabel\nc1  0.50  1.00  intro\n").unwrap();
        assert_eq!(units, vec![unit("c1", 0.5, 1.0, "intro")]);
    }

    #[test]
    fn rejects_bad_rows() {
        let h = "clip_id\tstart\tend\tlabel\n";
        assert!(matches!(
            parse_annotations_str(&format!("{h}c1\t1.0\t0.5\tx\n")),
            Err(Error::NegativeSpan { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations_str(&format!("{h}c1\t0.0\t1.0\tx\nc1\t0.5\t1.5\ty\n")),
            Err(Error::Overlap { .. })
        ));
        assert!(matches!(
            parse_annotations_str(&format!("{h}c1\t0.0\t1.0\tx\nc1\tabc\t1.5\ty\n")),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(parse_annotations_str("a\tb\n"), Err(Error::Parse { line: 1, .. })));
        // touching spans and the same span on different clips are fine
        parse_annotations_str(&format!("{h}c1\t0.0\t1.0\tx\nc1\t1.0\t1.5\ty\nc2\t0.5\t1.5\ty\n")).unwrap();
    }

    #[test]
    fn vocab_is_lexicographic() {
        let units: Vec<_> = ["intro", "climax", "build-up", "let-down", "intro"]
            .iter()
            .map(|t| unit("c", 0.0, 1.0, t))
            .collect();
        let v = build_vocab(&units).unwrap();
        assert_eq!(v.types(), ["build-up", "climax", "intro", "let-down"]);
        assert_eq!(v.index_of("intro"), Some(3));
        assert_eq!(v.num_classes(), 5);
        let single = build_vocab(&[unit("c", 0.0, 1.0, "longcall")]).unwrap();
        assert_eq!(single.index_of("longcall"), Some(1));
        assert_eq!(single.num_calls(), 1);
    }

    #[test]
    fn vocab_json_layout() {
        let v = ClassVocab::new(vec!["b".into(), "a".into()]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"none":0,"b":1,"a":2}"#);
        let back: ClassVocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<ClassVocab>(r#"{"none":0,"a":2}"#).is_err());
        assert!(serde_json::from_str::<ClassVocab>(r#"{"a":1}"#).is_err());
        assert!(ClassVocab::new(vec!["none".into()]).is_err());
    }

    #[test]
    fn midpoint_rule() {
        let vocab = ClassVocab::new(vec!["a".into(), "b".into()]).unwrap();
        let grid = FrameGrid::for_len("c", 320 * 100);
        let track = rasterize(&[unit("c", 0.5, 1.0, "b")], &grid, &vocab).unwrap();
        for (t, &l) in track.labels.iter().enumerate() {
            assert_eq!(l, if (25..50).contains(&t) { 2 } else { 0 }, "frame {t}");
        }
        let empty = rasterize(&[], &grid, &vocab).unwrap();
        assert!(empty.labels.iter().all(|&l| l == 0));
        let full = rasterize(&[unit("c", 0.0, 2.0, "a")], &grid, &vocab).unwrap();
        assert!(full.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn rasterize_errors() {
        let vocab = ClassVocab::new(vec!["a".into()]).unwrap();
        let grid = FrameGrid::for_len("c", 320 * 10);
        assert!(matches!(
            rasterize(&[unit("c", 0.0, 0.25, "a")], &grid, &vocab),
            Err(Error::SpanPastEnd { .. })
        ));
        rasterize(&[unit("c", 0.0, 0.22, "a")], &grid, &vocab).unwrap();
        assert!(matches!(
            rasterize(&[unit("c", 0.0, 0.1, "zz")], &grid, &vocab),
            Err(Error::UnknownClass(_))
        ));
        assert!(rasterize(&[unit("d", 0.0, 0.1, "a")], &grid, &vocab).is_err());
    }

    #[test]
    fn binary_collapse() {
        let vocab = ClassVocab::new((0..18).map(|i| format!("t{i:02}")).collect()).unwrap();
        let track = LabelTrack {
            clip_id: "c".into(),
            labels: vec![0, 3, 2, 0, 18],
            vocab,
        };
        let b = to_binary(&track);
        assert_eq!(b.labels, vec![0, 1, 1, 0, 1]);
        assert_eq!(b.vocab.num_calls(), 1);
        assert!(b.vocab.is_binary());
    }

    #[test]
    fn apel_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.apel");
        let vocab = ClassVocab::new(vec!["a".into(), "b".into()]).unwrap();
        let track = LabelTrack {
            clip_id: "c".into(),
            labels: vec![0, 1, 2, 2, 0],
            vocab: vocab.clone(),
        };
        write_apel(&path, &track).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"APEL");
        assert_eq!(bytes.len(), 16 + 10);
        assert_eq!(read_apel(&path, &vocab).unwrap(), track);
        assert!(read_apel(&path, &ClassVocab::binary()).is_err());
    }

    fn arb_units() -> impl Strategy<Value = (Vec<AnnotationUnit>, usize)> {
        (20usize..200, proptest::collection::vec((0u32..3, 1u32..40, 0u32..30), 0..6)).prop_map(
            |(frames, raw)| {
                let mut units = Vec::new();
                let mut cursor = 0.0;
                for (class, len, gap) in raw {
                    let start = cursor + gap as f64 * 0.013;
                    let end = start + len as f64 * 0.011;
                    if end > frames as f64 * 0.02 {
                        break;
                    }
                    units.push(unit("c", start, end, ["a", "b", "c"][class as usize]));
                    cursor = end;
                }
                (units, frames)
            },
        )
    }

    proptest! {
        #[test]
        fn binary_commutes_with_rasterize((units, frames) in arb_units()) {
            let vocab = ClassVocab::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let grid = FrameGrid::for_len("c", frames * 320);
            let a = to_binary(&rasterize(&units, &grid, &vocab).unwrap());
            let b = rasterize(&units_to_binary(&units), &grid, &ClassVocab::binary()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn class_counts_sum_to_frames((units, frames) in arb_units()) {
            let vocab = ClassVocab::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let track = rasterize(&units, &FrameGrid::for_len("c", frames * 320), &vocab).unwrap();
            prop_assert_eq!(track.class_counts().iter().sum::<usize>(), frames);
        }

        #[test]
        fn enlarging_a_span_never_unmarks(start in 0.0f64..1.0, len in 0.01f64..1.0, grow in 0.0f64..0.5) {
            let vocab = ClassVocab::new(vec!["a".into()]).unwrap();
            let grid = FrameGrid::for_len("c", 320 * 150);
            let small = rasterize(&[unit("c", start, start + len, "a")], &grid, &vocab).unwrap();
            let big_start = (start - grow).max(0.0);
            let big = rasterize(&[unit("c", big_start, start + len + grow, "a")], &grid, &vocab).unwrap();
            for (s, b) in small.labels.iter().zip(&big.labels) {
                prop_assert!(*s == 0 || *b == *s);
            }
        }
    }
}
