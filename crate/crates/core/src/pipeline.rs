//! Corpus-level steps shared by the command line and the tests: audio
//! conversion, feature files and label files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::annotations::{build_vocab, parse_annotations, rasterize, write_apel, AnnotationUnit, ClassVocab};
use crate::audio::{canonicalize, frame_grid, load_wav, write_wav};
use crate::dataset::{Corpus, CorpusManifest};
use crate::error::{Error, Result};
use crate::features::{compute_features, write_apef, FeatureKind};

/// Canonicalizes every `.wav` directly inside `in_dir` into `out_dir`,
/// keeping file names. Returns the written paths in name order.
pub fn prep_dir(in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(in_dir)
        .map_err(|e| Error::io(in_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    inputs.sort();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    inputs
        .par_iter()
        .map(|p| {
            let clip = canonicalize(&load_wav(p)?)?;
            let dst = out_dir.join(p.file_name().expect("file has a name"));
            write_wav(&dst, &clip)?;
            Ok(dst)
        })
        .collect()
}

/// Reads a manifest without resolving the vocabulary, for steps that run
/// before it exists.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Writes one feature file per clip. With `kind` set the manifest's feature
/// kind is updated first. External features cannot be computed here; their
/// absence is reported as a missing file.
pub fn featurize_corpus(manifest_path: &Path, kind: Option<FeatureKind>) -> Result<Vec<PathBuf>> {
    let mut manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    if let Some(k) = kind {
        if k != manifest.feature_kind {
            manifest.feature_kind = k;
            manifest.save(manifest_path)?;
        }
    }
    let kind = manifest.feature_kind;
    if kind == FeatureKind::External {
        for c in &manifest.clips {
            let apef = resolve(root, &c.apef);
            if !apef.exists() {
                return Err(Error::MissingFile {
                    clip: c.id.clone(),
                    path: apef,
                });
            }
        }
        return Ok(Vec::new());
    }
    manifest
        .clips
        .par_iter()
        .map(|c| {
            let mut clip = load_wav(resolve(root, &c.wav))?;
            if !clip.is_canonical() {
                clip = canonicalize(&clip)?;
            }
            clip.clip_id = c.id.clone();
            let grid = frame_grid(&clip)?;
            let m = compute_features(&clip, &grid, kind)?;
            let dst = resolve(root, &c.apef);
            if let Some(dir) = dst.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_apef(&dst, &m)?;
            Ok(dst)
        })
        .collect()
}

/// Rasterizes `annotations` onto every clip of the manifest and writes the
/// label files. The vocabulary file is created from the annotations when
/// missing.
pub fn annotate_corpus(manifest_path: &Path, annotations: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let units = parse_annotations(annotations)?;
    let vocab_path = resolve(root, &manifest.vocab_path);
    let vocab = if vocab_path.exists() {
        ClassVocab::load(&vocab_path)?
    } else {
        let v = build_vocab(&units)?;
        v.save(&vocab_path)?;
        v
    };
    let ids: HashSet<&str> = manifest.clips.iter().map(|c| c.id.as_str()).collect();
    let mut by_clip: BTreeMap<&str, Vec<AnnotationUnit>> = BTreeMap::new();
    for u in &units {
        if !ids.contains(u.clip_id.as_str()) {
            return Err(Error::UnknownClip(u.clip_id.clone()));
        }
        by_clip.entry(u.clip_id.as_str()).or_default().push(u.clone());
    }
    manifest
        .clips
        .par_iter()
        .map(|c| {
            let mut clip = load_wav(resolve(root, &c.wav))?;
            if !clip.is_canonical() {
                clip = canonicalize(&clip)?;
            }
            clip.clip_id = c.id.clone();
            let grid = frame_grid(&clip)?;
            let spans = by_clip.get(c.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let track = rasterize(spans, &grid, &vocab)?;
            let dst = resolve(root, &c.apel);
            if let Some(dir) = dst.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_apel(&dst, &track)?;
            Ok(dst)
        })
        .collect()
}

/// Featurizes and labels a manifest in one go, then loads it.
pub fn build_corpus(manifest_path: &Path, annotations: &Path) -> Result<Corpus> {
    featurize_corpus(manifest_path, None)?;
    annotate_corpus(manifest_path, annotations)?;
    Corpus::load(manifest_path)
}
