use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor};
use super::{BreakAnnotation, Lexicon, MelSpectrogram, PitchPlan, Utterance};
use crate::error::{Error, Result};
use crate::pitch::PitchContour;

pub const MANIFEST_VERSION: &str = "pfm-corpus-1";
pub const ANNOTATION_VERSION: &str = "pfm-annotation-1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub version: String,
    pub id: String,
    pub mel: String,
    pub pitch: String,
    pub annotation: String,
    pub speaker_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub version: String,
    pub entries: Vec<ManifestEntry>,
    /// Path of the `manifest.jsonl` file.
    pub path: PathBuf,
}

impl CorpusManifest {
    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    version: String,
    id: String,
    words: Vec<String>,
    phones: Vec<usize>,
    word_spans: Vec<(usize, usize)>,
    speaker_id: usize,
    breaks: BreakAnnotation,
    pitch_plans: Vec<PitchPlan>,
    frame_word_alignment: Vec<i64>,
    frame_phone_alignment: Vec<i64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one utterance's mel, pitch and annotation files under `dir`.
pub fn save_utterance(dir: impl AsRef<Path>, utt: &Utterance) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    for sub in ["mels", "pitch", "annotations"] {
        create_dir(&dir.join(sub))?;
    }
    let entry = ManifestEntry {
        version: MANIFEST_VERSION.into(),
        id: utt.id.clone(),
        mel: format!("mels/{}.pfm", utt.id),
        pitch: format!("pitch/{}.json", utt.id),
        annotation: format!("annotations/{}.json", utt.id),
        speaker_id: utt.speaker_id,
        text: utt.text(),
    };
    write_tensor(dir.join(&entry.mel), &utt.mel.data)?;
    utt.pitch.write_json(dir.join(&entry.pitch))?;
    let ann = AnnotationFile {
        version: ANNOTATION_VERSION.into(),
        id: utt.id.clone(),
        words: utt.words.clone(),
        phones: utt.phones.clone(),
        word_spans: utt.word_spans.clone(),
        speaker_id: utt.speaker_id,
        breaks: utt.breaks.clone(),
        pitch_plans: utt.pitch_plans.clone(),
        frame_word_alignment: utt.frame_word_alignment.clone(),
        frame_phone_alignment: utt.frame_phone_alignment.clone(),
    };
    write_json(&dir.join(&entry.annotation), &ann)?;
    Ok(entry)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in sorted {
        let line = serde_json::to_string(e).map_err(|err| Error::json(path, err))?;
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

/// Writes every utterance, the lexicon and the manifest.
pub fn save_corpus(dir: impl AsRef<Path>, lexicon: &Lexicon, utterances: &[Utterance]) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let entries = utterances
        .iter()
        .map(|u| save_utterance(dir, u))
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(LEXICON_FILE), lexicon)?;
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &entries)?;
    read_manifest(&path)
}

/// Parses and validates a manifest (ids unique, files present).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::Manifest(format!("{}:{}: {err}", path.display(), n + 1)))?;
        entries.push(e);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Manifest(format!("duplicate utterance id {}", e.id)));
        }
        if e.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("{}: unsupported version {}", e.id, e.version)));
        }
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION.into(),
        entries,
        path: path.to_path_buf(),
    };
    for e in &manifest.entries {
        for rel in [&e.mel, &e.pitch, &e.annotation] {
            if !manifest.dir().join(rel).is_file() {
                return Err(Error::Load {
                    id: e.id.clone(),
                    reason: format!("missing file {rel}"),
                });
            }
        }
    }
    Ok(manifest)
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<Utterance> {
    let fail = |reason: String| Error::Load {
        id: e.id.clone(),
        reason,
    };
    let mel = read_tensor(dir.join(&e.mel)).map_err(|err| fail(err.to_string()))?;
    let mel = MelSpectrogram::new(mel).map_err(|err| fail(err.to_string()))?;
    let pitch = PitchContour::read_json(dir.join(&e.pitch)).map_err(|err| fail(err.to_string()))?;
    let ann_path = dir.join(&e.annotation);
    let text = fs::read_to_string(&ann_path).map_err(|err| fail(err.to_string()))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|err| fail(err.to_string()))?;
    if ann.id != e.id {
        return Err(fail(format!("annotation id {} does not match", ann.id)));
    }
    if ann.speaker_id != e.speaker_id {
        return Err(fail("speaker id differs between manifest and annotation".into()));
    }
    let utt = Utterance {
        id: e.id.clone(),
        words: ann.words,
        phones: ann.phones,
        word_spans: ann.word_spans,
        speaker_id: ann.speaker_id,
        mel,
        pitch,
        breaks: ann.breaks,
        frame_word_alignment: ann.frame_word_alignment,
        frame_phone_alignment: ann.frame_phone_alignment,
        pitch_plans: ann.pitch_plans,
    };
    if utt.text() != e.text {
        return Err(fail("manifest text differs from annotation words".into()));
    }
    utt.validate()?;
    Ok(utt)
}

/// Loads every utterance of a manifest, sorted by id.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let manifest = read_manifest(manifest_path)?;
    manifest.entries.iter().map(|e| load_entry(manifest.dir(), e)).collect()
}

/// Reads `lexicon.json` next to a manifest.
pub fn load_lexicon(manifest_path: impl AsRef<Path>) -> Result<Lexicon> {
    let dir = manifest_path.as_ref().parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join(LEXICON_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}
