//! On-disk datasets: a JSON-lines manifest pointing at one phoneme, landmark
//! and frame file per utterance. Relative paths resolve against the
//! manifest's directory.
//!
//! * phonemes: space-separated tokens on one line
//! * landmarks: one text row of `2 * 117` reals per frame, all zeros for a
//!   missing detection
//! * frames: `T, H, W` as little-endian `i32`, then `T * H * W`
//!   little-endian `f64` values, row-major

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::frames::FrameClip;
use crate::graph::{LandmarkClip, NODE_COUNT};
use crate::synth::Utterance;
use crate::tensor::Tensor;
use crate::vocab::{format_sequence, parse_sequence, PhonemeSequence, Token};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("{path}: {msg}")]
    InvalidFile { path: String, msg: String },
    #[error("utterance {id}: {msg}")]
    InvalidUtterance { id: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ManifestError::MissingFile(path.display().to_string())
        } else {
            ManifestError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    }
}

fn invalid(path: &Path, msg: impl Into<String>) -> ManifestError {
    ManifestError::InvalidFile {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub text: String,
    pub phoneme_file: PathBuf,
    pub landmark_file: PathBuf,
    pub frame_file: PathBuf,
}

/// Parses every record without touching the referenced files.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Records are parsed up front; each utterance's files are read and
/// validated as the iterator reaches it.
pub fn load_manifest(path: &Path) -> Result<impl Iterator<Item = Result<Utterance, ManifestError>>, ManifestError> {
    let records = read_manifest(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(records.into_iter().map(move |r| load_record(&base, &r)))
}

pub fn load_record(base: &Path, rec: &ManifestRecord) -> Result<Utterance, ManifestError> {
    let phonemes = read_phonemes(&base.join(&rec.phoneme_file))?;
    let landmarks = read_landmarks(&base.join(&rec.landmark_file))?;
    let frames = read_frames(&base.join(&rec.frame_file))?;
    let utt = Utterance {
        id: rec.id.clone(),
        words: rec.text.split_whitespace().map(String::from).collect(),
        phonemes,
        landmarks,
        frames,
    };
    validate_utterance(&utt)?;
    Ok(utt)
}

/// Word count matches the boundaries (when no word is unknown), and both
/// streams have the same number of frames.
pub fn validate_utterance(u: &Utterance) -> Result<(), ManifestError> {
    let bad = |msg: String| Err(ManifestError::InvalidUtterance { id: u.id.clone(), msg });
    if !u.phonemes.contains(&Token::UNK) && !u.phonemes.is_empty() {
        let expected = 1 + u.phonemes.iter().filter(|&&t| t == Token::BOUNDARY).count();
        if expected != u.words.len() {
            return bad(format!("{} words but {} boundary-separated groups", u.words.len(), expected));
        }
    }
    if u.landmarks.len() != u.frames.len() {
        return bad(format!("{} landmark frames but {} image frames", u.landmarks.len(), u.frames.len()));
    }
    Ok(())
}

pub fn read_phonemes(path: &Path) -> Result<PhonemeSequence, ManifestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_sequence(&text).map_err(|e| invalid(path, e.to_string()))
}

pub fn write_phonemes(path: &Path, seq: &[Token]) -> Result<(), ManifestError> {
    fs::write(path, format!("{}\n", format_sequence(seq))).map_err(io_err(path))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkClip, ManifestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    LandmarkClip::from_rows(&rows, NODE_COUNT).map_err(|e| invalid(path, e.to_string()))
}

/// Shortest decimal that reads back to the same double.
pub fn write_landmarks(path: &Path, clip: &LandmarkClip) -> Result<(), ManifestError> {
    let mut out = String::new();
    for t in 0..clip.len() {
        let row: Vec<String> = clip.frame_row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_frames(path: &Path) -> Result<FrameClip, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 {
        return Err(invalid(path, "shorter than the 12-byte header"));
    }
    let dim = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (t, h, w) = (dim(0), dim(1), dim(2));
    if t < 0 || h < 0 || w < 0 {
        return Err(invalid(path, format!("negative dimension in header {t}x{h}x{w}")));
    }
    let count = t as usize * h as usize * w as usize;
    if bytes.len() != 12 + 8 * count {
        return Err(invalid(path, format!("header says {t}x{h}x{w} values, payload has {} bytes", bytes.len() - 12)));
    }
    let data = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let tensor = Tensor::new(&[t as usize, h as usize, w as usize], data).map_err(|e| invalid(path, e.to_string()))?;
    FrameClip::new(tensor).map_err(|e| invalid(path, e.to_string()))
}

pub fn write_frames(path: &Path, clip: &FrameClip) -> Result<(), ManifestError> {
    let mut out = Vec::with_capacity(12 + 8 * clip.tensor().len());
    for d in clip.tensor().shape() {
        let d = i32::try_from(*d).map_err(|_| invalid(path, "dimension exceeds i32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in clip.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes `<id>.phn`, `<id>.lmk` and `<id>.frm` next to the manifest and
/// one record per utterance, in order.
pub fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<(), ManifestError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(io_err(&base))?;
    }
    let mut manifest = fs::File::create(path).map_err(io_err(path))?;
    for u in utterances {
        let rec = ManifestRecord {
            id: u.id.clone(),
            text: u.text(),
            phoneme_file: format!("{}.phn", u.id).into(),
            landmark_file: format!("{}.lmk", u.id).into(),
            frame_file: format!("{}.frm", u.id).into(),
        };
        write_phonemes(&base.join(&rec.phoneme_file), &u.phonemes)?;
        write_landmarks(&base.join(&rec.landmark_file), &u.landmarks)?;
        write_frames(&base.join(&rec.frame_file), &u.frames)?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(manifest, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use crate::synth::{generate_corpus, select_words, SentenceGenerator, SynthConfig};

    fn corpus(n: usize) -> Vec<Utterance> {
        let lex = Lexicon::shipped();
        let cfg = SynthConfig {
            landmark_dropout: 0.1,
            ..SynthConfig::default()
        };
        let words = select_words(&lex, 30, 3);
        let gen = SentenceGenerator::new(words, &cfg, 3).unwrap();
        generate_corpus("u", &gen, &lex, &cfg.prototypes().unwrap(), &cfg, n, 11).unwrap()
    }

    #[test]
    fn round_trip_fifty_utterances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data/train.jsonl");
        let utts = corpus(50);
        assert!(utts.iter().any(|u| u.landmarks.valid().iter().any(|v| !v)));
        write_manifest(&path, &utts).unwrap();
        let back: Vec<Utterance> = load_manifest(&path).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(back, utts);
    }

    #[test]
    fn empty_and_malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert_eq!(load_manifest(&path).unwrap().count(), 0);
        fs::write(&path, "{\"id\":\"a\",\"text\":\"A\",\"phoneme_file\":\"a.phn\",\"landmark_file\":\"a.lmk\",\"frame_file\":\"a.frm\"}\nnot json\n").unwrap();
        match read_manifest(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"id\":\"a\",\"text\":\"A\",\"phoneme_file\":\"a.phn\",\"landmark_file\":\"a.lmk\",\"frame_file\":\"a.frm\"}\n").unwrap();
        let first = load_manifest(&path).unwrap().next().unwrap();
        assert!(matches!(first, Err(ManifestError::MissingFile(p)) if p.ends_with("a.phn")));
    }

    #[test]
    fn frame_file_layout_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.frm");
        let clip = FrameClip::new(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.25)).unwrap();
        write_frames(&path, &clip).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 8 * 24);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 0.25);
        assert_eq!(read_frames(&path).unwrap(), clip);
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_frames(&path), Err(ManifestError::InvalidFile { .. })));
    }

    #[test]
    fn word_count_must_match_boundaries() {
        let mut u = corpus(1).remove(0);
        u.words.push("EXTRA".into());
        assert!(matches!(validate_utterance(&u), Err(ManifestError::InvalidUtterance { .. })));
    }
}
