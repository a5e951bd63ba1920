//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns plain strings (JSON for structured
//! results) so the page needs no generated TypeScript glue beyond the
//! wasm-bindgen loader.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use visemic::augment::augment_phonemes;
use visemic::config::LmConfig;
use visemic::decoding::{reconstruct, ReconstructParams};
use visemic::graph::LipGraph;
use visemic::lexicon::Lexicon;
use visemic::lm::NGramLM;
use visemic::synth::{synth_utterance, SynthConfig};
use visemic::text::{g2p, normalize_text};
use visemic::vocab::{format_sequence, parse_sequence};

#[derive(Serialize)]
struct Augmented {
    phonemes: String,
    substituted: usize,
    deleted: usize,
    inserted: usize,
}

#[derive(Serialize)]
struct Hypothesis {
    sentence: String,
    score: f64,
    edit_penalty: f64,
    lm_log_prob: f64,
}

#[derive(Serialize)]
struct Landmarks {
    phonemes: String,
    dwell: usize,
    edges: Vec<(usize, usize)>,
    /// One row of interleaved x, y per frame; empty for a dropped frame.
    frames: Vec<Vec<f64>>,
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

pub fn g2p_text(text: &str) -> Result<String, String> {
    let words = normalize_text(text).map_err(|e| e.to_string())?;
    Ok(format_sequence(&g2p(&words, &Lexicon::shipped())))
}

pub fn augment_json(phonemes: &str, rate: f64, seed: u64) -> Result<String, String> {
    let seq = parse_sequence(phonemes).map_err(|e| e.to_string())?;
    let (noisy, stats) = augment_phonemes(&seq, rate, seed).map_err(|e| e.to_string())?;
    let out = Augmented {
        phonemes: format_sequence(&noisy),
        substituted: stats.substituted,
        deleted: stats.deleted,
        inserted: stats.inserted,
    };
    Ok(serde_json::to_string(&out).expect("serializes"))
}

/// Reconstructs `phonemes` with a lexicon and bigram LM built from the
/// sentence lines in `corpus`.
pub fn reconstruct_json(phonemes: &str, corpus: &str, beam: usize, lm_weight: f64) -> Result<String, String> {
    let seq = parse_sequence(phonemes).map_err(|e| e.to_string())?;
    let sentences = corpus
        .lines()
        .map(normalize_text)
        .filter(|s| !matches!(s, Ok(w) if w.is_empty()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let shipped = Lexicon::shipped();
    let mut words: Vec<&String> = sentences.iter().flatten().collect();
    words.sort();
    words.dedup();
    if let Some(w) = words.iter().find(|w| !shipped.contains(w)) {
        return Err(format!("corpus word {w} is not in the lexicon"));
    }
    let lexicon = shipped.subset(&words);
    let lm_cfg = LmConfig::default();
    let lm = NGramLM::estimate(&sentences, lm_cfg.order, lm_cfg.discount).map_err(|e| e.to_string())?;
    let params = ReconstructParams {
        beam_width: beam,
        lm_weight,
        ..ReconstructParams::default()
    };
    let r = reconstruct(&seq, &lexicon, &lm, &params).map_err(|e| e.to_string())?;
    let nbest: Vec<Hypothesis> = r
        .nbest
        .iter()
        .map(|h| Hypothesis {
            sentence: h.words.join(" "),
            score: h.score,
            edit_penalty: h.edit_penalty,
            lm_log_prob: h.lm_log_prob,
        })
        .collect();
    Ok(serde_json::to_string(&nbest).expect("serializes"))
}

pub fn landmarks_json(text: &str, seed: u64) -> Result<String, String> {
    let words = normalize_text(text).map_err(|e| e.to_string())?;
    let cfg = SynthConfig::default();
    let table = cfg.prototypes().map_err(|e| e.to_string())?;
    let u = synth_utterance("demo", &words, &Lexicon::shipped(), &table, &cfg, seed).map_err(|e| e.to_string())?;
    let graph = LipGraph::canonical(visemic::model::Stage1Config::default().graph_neighbors).map_err(|e| e.to_string())?;
    let lm = &u.landmarks;
    let frames = (0..lm.len())
        .map(|t| if lm.valid()[t] { lm.frame_row(t).to_vec() } else { Vec::new() })
        .collect();
    let out = Landmarks {
        phonemes: format_sequence(&u.phonemes),
        dwell: cfg.dwell,
        edges: graph.edges().to_vec(),
        frames,
    };
    Ok(serde_json::to_string(&out).expect("serializes"))
}

/// Phonemes for a line of text, `_` between words.
#[wasm_bindgen]
pub fn phonemize(text: &str) -> Result<String, JsError> {
    js(g2p_text(text))
}

/// `{phonemes, substituted, deleted, inserted}`.
#[wasm_bindgen]
pub fn augment(phonemes: &str, rate: f64, seed: u32) -> Result<String, JsError> {
    js(augment_json(phonemes, rate, seed as u64))
}

/// N-best list `[{sentence, score, edit_penalty, lm_log_prob}]`, best first.
#[wasm_bindgen(js_name = reconstruct)]
pub fn reconstruct_js(phonemes: &str, corpus: &str, beam: usize, lm_weight: f64) -> Result<String, JsError> {
    js(reconstruct_json(phonemes, corpus, beam, lm_weight))
}

/// `{phonemes, dwell, edges, frames}` for a synthetic clip of `text`.
#[wasm_bindgen]
pub fn landmarks(text: &str, seed: u32) -> Result<String, JsError> {
    js(landmarks_json(text, seed as u64))
}
