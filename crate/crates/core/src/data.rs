//! Synthetic paired-modality corpus: latent event scenes rendered to both a
//! feature sequence (template rows over contiguous spans, plus noise) and a
//! caption (fixed phrase grammar). Everything is a pure function of seeds.

use crate::decoder::{TokenDictionary, EOS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EVENT_TYPES: usize = 12;

const EVENT_NAMES: [&str; EVENT_TYPES] = [
    "bark", "rain", "siren", "thunder", "wind", "engine", "bird", "door", "clock", "baby",
    "glass", "crowd",
];

const EVENT_PHRASES: [&[&str]; EVENT_TYPES] = [
    &["a", "dog", "barks"],
    &["rain", "falls"],
    &["a", "siren", "wails"],
    &["thunder", "rumbles"],
    &["wind", "blows"],
    &["an", "engine", "revs"],
    &["birds", "chirp"],
    &["a", "door", "slams"],
    &["a", "clock", "ticks"],
    &["a", "baby", "cries"],
    &["glass", "shatters"],
    &["a", "crowd", "cheers"],
];

/// Human-readable name for an event kind (diagnostics, CLI output).
pub fn event_name(kind: usize) -> &'static str {
    EVENT_NAMES[kind]
}

pub const PROMPT_WORD: &str = "describe";
pub const THEN_WORD: &str = "then";
/// Longest caption: three 3-word phrases, two connectives, EOS.
pub const MAX_CAPTION_LEN: usize = 3 * 3 + 2 + 1;

const TEMPLATE_SEED: u64 = 0x7e3a_91c5_04d8_2b6f;
const NOISE_STD: f64 = 0.05;

/// Vocabulary: reserved ids, prompt word, connective, the phrase words in
/// first-appearance order, then filler entries up to `k`.
pub fn build_dictionary(k: usize) -> Result<TokenDictionary> {
    let mut surfaces: Vec<String> = ["<pad>", "<bos>", "<eos>", PROMPT_WORD, THEN_WORD]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for phrase in EVENT_PHRASES {
        for word in phrase {
            if !surfaces.iter().any(|s| s == word) {
                surfaces.push(word.to_string());
            }
        }
    }
    if k < surfaces.len() {
        return Err(Error::domain(
            "dictionary",
            format!("need at least {} entries, got {k}", surfaces.len()),
        ));
    }
    let mut extra = 0usize;
    while surfaces.len() < k {
        surfaces.push(format!("<extra_{extra}>"));
        extra += 1;
    }
    TokenDictionary::new(surfaces)
}

// ── scenes ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEvent {
    pub kind: usize,
    pub intensity: f64,
}

/// 1 to 3 distinct events in onset order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventScene {
    pub seed: u64,
    pub events: Vec<SceneEvent>,
}

pub fn gen_scene(seed: u64) -> EventScene {
    let mut rng = Rng::substream(seed, "scene");
    let count = 1 + rng.below(3);
    let kinds = rng.sample_without_replacement(EVENT_TYPES, count);
    let events = kinds
        .into_iter()
        .map(|kind| SceneEvent {
            kind,
            intensity: rng.uniform(0.5, 1.5),
        })
        .collect();
    EventScene { seed, events }
}

// ── feature rendering ────────────────────────────────────────────────────────

/// Frozen per-type template row, a pure function of (kind, d).
pub fn event_template(kind: usize, d: usize) -> Vec<f64> {
    let mut rng = Rng::new(Rng::derive(TEMPLATE_SEED, kind as u64));
    rng.normal_vec(d, 1.0)
}

/// Each event owns a contiguous span; spans partition [0, n_a) in onset
/// order. Rows are intensity-scaled templates plus optional noise drawn from
/// the scene's own substream.
pub fn render_audio_features(
    scene: &EventScene,
    n_a: usize,
    d: usize,
    noise: bool,
) -> Result<Tensor> {
    let e = scene.events.len();
    if n_a < e {
        return Err(Error::domain(
            "render_audio_features",
            format!("{n_a} feature rows cannot cover {e} events"),
        ));
    }
    let base = n_a / e;
    let rem = n_a % e;
    let mut data = Vec::with_capacity(n_a * d);
    let mut noise_rng = Rng::substream(scene.seed, "noise");
    for (i, ev) in scene.events.iter().enumerate() {
        let span = base + usize::from(i < rem);
        let template = event_template(ev.kind, d);
        for _ in 0..span {
            for &t in &template {
                data.push(t * ev.intensity);
            }
        }
        if noise {
            let start = data.len() - span * d;
            for v in &mut data[start..] {
                *v += noise_rng.normal() * NOISE_STD;
            }
        }
    }
    Tensor::new(vec![n_a, d], data)
}

// ── caption rendering ────────────────────────────────────────────────────────

pub fn render_caption(scene: &EventScene, dict: &TokenDictionary) -> Result<Vec<usize>> {
    let word_id = |w: &str| {
        dict.lookup(w)
            .ok_or_else(|| Error::domain("render_caption", format!("word {w:?} not in dictionary")))
    };
    let mut ids = Vec::new();
    for (i, ev) in scene.events.iter().enumerate() {
        if i > 0 {
            ids.push(word_id(THEN_WORD)?);
        }
        for word in EVENT_PHRASES[ev.kind] {
            ids.push(word_id(word)?);
        }
    }
    ids.push(EOS);
    Ok(ids)
}

// ── samples and manifests ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub scene: EventScene,
    pub h_a: Tensor,
    pub caption: Vec<usize>,
}

pub fn gen_sample(
    seed: u64,
    n_a: usize,
    d: usize,
    dict: &TokenDictionary,
    noise: bool,
) -> Result<SyntheticSample> {
    let scene = gen_scene(seed);
    let h_a = render_audio_features(&scene, n_a, d, noise)?;
    let caption = render_caption(&scene, dict)?;
    Ok(SyntheticSample { scene, h_a, caption })
}

/// Per-sample seeds for a named split, derived from one master seed.
pub fn split_seeds(master: u64, split: &str, size: usize) -> Vec<u64> {
    let mut rng = Rng::substream(master, split);
    let base = rng.next_u64();
    (0..size).map(|i| Rng::derive(base, i as u64)).collect()
}

/// One line per sample: "seed<TAB>id id id ...".
pub fn manifest_lines(samples: &[SyntheticSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let toks: Vec<String> = s.caption.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("{}\t{}\n", s.scene.seed, toks.join(" ")));
    }
    out
}

// ─────────────────────────────────────────────────────────────────────────────
