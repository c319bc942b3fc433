//! Synthetic multimodal health-monitoring corpus.
//!
//! Each class has its own base pattern per modality. Samples come in
//! episodes: consecutive 50%-overlapping windows of one continuous recording
//! with a constant label. Injected sensor noise corrupts one window of a
//! sample, with kind and magnitude drawn per window, while fluctuation events
//! (abrupt level shifts in the physiological stream of abnormal classes) hit
//! a single window with a stable past. Noise, missingness, and fluctuation
//! quotas are exact counts chosen by seeded shuffles.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CORPUS_MAGIC: &[u8; 6] = b"DUALD1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("unknown modality id {0}")]
    UnknownModality(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed corpus file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    /// Heart/respiration-like oscillations.
    Physio,
    /// Per-frame feature vectors (stand-in for facial video).
    Visual,
    /// Accelerometer/vehicle-like motion channels.
    Inertial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    pub window_len: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    AdditiveGaussian,
    OcclusionZeroing,
    BaselineWander,
}

impl NoiseKind {
    fn code(self) -> u8 {
        match self {
            NoiseKind::AdditiveGaussian => 1,
            NoiseKind::OcclusionZeroing => 2,
            NoiseKind::BaselineWander => 3,
        }
    }

    fn from_code(c: u8) -> Result<Option<Self>> {
        Ok(match c {
            0 => None,
            1 => Some(NoiseKind::AdditiveGaussian),
            2 => Some(NoiseKind::OcclusionZeroing),
            3 => Some(NoiseKind::BaselineWander),
            _ => return Err(DataError::Format(format!("unknown noise code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub modalities: Vec<ModalitySpec>,
    pub classes: usize,
    pub samples: usize,
    /// Number of preceding samples kept as history (T).
    pub history: usize,
    /// Maximum number of consecutive windows sharing one recording.
    pub episode_len: usize,
    /// Fraction of episodes held out for testing.
    pub test_fraction: f64,
    pub noise_rate: f64,
    pub noise_kinds: Vec<NoiseKind>,
    pub noise_min: f64,
    pub noise_max: f64,
    pub missing_rate: f64,
    pub missing_modalities: Vec<usize>,
    pub fluctuation_rate: f64,
    /// Height of the abrupt level shift marking a fluctuation event.
    pub fluctuation_shift: f64,
    /// Standard deviation of the always-present measurement noise.
    pub base_noise: f64,
    /// Standard deviation of the per-episode subject offset.
    pub subject_jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            modalities: vec![
                ModalitySpec { name: "physio".into(), kind: ModalityKind::Physio, window_len: 64, channels: 2 },
                ModalitySpec { name: "visual".into(), kind: ModalityKind::Visual, window_len: 16, channels: 32 },
                ModalitySpec { name: "inertial".into(), kind: ModalityKind::Inertial, window_len: 64, channels: 3 },
            ],
            classes: 3,
            samples: 3000,
            history: 8,
            episode_len: 10,
            test_fraction: 0.2,
            noise_rate: 0.5,
            noise_kinds: vec![NoiseKind::AdditiveGaussian, NoiseKind::BaselineWander, NoiseKind::OcclusionZeroing],
            noise_min: 1.0,
            noise_max: 3.0,
            missing_rate: 0.0,
            missing_modalities: vec![1],
            fluctuation_rate: 0.2,
            fluctuation_shift: 1.5,
            base_noise: 0.3,
            subject_jitter: 0.35,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.modalities.len() < 2 {
            return bad(format!("need at least 2 modalities, got {}", self.modalities.len()));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples == 0 || self.episode_len == 0 {
            return bad("samples and episode_len must be positive".into());
        }
        for m in &self.modalities {
            if m.window_len == 0 || m.channels == 0 {
                return bad(format!("modality {} has zero window length or channels", m.name));
            }
        }
        for (name, r) in [
            ("noise_rate", self.noise_rate),
            ("missing_rate", self.missing_rate),
            ("fluctuation_rate", self.fluctuation_rate),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1]"));
            }
        }
        if self.noise_min < 0.0 || self.noise_max < self.noise_min {
            return bad(format!("noise magnitude range [{}, {}] is invalid", self.noise_min, self.noise_max));
        }
        if self.noise_rate > 0.0 && self.noise_kinds.is_empty() {
            return bad("noise_rate > 0 but no noise kinds".into());
        }
        if let Some(&m) = self.missing_modalities.iter().find(|&&m| m >= self.modalities.len()) {
            return Err(DataError::UnknownModality(m));
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityWindow {
    pub modality: usize,
    /// Time-major `window_len x channels` values.
    pub samples: Vec<f64>,
    pub window_len: usize,
    pub channels: usize,
    pub present: bool,
    pub noise_level: f64,
    pub noise_kind: Option<NoiseKind>,
    pub fluctuation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: usize,
    pub episode: usize,
    pub split: Split,
    pub label: usize,
    pub windows: Vec<ModalityWindow>,
    /// Ids of the `history` preceding samples, oldest first.
    pub history: Vec<usize>,
}

impl MultimodalSample {
    pub fn max_noise(&self) -> f64 {
        self.windows.iter().map(|w| w.noise_level).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<MultimodalSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn noisy_count(&self) -> usize {
        self.samples.iter().filter(|s| s.max_noise() > 0.0).count()
    }

    pub fn missing_count(&self, modality: usize) -> usize {
        self.samples.iter().filter(|s| !s.windows[modality].present).count()
    }

    pub fn summary(&self) -> CorpusSummary {
        let m_count = self.spec.num_modalities();
        let count = |f: &dyn Fn(&ModalityWindow) -> bool| (0..m_count).map(|m| self.samples.iter().filter(|s| f(&s.windows[m])).count()).collect();
        let split_counts = [Split::Train, Split::Test].map(|s| self.ids(s).len());
        let noisy = self.noisy_count();
        let noise_quota: usize = [Split::Train, Split::Test].iter().map(|&s| (self.spec.noise_rate * self.ids(s).len() as f64).round() as usize).sum();
        CorpusSummary {
            samples: self.len(),
            train: split_counts[0],
            test: split_counts[1],
            class_counts: self.class_counts(),
            noisy_samples: noisy,
            noise_quota,
            noisy_windows: count(&|w| w.noise_level > 0.0),
            missing_windows: count(&|w| !w.present),
            fluctuation_windows: count(&|w| w.fluctuation),
        }
    }
}

/// Counts reported after generation, including the exact noise quota check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub class_counts: Vec<usize>,
    pub noisy_samples: usize,
    pub noise_quota: usize,
    /// Per modality.
    pub noisy_windows: Vec<usize>,
    pub missing_windows: Vec<usize>,
    pub fluctuation_windows: Vec<usize>,
}

impl CorpusSummary {
    pub fn quota_met(&self) -> bool {
        self.noisy_samples == self.noise_quota
    }
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples {} (train {}, test {})", self.samples, self.train, self.test)?;
        writeln!(f, "class counts {:?}", self.class_counts)?;
        writeln!(f, "noisy samples {} of quota {} ({})", self.noisy_samples, self.noise_quota, if self.quota_met() { "ok" } else { "MISMATCH" })?;
        writeln!(f, "noisy windows per modality {:?}", self.noisy_windows)?;
        writeln!(f, "missing windows per modality {:?}", self.missing_windows)?;
        write!(f, "fluctuation windows per modality {:?}", self.fluctuation_windows)
    }
}

// ---- deterministic streams -------------------------------------------------

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG for `(seed, stream, index)`.
pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

const S_EPISODES: u64 = 1;
const S_SUBJECT: u64 = 2;
const S_BASE: u64 = 3;
const S_TEMPLATES: u64 = 4;
const S_FLUCT: u64 = 5;
const S_NOISE: u64 = 6;
const S_NOISE_WIN: u64 = 7;
const S_MISSING: u64 = 8;
const S_SPLIT: u64 = 9;

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

/// Per-episode recording parameters.
struct Subject {
    phase: [f64; 4],
    level: Vec<f64>,
    drift: Vec<f64>,
}

impl Subject {
    fn draw(spec: &CorpusSpec, episode: usize) -> Self {
        let mut rng = stream_rng(spec.seed, S_SUBJECT, episode as u64);
        let phase = [0, 1, 2, 3].map(|_| rng.gen_range(0.0..2.0 * PI));
        let max_ch = spec.modalities.iter().map(|m| m.channels).max().unwrap_or(1);
        let level = (0..spec.modalities.len() * max_ch).map(|_| gauss(&mut rng, spec.subject_jitter)).collect();
        let drift = (0..max_ch).map(|_| gauss(&mut rng, 0.02)).collect();
        Self { phase, level, drift }
    }

    fn level(&self, modality: usize, ch: usize, max_ch: usize) -> f64 {
        self.level[modality * max_ch + ch]
    }
}

/// Class templates for the visual-proxy modality, fixed by the seed.
fn visual_templates(spec: &CorpusSpec, channels: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, S_TEMPLATES, channels as u64);
    (0..spec.classes).map(|_| (0..channels).map(|_| gauss(&mut rng, 0.35)).collect()).collect()
}

fn clean_window(spec: &CorpusSpec, modality: usize, label: usize, pos: usize, subject: &Subject, templates: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ms = &spec.modalities[modality];
    let (len, ch) = (ms.window_len, ms.channels);
    let max_ch = spec.modalities.iter().map(|m| m.channels).max().unwrap_or(1);
    let c = label as f64;
    let hop = (len / 2).max(1);
    let t0 = pos * hop;
    let mut out = vec![0.0; len * ch];
    for t in 0..len {
        let time = (t0 + t) as f64;
        for k in 0..ch {
            let lvl = subject.level(modality, k, max_ch);
            let v = match ms.kind {
                ModalityKind::Physio => {
                    // Rate and baseline rise with class; channel parity picks heart vs breath.
                    let (freq, amp, base) = if k % 2 == 0 { (0.06 + 0.025 * c, 0.8, 0.45 * c) } else { (0.02 + 0.008 * c, 0.6, -0.35 * c) };
                    base + lvl + amp * (2.0 * PI * freq * time + subject.phase[k % 4]).sin()
                }
                ModalityKind::Visual => {
                    let tpl = templates[label][k];
                    tpl * (1.0 + 0.1 * (0.05 * time + subject.phase[0]).sin()) + 0.5 * lvl + subject.drift[k] * time / 16.0
                }
                ModalityKind::Inertial => {
                    // Gravity axis tilts with class; motion energy falls with class.
                    let axis_level = match k % 3 {
                        0 => 0.4 * c,
                        1 => -0.3 * c,
                        _ => 1.0 - 0.25 * c,
                    };
                    let gait = (1.0 - 0.3 * c).max(0.1) * (2.0 * PI * 0.12 * time + subject.phase[(k + 1) % 4]).sin();
                    axis_level + lvl + gait
                }
            };
            out[t * ch + k] = v + gauss(rng, spec.base_noise);
        }
    }
    out
}

/// Returns a corrupted copy of `window`; `noise_level` records `magnitude`.
pub fn inject_noise(window: &ModalityWindow, kind: NoiseKind, magnitude: f64, rng: &mut impl Rng) -> Result<ModalityWindow> {
    if magnitude < 0.0 || !magnitude.is_finite() {
        return Err(DataError::InvalidArgument(format!("noise magnitude {magnitude} must be finite and >= 0")));
    }
    if !window.present {
        return Err(DataError::InvalidArgument("cannot inject noise into an absent window".into()));
    }
    let mut out = window.clone();
    out.noise_level = magnitude;
    out.noise_kind = if magnitude > 0.0 { Some(kind) } else { None };
    if magnitude == 0.0 {
        return Ok(out);
    }
    let (len, ch) = (window.window_len, window.channels);
    match kind {
        NoiseKind::AdditiveGaussian => {
            let n = Normal::new(0.0, magnitude).expect("finite magnitude");
            out.samples.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        NoiseKind::OcclusionZeroing => {
            // Span grows with magnitude: 20% at 0, 60% at 4 and above.
            let frac = 0.2 + 0.4 * (magnitude / 4.0).min(1.0);
            let span = ((frac * len as f64).ceil() as usize).clamp(1, len);
            let start = rng.gen_range(0..=len - span);
            out.samples[start * ch..(start + span) * ch].iter_mut().for_each(|v| *v = 0.0);
        }
        NoiseKind::BaselineWander => {
            for k in 0..ch {
                let slope = rng.gen_range(-1.0..1.0) * magnitude;
                let phase = rng.gen_range(0.0..2.0 * PI);
                for t in 0..len {
                    let u = t as f64 / len as f64;
                    out.samples[t * ch + k] += slope * (u - 0.5) + 0.5 * magnitude * (PI * u + phase).sin();
                }
            }
        }
    }
    Ok(out)
}

/// Marks an exact quota of `modality`'s windows among `ids` as absent.
fn mask_subset(samples: &mut [MultimodalSample], ids: &[usize], modality: usize, rate: f64, seed: u64) {
    let quota = (rate * ids.len() as f64).round() as usize;
    let mut order = ids.to_vec();
    order.shuffle(&mut stream_rng(seed, S_MISSING, modality as u64));
    for &id in order.iter().take(quota) {
        let w = &mut samples[id].windows[modality];
        w.present = false;
        w.samples.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Masks an exact `rate` quota of the given modality's windows.
pub fn mask_missing(mut corpus: Corpus, modality: usize, rate: f64) -> Result<Corpus> {
    if modality >= corpus.spec.num_modalities() {
        return Err(DataError::UnknownModality(modality));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(DataError::InvalidArgument(format!("missing rate {rate} outside [0, 1]")));
    }
    let ids: Vec<usize> = (0..corpus.samples.len()).collect();
    let seed = corpus.spec.seed;
    mask_subset(&mut corpus.samples, &ids, modality, rate, seed);
    Ok(corpus)
}

/// Builds the full labeled corpus described by `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let n = spec.samples;
    let m_count = spec.num_modalities();

    // Balanced labels, cut into episodes, shuffled.
    let mut episodes: Vec<(usize, usize)> = Vec::new(); // (label, length)
    for c in 0..spec.classes {
        let mut remaining = n / spec.classes + usize::from(c < n % spec.classes);
        while remaining > 0 {
            let len = remaining.min(spec.episode_len);
            episodes.push((c, len));
            remaining -= len;
        }
    }
    episodes.shuffle(&mut stream_rng(spec.seed, S_EPISODES, 0));

    let n_ep = episodes.len();
    let n_test = ((spec.test_fraction * n_ep as f64).round() as usize).min(n_ep);
    let mut ep_order: Vec<usize> = (0..n_ep).collect();
    ep_order.shuffle(&mut stream_rng(spec.seed, S_SPLIT, 0));
    let mut ep_split = vec![Split::Train; n_ep];
    for &e in ep_order.iter().take(n_test) {
        ep_split[e] = Split::Test;
    }

    let templates: Vec<Vec<Vec<f64>>> =
        spec.modalities.iter().map(|m| if m.kind == ModalityKind::Visual { visual_templates(spec, m.channels) } else { Vec::new() }).collect();

    let mut samples = Vec::with_capacity(n);
    let mut ep_ranges = Vec::with_capacity(n_ep);
    for (e, &(label, len)) in episodes.iter().enumerate() {
        let subject = Subject::draw(spec, e);
        let start = samples.len();
        for pos in 0..len {
            let id = start + pos;
            let mut rng = stream_rng(spec.seed, S_BASE, id as u64);
            let windows = (0..m_count)
                .map(|m| {
                    let ms = &spec.modalities[m];
                    ModalityWindow {
                        modality: m,
                        samples: clean_window(spec, m, label, pos, &subject, &templates[m], &mut rng),
                        window_len: ms.window_len,
                        channels: ms.channels,
                        present: true,
                        noise_level: 0.0,
                        noise_kind: None,
                        fluctuation: false,
                    }
                })
                .collect();
            let history = (0..spec.history)
                .map(|h| {
                    let back = spec.history - h;
                    if pos >= back {
                        id - back
                    } else {
                        start
                    }
                })
                .collect();
            samples.push(MultimodalSample { id, episode: e, split: ep_split[e], label, windows, history });
        }
        ep_ranges.push(start..start + len);
    }

    inject_fluctuations(spec, &mut samples);

    for split in [Split::Train, Split::Test] {
        let eps: Vec<usize> = (0..n_ep).filter(|&e| ep_split[e] == split).collect();
        let ids: Vec<usize> = eps.iter().flat_map(|&e| ep_ranges[e].clone()).collect();
        inject_sample_noise(spec, &mut samples, &ids, split)?;
        for &m in &spec.missing_modalities {
            let seed = spec.seed ^ if split == Split::Test { 0x7E57 } else { 0 };
            mask_subset(&mut samples, &ids, m, spec.missing_rate, seed);
        }
    }

    Ok(Corpus { spec: spec.clone(), samples })
}

fn physio_modality(spec: &CorpusSpec) -> Option<usize> {
    spec.modalities.iter().position(|m| m.kind == ModalityKind::Physio)
}

fn inject_fluctuations(spec: &CorpusSpec, samples: &mut [MultimodalSample]) {
    let Some(m) = physio_modality(spec) else { return };
    let abnormal: Vec<usize> = samples.iter().filter(|s| s.label > 0).map(|s| s.id).collect();
    let quota = (spec.fluctuation_rate * abnormal.len() as f64).round() as usize;
    let mut order = abnormal;
    order.shuffle(&mut stream_rng(spec.seed, S_FLUCT, 0));
    for &id in order.iter().take(quota) {
        let mut rng = stream_rng(spec.seed, S_FLUCT, 1 + id as u64);
        let w = &mut samples[id].windows[m];
        let (len, ch) = (w.window_len, w.channels);
        let onset = rng.gen_range(len / 4..=3 * len / 4);
        // Abrupt shift on the heart-like channels; direction follows class.
        let sign = if samples[id].label % 2 == 1 { 1.0 } else { -1.0 };
        let w = &mut samples[id].windows[m];
        for t in onset..len {
            for k in (0..ch).step_by(2) {
                w.samples[t * ch + k] += sign * spec.fluctuation_shift;
            }
        }
        w.fluctuation = true;
    }
}

/// Corrupts one window in each of an exact `noise_rate` quota of samples.
/// The corrupted modality cycles so every modality gets an equal share.
fn inject_sample_noise(spec: &CorpusSpec, samples: &mut [MultimodalSample], ids: &[usize], split: Split) -> Result<()> {
    let quota = (spec.noise_rate * ids.len() as f64).round() as usize;
    let mut order = ids.to_vec();
    let salt = if split == Split::Test { 1 } else { 0 };
    let mut rng = stream_rng(spec.seed, S_NOISE, salt);
    order.shuffle(&mut rng);
    let m_count = spec.num_modalities();
    let mut modality_cycle: Vec<usize> = (0..m_count).collect();
    for (i, &id) in order.iter().take(quota).enumerate() {
        if i % m_count == 0 {
            modality_cycle.shuffle(&mut rng);
        }
        let m = modality_cycle[i % m_count];
        let mut wrng = stream_rng(spec.seed, S_NOISE_WIN, (id * m_count + m) as u64);
        let kind = *spec.noise_kinds.choose(&mut wrng).expect("noise kinds validated non-empty");
        let magnitude = wrng.gen_range(spec.noise_min..=spec.noise_max);
        samples[id].windows[m] = inject_noise(&samples[id].windows[m], kind, magnitude, &mut wrng)?;
    }
    Ok(())
}

// ---- binary corpus file ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    spec: CorpusSpec,
    shapes: Vec<[usize; 2]>,
    samples: usize,
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &Corpus) -> Result<()> {
    let manifest = CorpusManifest {
        spec: corpus.spec.clone(),
        shapes: corpus.spec.modalities.iter().map(|m| [m.window_len, m.channels]).collect(),
        samples: corpus.samples.len(),
    };
    let bytes = serde_json::to_vec(&manifest)?;
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    for s in &corpus.samples {
        w.write_all(&(s.label as u32).to_le_bytes())?;
        w.write_all(&(s.episode as u32).to_le_bytes())?;
        w.write_all(&[u8::from(s.split == Split::Test)])?;
        w.write_all(&(s.history.len() as u32).to_le_bytes())?;
        for &h in &s.history {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        for win in &s.windows {
            w.write_all(&[u8::from(win.present), u8::from(win.fluctuation), win.noise_kind.map_or(0, NoiseKind::code)])?;
            w.write_all(&win.noise_level.to_le_bytes())?;
            for v in &win.samples {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Corpus> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(DataError::Format(format!("bad corpus magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    let manifest: CorpusManifest = serde_json::from_slice(&buf)?;
    let mut samples = Vec::with_capacity(manifest.samples);
    for id in 0..manifest.samples {
        let label = read_u32(&mut r)? as usize;
        let episode = read_u32(&mut r)? as usize;
        let mut sb = [0u8; 1];
        r.read_exact(&mut sb)?;
        let split = if sb[0] == 1 { Split::Test } else { Split::Train };
        let hn = read_u32(&mut r)? as usize;
        let history = (0..hn).map(|_| read_u32(&mut r).map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let mut windows = Vec::with_capacity(manifest.shapes.len());
        for (m, &[wl, ch]) in manifest.shapes.iter().enumerate() {
            let mut flags = [0u8; 3];
            r.read_exact(&mut flags)?;
            let noise_level = read_f64(&mut r)?;
            let vals = (0..wl * ch).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            windows.push(ModalityWindow {
                modality: m,
                samples: vals,
                window_len: wl,
                channels: ch,
                present: flags[0] == 1,
                fluctuation: flags[1] == 1,
                noise_kind: NoiseKind::from_code(flags[2])?,
                noise_level,
            });
        }
        samples.push(MultimodalSample { id, episode, split, label, windows, history });
    }
    Ok(Corpus { spec: manifest.spec, samples })
}
