//! Corpus manifests and a parametric synthetic-speech generator.
//!
//! Synthetic utterances alternate band-limited noise "consonants" with
//! harmonic sawtooth "vowels" whose durations and pitch follow a per-dialect
//! profile. Every utterance ships with its true segmentation and pitch
//! contour, so the extraction pipeline can be checked against ground truth.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, write_wav, AudioBuffer, HOP_S};
use crate::par;
use crate::prosody::{analyze_utterance, ExtractConfig, Extraction, UnusableReason, UnusableUtterance};
use crate::table::FeatureRow;
use crate::segmentation::{band_pass, Interval, Segment, SegmentKind, SegmentTrack};

pub const SYNTH_SAMPLE_RATE_HZ: u32 = 16_000;

const DEFAULT_PROFILES: &str = include_str!("../data/default_profiles.toml");

const VOWEL_PEAK: f64 = 0.5;
const CONSONANT_REL_DB: f64 = -12.0;
const CROSSFADE_S: f64 = 0.004;
const SILENCE_PAD_S: f64 = 0.25;
const MIN_VOWEL_MS: f64 = 50.0;
const MIN_CONSONANT_MS: f64 = 50.0;
const HARMONIC_CEILING_HZ: f64 = 5000.0;
const SPEAKER_PITCH_ST: f64 = 2.0;
const SPEAKER_TEMPO: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("MissingColumn: {0}")]
    MissingColumn(String),
    #[error("DuplicateUtteranceId: {0}")]
    DuplicateUtteranceId(String),
    #[error("UnknownDialect: `{0}`")]
    UnknownDialect(String),
    #[error("empty field `{column}` in row {row}")]
    EmptyField { row: usize, column: String },
    #[error("bad duration in row {row}: `{value}`")]
    BadDuration { row: usize, value: String },
    #[error("invalid profile `{dialect}`: {reason}")]
    InvalidProfile { dialect: String, reason: String },
    #[error("malformed profile file: {0}")]
    ProfileParse(String),
    #[error("invalid synthesis request: {0}")]
    InvalidRequest(String),
    #[error("IoError({path}): {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utterance_id: String,
    /// Absolute, or relative to the working directory.
    pub wav_path: PathBuf,
    pub speaker_id: String,
    pub dialect: String,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dialect labels in first-appearance order.
    pub fn dialects(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.dialect) {
                seen.push(r.dialect.clone());
            }
        }
        seen
    }

    /// Writes the manifest with paths relative to `base` where possible.
    pub fn write_csv<W: Write>(&self, base: &Path, mut out: W) -> std::io::Result<()> {
        writeln!(out, "utterance_id,wav_path,speaker_id,dialect,duration_s")?;
        for r in &self.rows {
            let shown = r.wav_path.strip_prefix(base).unwrap_or(&r.wav_path);
            let duration = r.duration_s.map_or(String::new(), |d| format!("{d:.4}"));
            writeln!(
                out,
                "{},{},{},{},{duration}",
                r.utterance_id,
                shown.display(),
                r.speaker_id,
                r.dialect
            )?;
        }
        Ok(())
    }
}

/// Reads a manifest CSV; relative WAV paths resolve against the manifest's
/// directory. With `labels`, every dialect must be one of them.
pub fn load_manifest(path: impl AsRef<Path>, labels: Option<&[String]>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|_| CorpusError::MissingFile(path.display().to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| CorpusError::MissingColumn(name.to_string()));
    let (c_id, c_wav, c_spk, c_dia) = (
        required("utterance_id")?,
        required("wav_path")?,
        required("speaker_id")?,
        required("dialect")?,
    );
    let c_dur = find("duration_s");

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize, name: &str| -> Result<String> {
            let v = record.get(c).unwrap_or("");
            if v.is_empty() {
                return Err(CorpusError::EmptyField {
                    row: i + 1,
                    column: name.to_string(),
                });
            }
            Ok(v.to_string())
        };
        let utterance_id = field(c_id, "utterance_id")?;
        if !seen.insert(utterance_id.clone()) {
            return Err(CorpusError::DuplicateUtteranceId(utterance_id));
        }
        let dialect = field(c_dia, "dialect")?;
        if let Some(labels) = labels {
            if !labels.contains(&dialect) {
                return Err(CorpusError::UnknownDialect(dialect));
            }
        }
        let wav = PathBuf::from(field(c_wav, "wav_path")?);
        let duration_s = match c_dur.and_then(|c| record.get(c)).filter(|v| !v.is_empty()) {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| CorpusError::BadDuration {
                row: i + 1,
                value: v.to_string(),
            })?),
        };
        rows.push(ManifestRow {
            utterance_id,
            wav_path: if wav.is_absolute() { wav } else { base.join(wav) },
            speaker_id: field(c_spk, "speaker_id")?,
            dialect,
            duration_s,
        });
    }
    Ok(Manifest { rows })
}

/// Extracts every manifest row (in parallel, order preserved). Unreadable
/// files count as unusable rather than aborting the run.
pub fn extract_manifest(manifest: &Manifest, cfg: &ExtractConfig) -> Vec<std::result::Result<Extraction, UnusableUtterance>> {
    par::map(&manifest.rows, |row| {
        let buffer = load_wav(&row.wav_path).map_err(|e| UnusableReason::Audio(e.to_string()))?;
        analyze_utterance(&buffer, cfg)
    })
}

/// Feature rows of the usable utterances, plus `(utterance_id, reason)` for
/// the rest.
pub fn feature_rows(
    manifest: &Manifest,
    extractions: &[std::result::Result<Extraction, UnusableUtterance>],
) -> (Vec<FeatureRow>, Vec<(String, UnusableReason)>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (m, e) in manifest.rows.iter().zip(extractions) {
        match e {
            Ok(ex) => rows.push(FeatureRow {
                utterance_id: m.utterance_id.clone(),
                speaker_id: m.speaker_id.clone(),
                dialect: m.dialect.clone(),
                features: ex.features,
            }),
            Err(u) => skipped.push((m.utterance_id.clone(), u.reason.clone())),
        }
    }
    (rows, skipped)
}

/// Duration and pitch behaviour of one synthetic dialect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialectProfile {
    pub dialect: String,
    pub vowel_mean_ms: f64,
    pub vowel_std_ms: f64,
    pub consonant_mean_ms: f64,
    pub consonant_std_ms: f64,
    pub syllables_min: usize,
    pub syllables_max: usize,
    pub base_pitch_hz: f64,
    /// Spread of per-vowel pitch targets around the base, in semitones.
    pub pitch_range_st: f64,
    /// Largest pitch glide within a vowel, in semitones per second.
    pub pitch_drift_st_per_s: f64,
    /// Target syllables per second; durations are rescaled to meet it.
    #[serde(default)]
    pub speech_rate: Option<f64>,
}

impl DialectProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| CorpusError::InvalidProfile {
            dialect: self.dialect.clone(),
            reason,
        };
        for (name, v) in [
            ("vowel_mean_ms", self.vowel_mean_ms),
            ("vowel_std_ms", self.vowel_std_ms),
            ("consonant_mean_ms", self.consonant_mean_ms),
            ("consonant_std_ms", self.consonant_std_ms),
            ("base_pitch_hz", self.base_pitch_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.pitch_range_st >= 0.0 && self.pitch_drift_st_per_s >= 0.0) {
            return Err(bad("pitch range and drift must be non-negative".into()));
        }
        if self.syllables_min < 2 || self.syllables_max < self.syllables_min {
            return Err(bad(format!(
                "syllable range {}..={} must start at 2 or more",
                self.syllables_min, self.syllables_max
            )));
        }
        if let Some(r) = self.speech_rate {
            if !(r > 0.0 && r.is_finite()) {
                return Err(bad(format!("speech_rate must be positive, got {r}")));
            }
        }
        let (lo, hi) = (
            self.base_pitch_hz * 2f64.powf(-(self.pitch_range_st / 2.0 + SPEAKER_PITCH_ST) / 12.0),
            self.base_pitch_hz * 2f64.powf((self.pitch_range_st / 2.0 + SPEAKER_PITCH_ST) / 12.0),
        );
        if lo < 75.0 || hi > 500.0 {
            return Err(bad(format!("pitch would span {lo:.0}–{hi:.0} Hz, outside 75–500 Hz")));
        }
        if self.dialect.is_empty() || self.dialect.contains([',', '/', '\\']) {
            return Err(bad("dialect label must be non-empty without `,`, `/` or `\\`".into()));
        }
        Ok(())
    }

    /// Scale applied to every duration so the syllable rate meets `speech_rate`.
    pub fn tempo_scale(&self) -> f64 {
        match self.speech_rate {
            Some(rate) => (1000.0 / (self.vowel_mean_ms + self.consonant_mean_ms)) / rate,
            None => 1.0,
        }
    }

    /// Vowel share of an average utterance, ignoring duration clamping.
    pub fn expected_pct_v(&self) -> f64 {
        let n = (self.syllables_min + self.syllables_max) as f64 / 2.0;
        let v = n * self.vowel_mean_ms;
        100.0 * v / (v + (n + 1.0) * self.consonant_mean_ms)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    profile: Vec<DialectProfile>,
}

pub fn parse_profiles(text: &str) -> Result<Vec<DialectProfile>> {
    let file: ProfileFile = toml::from_str(text).map_err(|e| CorpusError::ProfileParse(e.to_string()))?;
    let mut seen = HashSet::new();
    for p in &file.profile {
        p.validate()?;
        if !seen.insert(p.dialect.clone()) {
            return Err(CorpusError::ProfileParse(format!("dialect `{}` defined twice", p.dialect)));
        }
    }
    if file.profile.is_empty() {
        return Err(CorpusError::ProfileParse("no [[profile]] entries".into()));
    }
    Ok(file.profile)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<DialectProfile>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| CorpusError::MissingFile(path.display().to_string()))?;
    parse_profiles(&text)
}

/// The five bundled Algerian dialect profiles.
pub fn default_profiles() -> Vec<DialectProfile> {
    parse_profiles(DEFAULT_PROFILES).expect("bundled profiles are valid")
}

pub fn default_profiles_toml() -> &'static str {
    DEFAULT_PROFILES
}

/// Mixes `salt` into `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-speaker voice: a pitch offset and a tempo factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerVoice {
    pub pitch_offset_st: f64,
    pub duration_scale: f64,
}

impl SpeakerVoice {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            pitch_offset_st: rng.random_range(-SPEAKER_PITCH_ST..=SPEAKER_PITCH_ST),
            duration_scale: 1.0 + rng.random_range(-SPEAKER_TEMPO..=SPEAKER_TEMPO),
        }
    }
}

/// One planned segment; vowels carry their pitch at onset and offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedSegment {
    pub kind: SegmentKind,
    pub duration_s: f64,
    pub f0_start_hz: f64,
    pub f0_end_hz: f64,
}

/// The C V C … V C layout of one utterance, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub segments: Vec<PlannedSegment>,
}

fn lognormal(mean: f64, std: f64) -> LogNormal<f64> {
    let sigma2 = (1.0 + (std / mean).powi(2)).ln();
    LogNormal::new(mean.ln() - sigma2 / 2.0, sigma2.sqrt()).expect("valid parameters")
}

impl UtterancePlan {
    pub fn draw(profile: &DialectProfile, voice: &SpeakerVoice, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(profile.syllables_min..=profile.syllables_max);
        let scale = profile.tempo_scale() * voice.duration_scale;
        let v_dist = lognormal(profile.vowel_mean_ms, profile.vowel_std_ms);
        let c_dist = lognormal(profile.consonant_mean_ms, profile.consonant_std_ms);
        let consonant = |rng: &mut dyn rand::RngCore| PlannedSegment {
            kind: SegmentKind::Consonant,
            duration_s: (c_dist.sample(rng) * scale).max(MIN_CONSONANT_MS) / 1000.0,
            f0_start_hz: 0.0,
            f0_end_hz: 0.0,
        };
        let mut segments = vec![consonant(rng)];
        for _ in 0..n {
            let d = (v_dist.sample(rng) * scale).max(MIN_VOWEL_MS) / 1000.0;
            let target_st = voice.pitch_offset_st + profile.pitch_range_st * (rng.random::<f64>() - 0.5);
            let glide_st = profile.pitch_drift_st_per_s * (2.0 * rng.random::<f64>() - 1.0) * d;
            let hz = |st: f64| profile.base_pitch_hz * 2f64.powf(st / 12.0);
            segments.push(PlannedSegment {
                kind: SegmentKind::Vowel,
                duration_s: d,
                f0_start_hz: hz(target_st - glide_st / 2.0),
                f0_end_hz: hz(target_st + glide_st / 2.0),
            });
            segments.push(consonant(rng));
        }
        Self { segments }
    }

    pub fn speech_duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Segments on the timeline, offset by `start_s`.
    pub fn segment_track(&self, start_s: f64) -> SegmentTrack {
        let mut t = start_s;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let seg = Segment {
                    interval: Interval::new(t, t + s.duration_s),
                    kind: s.kind,
                };
                t += s.duration_s;
                seg
            })
            .collect();
        SegmentTrack {
            segments,
            utterance_duration_s: self.speech_duration_s(),
        }
    }

    /// Pitch at time `t` (relative to speech onset) or `None` outside vowels.
    pub fn f0_at(&self, t: f64) -> Option<f64> {
        let mut start = 0.0;
        for s in &self.segments {
            let end = start + s.duration_s;
            if t >= start && t < end {
                return (s.kind == SegmentKind::Vowel).then(|| glide(s, (t - start) / s.duration_s));
            }
            start = end;
        }
        None
    }
}

/// Exponential (linear in semitones) glide from onset to offset pitch.
fn glide(s: &PlannedSegment, frac: f64) -> f64 {
    s.f0_start_hz * (s.f0_end_hz / s.f0_start_hz).powf(frac.clamp(0.0, 1.0))
}

/// Renders a plan at `sample_rate_hz`, padded with silence on both sides.
pub fn render(plan: &UtterancePlan, sample_rate_hz: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate_hz as f64;
    let pad = (SILENCE_PAD_S * sr).round() as usize;
    // segment boundaries in samples, relative to speech onset
    let mut bounds = vec![0usize];
    let mut t = 0.0;
    for s in &plan.segments {
        t += s.duration_s;
        bounds.push((t * sr).round() as usize);
    }
    let n_speech = *bounds.last().expect("non-empty");
    let half_fade = ((CROSSFADE_S / 2.0) * sr).round() as usize;

    // vowel weight: 1 inside vowels, 0 inside consonants, raised-cosine ramps
    // centred on every boundary
    let mut vowel_gain = vec![0.0; n_speech];
    for (i, s) in plan.segments.iter().enumerate() {
        if s.kind == SegmentKind::Vowel {
            vowel_gain[bounds[i]..bounds[i + 1]].fill(1.0);
        }
    }
    for &b in &bounds[1..bounds.len() - 1] {
        let before = vowel_gain[b - 1];
        let after = vowel_gain[b.min(n_speech - 1)];
        for j in 0..2 * half_fade {
            let idx = b as isize - half_fade as isize + j as isize;
            if idx < 0 || idx as usize >= n_speech {
                continue;
            }
            let w = 0.5 - 0.5 * (std::f64::consts::PI * (j as f64 + 0.5) / (2 * half_fade) as f64).cos();
            vowel_gain[idx as usize] = before + (after - before) * w;
        }
    }

    let mut noise: Vec<f64> = (0..n_speech).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if let Ok(buf) = AudioBuffer::new(noise.iter().map(|v| (v * 0.1).clamp(-1.0, 1.0)).collect(), sample_rate_hz, "noise") {
        if let Ok(filtered) = band_pass(&buf, 2000.0, 6000.0_f64.min(0.45 * sr)) {
            noise = filtered;
        }
    }
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / n_speech.max(1) as f64).sqrt();
    // an all-harmonics sawtooth has RMS ≈ peak/√3
    let target_rms = VOWEL_PEAK / 3f64.sqrt() * 10f64.powf(CONSONANT_REL_DB / 20.0);
    let noise_gain = if noise_rms > 0.0 { target_rms / noise_rms } else { 0.0 };

    let mut out = vec![0.0; n_speech + 2 * pad];
    let mut phase = 0.0f64;
    for (i, s) in plan.segments.iter().enumerate() {
        let (lo, hi) = (bounds[i], bounds[i + 1]);
        if s.kind != SegmentKind::Vowel {
            continue;
        }
        // vowels sound through the fades on either side
        let ext_lo = lo.saturating_sub(half_fade);
        let ext_hi = (hi + half_fade).min(n_speech);
        let len = (hi - lo).max(1) as f64;
        for n in ext_lo..ext_hi {
            let frac = (n as f64 - lo as f64) / len;
            let f0 = glide(s, frac);
            phase = (phase + 2.0 * std::f64::consts::PI * f0 / sr) % (2.0 * std::f64::consts::PI);
            let harmonics = ((HARMONIC_CEILING_HZ.min(0.45 * sr)) / f0).floor().max(1.0) as usize;
            // sin(h·φ) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur, mut saw, mut sign) = (0.0, s1, 0.0, 1.0);
            for h in 1..=harmonics {
                saw += sign * cur / h as f64;
                (prev, cur) = (cur, 2.0 * c1 * cur - prev);
                sign = -sign;
            }
            out[pad + n] += vowel_gain[n] * VOWEL_PEAK * (2.0 / std::f64::consts::PI) * saw;
        }
    }
    for n in 0..n_speech {
        out[pad + n] += (1.0 - vowel_gain[n]) * noise_gain * noise[n];
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    out
}

/// Ground-truth pitch on the shared 10 ms grid of the padded recording.
pub fn truth_pitch_csv(plan: &UtterancePlan, total_s: f64) -> String {
    let mut s = String::from("time_s,f0_hz\n");
    let n_frames = ((total_s / HOP_S).floor() as usize).max(1);
    for i in 0..n_frames {
        let t = (i as f64 + 0.5) * HOP_S;
        match plan.f0_at(t - SILENCE_PAD_S) {
            Some(hz) => s.push_str(&format!("{t:.4},{hz:.3}\n")),
            None => s.push_str(&format!("{t:.4},NA\n")),
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthRequest {
    pub speakers_per_dialect: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
}

/// One utterance's identity and plan, ready to render.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub utterance_id: String,
    pub speaker_id: String,
    pub dialect: String,
    pub plan: UtterancePlan,
    pub seed: u64,
}

/// Plans every utterance of a corpus (deterministic in the request).
pub fn plan_corpus(profiles: &[DialectProfile], req: &SynthRequest) -> Result<Vec<SynthItem>> {
    if profiles.is_empty() {
        return Err(CorpusError::InvalidRequest("no profiles".into()));
    }
    if req.speakers_per_dialect == 0 || req.utterances_per_speaker == 0 {
        return Err(CorpusError::InvalidRequest("speaker and utterance counts must be at least 1".into()));
    }
    let mut items = Vec::new();
    for (d, profile) in profiles.iter().enumerate() {
        profile.validate()?;
        for s in 0..req.speakers_per_dialect {
            let speaker_seed = derive_seed(req.seed, ((d as u64) << 32) | s as u64);
            let voice = SpeakerVoice::draw(&mut ChaCha8Rng::seed_from_u64(speaker_seed));
            let speaker_id = format!("{}_s{:02}", profile.dialect, s + 1);
            for u in 0..req.utterances_per_speaker {
                let index = items.len() as u64;
                let seed = derive_seed(req.seed ^ 0x7574_7465_7261_6e63, index);
                let plan = UtterancePlan::draw(profile, &voice, &mut ChaCha8Rng::seed_from_u64(seed));
                items.push(SynthItem {
                    utterance_id: format!("{speaker_id}_u{:02}", u + 1),
                    speaker_id: speaker_id.clone(),
                    dialect: profile.dialect.clone(),
                    plan,
                    seed,
                });
            }
        }
    }
    Ok(items)
}

/// Renders one planned utterance to a buffer.
pub fn render_item(item: &SynthItem) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
    rng.set_stream(1);
    let samples = render(&item.plan, SYNTH_SAMPLE_RATE_HZ, &mut rng);
    AudioBuffer::new(samples, SYNTH_SAMPLE_RATE_HZ, item.utterance_id.clone()).expect("rendered audio is in range")
}

/// Writes `manifest.csv`, `wav/<id>.wav` and `truth/<id>.{segments,pitch}.csv`.
pub fn synth_corpus(profiles: &[DialectProfile], req: &SynthRequest, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let items = plan_corpus(profiles, req)?;
    let wav_dir = out_dir.join("wav");
    let truth_dir = out_dir.join("truth");
    for d in [&wav_dir, &truth_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }

    let written = par::map(&items, |item| -> Result<ManifestRow> {
        let buffer = render_item(item);
        let wav_path = wav_dir.join(format!("{}.wav", item.utterance_id));
        write_wav(&wav_path, &buffer).map_err(|e| CorpusError::Io {
            path: wav_path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let seg_path = truth_dir.join(format!("{}.segments.csv", item.utterance_id));
        let mut seg_csv = Vec::new();
        item.plan
            .segment_track(SILENCE_PAD_S)
            .write_csv(&mut seg_csv)
            .map_err(io_err(&seg_path))?;
        fs::write(&seg_path, seg_csv).map_err(io_err(&seg_path))?;
        let pitch_path = truth_dir.join(format!("{}.pitch.csv", item.utterance_id));
        fs::write(&pitch_path, truth_pitch_csv(&item.plan, buffer.duration_s())).map_err(io_err(&pitch_path))?;
        Ok(ManifestRow {
            utterance_id: item.utterance_id.clone(),
            wav_path,
            speaker_id: item.speaker_id.clone(),
            dialect: item.dialect.clone(),
            duration_s: Some(buffer.duration_s()),
        })
    });
    let manifest = Manifest {
        rows: written.into_iter().collect::<Result<_>>()?,
    };
    let manifest_path = out_dir.join("manifest.csv");
    let mut text = Vec::new();
    manifest
        .write_csv(out_dir, &mut text)
        .map_err(io_err(&manifest_path))?;
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Start offset of speech in synthesized recordings.
pub fn silence_pad_s() -> f64 {
    SILENCE_PAD_S
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> DialectProfile {
        default_profiles().remove(0)
    }

    #[test]
    fn default_profiles_are_valid() {
        let p = default_profiles();
        assert_eq!(p.len(), 5);
        for prof in &p {
            assert!(prof.expected_pct_v() < 50.0, "{}", prof.dialect);
        }
    }

    #[test]
    fn plans_alternate_and_respect_floors() {
        let p = profile();
        let voice = SpeakerVoice {
            pitch_offset_st: 0.0,
            duration_scale: 1.0,
        };
        let plan = UtterancePlan::draw(&p, &voice, &mut ChaCha8Rng::seed_from_u64(4));
        let kinds: Vec<SegmentKind> = plan.segments.iter().map(|s| s.kind).collect();
        assert_eq!(kinds.first(), Some(&SegmentKind::Consonant));
        assert_eq!(kinds.last(), Some(&SegmentKind::Consonant));
        for w in kinds.windows(2) {
            assert_ne!(w[0], w[1]);
        }
        for s in &plan.segments {
            let floor = match s.kind {
                SegmentKind::Vowel => MIN_VOWEL_MS,
                SegmentKind::Consonant => MIN_CONSONANT_MS,
            };
            assert!(s.duration_s * 1000.0 >= floor * p.tempo_scale().min(1.0) - 1e-9);
        }
    }

    #[test]
    fn planning_is_deterministic() {
        let req = SynthRequest {
            speakers_per_dialect: 2,
            utterances_per_speaker: 2,
            seed: 5,
        };
        let a = plan_corpus(&default_profiles(), &req).unwrap();
        let b = plan_corpus(&default_profiles(), &req).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.plan, y.plan);
            assert_eq!(x.utterance_id, y.utterance_id);
        }
        assert_eq!(render_item(&a[0]), render_item(&b[0]));
    }

    #[test]
    fn profile_validation() {
        let mut p = profile();
        p.vowel_std_ms = 0.0;
        assert!(matches!(p.validate(), Err(CorpusError::InvalidProfile { .. })));
        let mut p = profile();
        p.syllables_min = 1;
        assert!(p.validate().is_err());
        assert!(matches!(parse_profiles("nope = 1"), Err(CorpusError::ProfileParse(_))));
    }

    #[test]
    fn derived_seeds_spread() {
        let seeds: HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
