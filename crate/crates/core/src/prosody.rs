//! Utterance-level rhythm and intonation metrics.
//!
//! Rhythm metrics come from the coarse C/V segmentation (interval measures,
//! their normalized forms, pairwise variability indices and speech rate).
//! Intonation metrics pool the voiced F0 values that fall inside nuclei.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{trim_silence, AudioBuffer, AudioError, SilenceGate};
use crate::pitch::{estimate_pitch, PitchConfig, PitchError, PitchTrack};
use crate::segmentation::{
    band_intensity, coarse_cv_segment, detect_nuclei, NucleusConfig, NucleusList, SegmentKind,
    SegmentTrack, SegmentationError,
};

pub const FEATURE_COUNT: usize = 14;

/// The fourteen prosodic features, in the canonical column order of the
/// feature table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    PctV,
    DeltaC,
    DeltaV,
    VarcoC,
    VarcoV,
    RpviC,
    NpviV,
    SpeechRate,
    PitchRange,
    PitchTop,
    PitchBottom,
    PitchMedian,
    TrajIntra,
    TrajInter,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::PctV,
        Feature::DeltaC,
        Feature::DeltaV,
        Feature::VarcoC,
        Feature::VarcoV,
        Feature::RpviC,
        Feature::NpviV,
        Feature::SpeechRate,
        Feature::PitchRange,
        Feature::PitchTop,
        Feature::PitchBottom,
        Feature::PitchMedian,
        Feature::TrajIntra,
        Feature::TrajInter,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::PctV => "pct_v",
            Feature::DeltaC => "delta_c",
            Feature::DeltaV => "delta_v",
            Feature::VarcoC => "varco_c",
            Feature::VarcoV => "varco_v",
            Feature::RpviC => "rpvi_c",
            Feature::NpviV => "npvi_v",
            Feature::SpeechRate => "speech_rate",
            Feature::PitchRange => "pitch_range",
            Feature::PitchTop => "pitch_top",
            Feature::PitchBottom => "pitch_bottom",
            Feature::PitchMedian => "pitch_median",
            Feature::TrajIntra => "traj_intra",
            Feature::TrajInter => "traj_inter",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown feature `{s}`"))
    }
}

/// One utterance's prosodic description.
///
/// Durations are in ms, Varco and nPVI are ×100, pitch levels in Hz, the
/// range in semitones and the trajectories in semitones per second.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub pct_v: f64,
    pub delta_c: f64,
    pub delta_v: f64,
    pub varco_c: f64,
    pub varco_v: f64,
    pub rpvi_c: f64,
    pub npvi_v: f64,
    pub speech_rate: f64,
    pub pitch_range: f64,
    pub pitch_top: f64,
    pub pitch_bottom: f64,
    pub pitch_median: f64,
    pub traj_intra: f64,
    pub traj_inter: f64,
}

impl FeatureVector {
    pub fn from_parts(rhythm: &RhythmMetrics, intonation: &IntonationMetrics) -> Self {
        Self {
            pct_v: rhythm.pct_v,
            delta_c: rhythm.delta_c,
            delta_v: rhythm.delta_v,
            varco_c: rhythm.varco_c,
            varco_v: rhythm.varco_v,
            rpvi_c: rhythm.rpvi_c,
            npvi_v: rhythm.npvi_v,
            speech_rate: rhythm.speech_rate,
            pitch_range: intonation.range,
            pitch_top: intonation.top,
            pitch_bottom: intonation.bottom,
            pitch_median: intonation.median,
            traj_intra: intonation.traj_intra,
            traj_inter: intonation.traj_inter,
        }
    }

    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.pct_v,
            self.delta_c,
            self.delta_v,
            self.varco_c,
            self.varco_v,
            self.rpvi_c,
            self.npvi_v,
            self.speech_rate,
            self.pitch_range,
            self.pitch_top,
            self.pitch_bottom,
            self.pitch_median,
            self.traj_intra,
            self.traj_inter,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            pct_v: v[0],
            delta_c: v[1],
            delta_v: v[2],
            varco_c: v[3],
            varco_v: v[4],
            rpvi_c: v[5],
            npvi_v: v[6],
            speech_rate: v[7],
            pitch_range: v[8],
            pitch_top: v[9],
            pitch_bottom: v[10],
            pitch_median: v[11],
            traj_intra: v[12],
            traj_inter: v[13],
        }
    }

    pub fn get(&self, feature: Feature) -> f64 {
        self.to_array()[feature.index()]
    }

    /// Values of `features`, in the order given.
    pub fn select(&self, features: &[Feature]) -> Vec<f64> {
        let all = self.to_array();
        features.iter().map(|f| all[f.index()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProsodyError {
    #[error("TooFewSegments: need at least {needed} {kind} segments, found {found}")]
    TooFewSegments {
        kind: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("NoVoicedNucleus: no voiced frame falls inside a nucleus")]
    NoVoicedNucleus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhythmMetrics {
    pub pct_v: f64,
    pub delta_v: f64,
    pub delta_c: f64,
    pub varco_v: f64,
    pub varco_c: f64,
    pub rpvi_c: f64,
    pub npvi_v: f64,
    pub speech_rate: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn rhythm_metrics(track: &SegmentTrack) -> Result<RhythmMetrics, ProsodyError> {
    let v = track.durations_ms(SegmentKind::Vowel);
    let c = track.durations_ms(SegmentKind::Consonant);
    if v.len() < 2 {
        return Err(ProsodyError::TooFewSegments {
            kind: "V",
            needed: 2,
            found: v.len(),
        });
    }
    if c.len() < 2 {
        return Err(ProsodyError::TooFewSegments {
            kind: "C",
            needed: 2,
            found: c.len(),
        });
    }
    let total_s = track.utterance_duration_s;
    let delta_v = pop_std(&v);
    let delta_c = pop_std(&c);
    let rpvi_c = c.windows(2).map(|w| (w[0] - w[1]).abs()).sum::<f64>() / (c.len() - 1) as f64;
    let npvi_v = 100.0
        * v.windows(2)
            .map(|w| (w[0] - w[1]).abs() / ((w[0] + w[1]) / 2.0))
            .sum::<f64>()
        / (v.len() - 1) as f64;
    Ok(RhythmMetrics {
        // same nanosecond rounding as the segment durations
        pct_v: 100.0 * v.iter().sum::<f64>() / ((total_s * 1e9).round() / 1e6),
        delta_v,
        delta_c,
        varco_v: 100.0 * delta_v / mean(&v),
        varco_c: 100.0 * delta_c / mean(&c),
        rpvi_c,
        npvi_v,
        speech_rate: v.len() as f64 / total_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntonationMetrics {
    pub bottom: f64,
    pub median: f64,
    pub top: f64,
    pub range: f64,
    pub traj_intra: f64,
    pub traj_inter: f64,
}

/// Linear-interpolation percentile of an ascending slice (`p` in 0–100).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn semitones(a: f64, b: f64) -> f64 {
    12.0 * (a / b).log2()
}

pub fn intonation_metrics(track: &PitchTrack, nuclei: &NucleusList) -> Result<IntonationMetrics, ProsodyError> {
    let per_nucleus: Vec<Vec<f64>> = nuclei
        .nuclei()
        .iter()
        .map(|n| {
            track
                .voiced()
                .filter(|(t, _)| n.contains(*t))
                .map(|(_, hz)| hz)
                .collect()
        })
        .collect();

    let mut pooled: Vec<f64> = per_nucleus.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(ProsodyError::NoVoicedNucleus);
    }
    pooled.sort_by(f64::total_cmp);
    let bottom = percentile(&pooled, 2.0);
    let median = percentile(&pooled, 50.0);
    let top = percentile(&pooled, 98.0);

    let duration = nuclei.utterance_duration_s();
    let intra: f64 = per_nucleus
        .iter()
        .map(|f| f.windows(2).map(|w| semitones(w[1], w[0]).abs()).sum::<f64>())
        .sum();
    let voiced_nuclei: Vec<&Vec<f64>> = per_nucleus.iter().filter(|f| !f.is_empty()).collect();
    let inter: f64 = voiced_nuclei
        .windows(2)
        .map(|w| {
            let last = *w[0].last().expect("non-empty");
            let first = w[1][0];
            semitones(first, last).abs()
        })
        .sum();

    Ok(IntonationMetrics {
        bottom,
        median,
        top,
        range: semitones(top, bottom),
        traj_intra: intra / duration,
        traj_inter: inter / duration,
    })
}

/// Every tunable of the extraction chain.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub silence: SilenceGate,
    pub pitch: PitchConfig,
    pub nuclei: NucleusConfig,
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.silence.validate()?;
        self.nuclei.validate()?;
        if !(self.pitch.floor_hz > 0.0 && self.pitch.ceil_hz > self.pitch.floor_hz) {
            return Err(format!(
                "pitch band [{}, {}] Hz is not increasing",
                self.pitch.floor_hz, self.pitch.ceil_hz
            ));
        }
        if self.pitch.ceil_hz / self.pitch.floor_hz < 1.1 {
            return Err("pitch band ceiling/floor ratio below 1.1".into());
        }
        if !(0.0..=1.0).contains(&self.pitch.voicing_threshold) {
            return Err("voicing threshold must lie in [0, 1]".into());
        }
        if !(self.pitch.silence_db < 0.0) {
            return Err("pitch silence level must be negative".into());
        }
        Ok(())
    }
}

/// Why an utterance produced no feature vector.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum UnusableReason {
    #[error("EmptyAfterTrim")]
    EmptyAfterTrim,
    #[error("NoNuclei")]
    NoNuclei,
    #[error("TooFewSegments({kind}, {needed})")]
    TooFewSegments { kind: &'static str, needed: usize },
    #[error("NoVoicedNucleus")]
    NoVoicedNucleus,
    #[error("Audio({0})")]
    Audio(String),
    #[error("Pitch({0})")]
    Pitch(String),
    #[error("Segmentation({0})")]
    Segmentation(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("UnusableUtterance({reason})")]
pub struct UnusableUtterance {
    pub reason: UnusableReason,
}

impl From<UnusableReason> for UnusableUtterance {
    fn from(reason: UnusableReason) -> Self {
        Self { reason }
    }
}

/// Intermediate products of one extraction, kept for dumps and diagnostics.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub features: FeatureVector,
    pub trimmed_duration_s: f64,
    pub pitch: PitchTrack,
    pub nuclei: NucleusList,
    pub segments: SegmentTrack,
}

pub fn extract_features(buffer: &AudioBuffer, cfg: &ExtractConfig) -> Result<FeatureVector, UnusableUtterance> {
    analyze_utterance(buffer, cfg).map(|e| e.features)
}

/// Trim, track pitch, measure band intensity, find nuclei, segment, measure.
pub fn analyze_utterance(buffer: &AudioBuffer, cfg: &ExtractConfig) -> Result<Extraction, UnusableUtterance> {
    let trimmed = trim_silence(buffer, &cfg.silence).map_err(|e| match e {
        AudioError::EmptyAfterTrim => UnusableReason::EmptyAfterTrim,
        other => UnusableReason::Audio(other.to_string()),
    })?;
    let pitch = estimate_pitch(&trimmed, &cfg.pitch).map_err(|e: PitchError| UnusableReason::Pitch(e.to_string()))?;
    let intensity = band_intensity(&trimmed, cfg.nuclei.band_low_hz, cfg.nuclei.band_high_hz)
        .map_err(|e| UnusableReason::Segmentation(e.to_string()))?;
    let nuclei = detect_nuclei(&intensity, &pitch, &cfg.nuclei);
    let segments = coarse_cv_segment(&nuclei, cfg.nuclei.edge_consonant_ms).map_err(|e| match e {
        SegmentationError::NoNuclei => UnusableReason::NoNuclei,
        other => UnusableReason::Segmentation(other.to_string()),
    })?;
    let rhythm = rhythm_metrics(&segments).map_err(map_prosody)?;
    let intonation = intonation_metrics(&pitch, &nuclei).map_err(map_prosody)?;
    Ok(Extraction {
        features: FeatureVector::from_parts(&rhythm, &intonation),
        trimmed_duration_s: trimmed.duration_s(),
        pitch,
        nuclei,
        segments,
    })
}

fn map_prosody(e: ProsodyError) -> UnusableReason {
    match e {
        ProsodyError::TooFewSegments { kind, needed, .. } => UnusableReason::TooFewSegments { kind, needed },
        ProsodyError::NoVoicedNucleus => UnusableReason::NoVoicedNucleus,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{Interval, Segment};

    fn track_from(v: &[f64], c: &[f64], total_s: f64) -> SegmentTrack {
        // C V C V ... laid end to end; positions do not matter to the metrics
        let mut t = 0.0;
        let mut segments = Vec::new();
        let n = v.len().max(c.len());
        for i in 0..n {
            if let Some(&d) = c.get(i) {
                segments.push(Segment {
                    interval: Interval::new(t, t + d / 1000.0),
                    kind: SegmentKind::Consonant,
                });
                t += d / 1000.0;
            }
            if let Some(&d) = v.get(i) {
                segments.push(Segment {
                    interval: Interval::new(t, t + d / 1000.0),
                    kind: SegmentKind::Vowel,
                });
                t += d / 1000.0;
            }
        }
        SegmentTrack {
            segments,
            utterance_duration_s: total_s,
        }
    }

    #[test]
    fn worked_rhythm_example() {
        let m = rhythm_metrics(&track_from(&[100.0, 150.0, 50.0], &[80.0, 120.0], 0.5)).unwrap();
        assert!((m.pct_v - 60.0).abs() < 1e-9);
        assert!((m.delta_v - 40.824829046386306).abs() < 1e-9);
        assert!((m.delta_c - 20.0).abs() < 1e-9);
        assert!((m.varco_v - 40.824829046386306).abs() < 1e-9);
        assert!((m.varco_c - 20.0).abs() < 1e-9);
        assert!((m.rpvi_c - 40.0).abs() < 1e-9);
        assert!((m.npvi_v - 70.0).abs() < 1e-9);
        assert!((m.speech_rate - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_intervals_have_no_variability() {
        let m = rhythm_metrics(&track_from(&[90.0; 4], &[70.0; 4], 0.64)).unwrap();
        assert_eq!((m.delta_v, m.delta_c, m.rpvi_c, m.npvi_v), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn too_few_segments() {
        let err = rhythm_metrics(&track_from(&[90.0], &[70.0, 80.0], 0.3)).unwrap_err();
        assert_eq!(
            err,
            ProsodyError::TooFewSegments {
                kind: "V",
                needed: 2,
                found: 1
            }
        );
    }

    fn flat_nuclei_track(levels: &[(usize, usize, f64)], n_frames: usize) -> PitchTrack {
        let mut values = vec![None; n_frames];
        for &(a, b, hz) in levels {
            for v in values.iter_mut().take(b).skip(a) {
                *v = Some(hz);
            }
        }
        PitchTrack::from_values(&values, 75.0, 500.0)
    }

    #[test]
    fn flat_pitch_has_zero_range_and_movement() {
        let track = flat_nuclei_track(&[(10, 30, 200.0)], 50);
        let nuclei = NucleusList::new(vec![Interval::new(0.10, 0.30)], 0.5).unwrap();
        let m = intonation_metrics(&track, &nuclei).unwrap();
        assert_eq!((m.bottom, m.median, m.top), (200.0, 200.0, 200.0));
        assert_eq!((m.range, m.traj_intra, m.traj_inter), (0.0, 0.0, 0.0));
    }

    #[test]
    fn octave_jump_between_nuclei() {
        let track = flat_nuclei_track(&[(10, 40, 100.0), (120, 150, 200.0)], 200);
        let nuclei = NucleusList::new(vec![Interval::new(0.10, 0.40), Interval::new(1.20, 1.50)], 2.0).unwrap();
        let m = intonation_metrics(&track, &nuclei).unwrap();
        assert!((m.traj_inter - 6.0).abs() < 1e-12);
        assert_eq!(m.traj_intra, 0.0);
    }

    #[test]
    fn percentiles_of_a_linear_ramp() {
        let values: Vec<Option<f64>> = (0..101).map(|i| Some(100.0 + 3.0 * i as f64)).collect();
        let track = PitchTrack::from_values(&values, 75.0, 500.0);
        let nuclei = NucleusList::new(vec![Interval::new(0.0, 1.01)], 1.01).unwrap();
        let m = intonation_metrics(&track, &nuclei).unwrap();
        assert!((m.bottom - 106.0).abs() < 0.01);
        assert!((m.top - 394.0).abs() < 0.01);
        assert!((m.range - 12.0 * (m.top / m.bottom).log2()).abs() < 1e-9);
    }

    #[test]
    fn unvoiced_nuclei_are_rejected() {
        let track = flat_nuclei_track(&[], 50);
        let nuclei = NucleusList::new(vec![Interval::new(0.10, 0.30)], 0.5).unwrap();
        assert_eq!(intonation_metrics(&track, &nuclei), Err(ProsodyError::NoVoicedNucleus));
    }

    #[test]
    fn feature_names_round_trip() {
        for f in Feature::ALL {
            assert_eq!(f.name().parse::<Feature>().unwrap(), f);
            assert_eq!(Feature::ALL[f.index()], f);
        }
        let v = FeatureVector::from_array(std::array::from_fn(|i| i as f64));
        assert_eq!(v.get(Feature::TrajInter), 13.0);
        assert_eq!(v.select(&[Feature::PitchTop, Feature::PctV]), vec![9.0, 0.0]);
    }

    #[test]
    fn silent_input_is_unusable() {
        let buf = AudioBuffer::new(vec![0.0; 16000], 16000, "s").unwrap();
        assert_eq!(
            extract_features(&buf, &ExtractConfig::default()).unwrap_err().reason,
            UnusableReason::EmptyAfterTrim
        );
    }
}
