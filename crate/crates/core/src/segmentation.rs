//! Syllable-nucleus detection from band-pass intensity and the coarse
//! consonant/vowel segmentation built on top of it: every nucleus is a vowel
//! segment and whatever lies between nuclei is a consonant segment.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{frame_rms, AudioBuffer, HOP_S};
use crate::pitch::PitchTrack;

/// Floor of the intensity contour in dB.
pub const DB_FLOOR: f64 = -120.0;
const INTENSITY_WINDOW_S: f64 = 0.025;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("InvalidBand: [{low}, {high}] Hz with Nyquist {nyquist} Hz")]
    InvalidBand { low: f64, high: f64, nyquist: f64 },
    #[error("NoNuclei: utterance has no syllable nucleus")]
    NoNuclei,
    #[error("invalid nucleus list: {0}")]
    InvalidNuclei(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NucleusConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// A nucleus extends from its intensity peak while frames stay within this many dB.
    pub peak_drop_db: f64,
    pub min_nucleus_ms: f64,
    /// Peaks closer than this are fused into a single nucleus.
    pub merge_ms: f64,
    /// Leading/trailing gaps shorter than this do not become consonant segments.
    pub edge_consonant_ms: f64,
}

impl Default for NucleusConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 300.0,
            band_high_hz: 2500.0,
            peak_drop_db: 3.0,
            min_nucleus_ms: 40.0,
            merge_ms: 60.0,
            edge_consonant_ms: 30.0,
        }
    }
}

impl NucleusConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.band_low_hz >= 0.0 && self.band_high_hz > self.band_low_hz) {
            return Err(format!(
                "nucleus band [{}, {}] Hz is not increasing",
                self.band_low_hz, self.band_high_hz
            ));
        }
        for (name, v) in [
            ("peak_drop_db", self.peak_drop_db),
            ("min_nucleus_ms", self.min_nucleus_ms),
            ("merge_ms", self.merge_ms),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.edge_consonant_ms >= 0.0) {
            return Err(format!(
                "edge_consonant_ms must be non-negative, got {}",
                self.edge_consonant_ms
            ));
        }
        Ok(())
    }
}

/// Framewise level of the band-passed signal, dB re full scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityContour {
    pub db: Vec<f64>,
    pub hop_s: f64,
    pub duration_s: f64,
}

/// Second-order section in transposed direct form II.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn butterworth(kind: FilterKind, cutoff_hz: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b = match kind {
            FilterKind::LowPass => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            FilterKind::HighPass => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

#[derive(Debug, Clone, Copy)]
enum FilterKind {
    LowPass,
    HighPass,
}

/// Butterworth high-pass at `low_hz` cascaded with a Butterworth low-pass at
/// `high_hz`; a zero `low_hz` or a Nyquist `high_hz` drops that section.
pub fn band_pass(buffer: &AudioBuffer, low_hz: f64, high_hz: f64) -> Result<Vec<f64>, SegmentationError> {
    let sr = buffer.sample_rate_hz() as f64;
    let nyquist = sr / 2.0;
    if !(low_hz >= 0.0 && high_hz > low_hz && high_hz <= nyquist) {
        return Err(SegmentationError::InvalidBand {
            low: low_hz,
            high: high_hz,
            nyquist,
        });
    }
    let mut sections = Vec::with_capacity(2);
    if low_hz > 0.0 {
        sections.push(Biquad::butterworth(FilterKind::HighPass, low_hz, sr));
    }
    if high_hz < 0.999 * nyquist {
        sections.push(Biquad::butterworth(FilterKind::LowPass, high_hz, sr));
    }
    Ok(buffer
        .samples()
        .iter()
        .map(|&x| sections.iter_mut().fold(x, |acc, s| s.process(acc)))
        .collect())
}

pub fn band_intensity(
    buffer: &AudioBuffer,
    low_hz: f64,
    high_hz: f64,
) -> Result<IntensityContour, SegmentationError> {
    let filtered = band_pass(buffer, low_hz, high_hz)?;
    let db = frame_rms(&filtered, buffer.sample_rate_hz(), INTENSITY_WINDOW_S)
        .into_iter()
        .map(|rms| {
            if rms > 0.0 {
                (20.0 * rms.log10()).max(DB_FLOOR)
            } else {
                DB_FLOOR
            }
        })
        .collect();
    Ok(IntensityContour {
        db,
        hop_s: HOP_S,
        duration_s: buffer.duration_s(),
    })
}

/// A half-open time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }
}

/// Sorted, strictly separated syllable nuclei within an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusList {
    nuclei: Vec<Interval>,
    utterance_duration_s: f64,
}

impl NucleusList {
    /// Validates ordering and bounds. Adjacent nuclei must leave a gap
    /// between them so the derived segments alternate.
    pub fn new(nuclei: Vec<Interval>, utterance_duration_s: f64) -> Result<Self, SegmentationError> {
        let bad = |m: String| Err(SegmentationError::InvalidNuclei(m));
        if !(utterance_duration_s > 0.0) {
            return bad(format!("utterance duration {utterance_duration_s} s"));
        }
        for n in &nuclei {
            if !(n.end_s > n.start_s) || n.start_s < 0.0 || n.end_s > utterance_duration_s + 1e-9 {
                return bad(format!(
                    "nucleus [{}, {}] outside [0, {utterance_duration_s}] or empty",
                    n.start_s, n.end_s
                ));
            }
        }
        for w in nuclei.windows(2) {
            if !(w[1].start_s > w[0].end_s) {
                return bad(format!(
                    "nuclei [{}, {}] and [{}, {}] overlap or touch",
                    w[0].start_s, w[0].end_s, w[1].start_s, w[1].end_s
                ));
            }
        }
        Ok(Self {
            nuclei,
            utterance_duration_s,
        })
    }

    pub fn nuclei(&self) -> &[Interval] {
        &self.nuclei
    }

    pub fn len(&self) -> usize {
        self.nuclei.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nuclei.is_empty()
    }

    pub fn utterance_duration_s(&self) -> f64 {
        self.utterance_duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    #[serde(rename = "V")]
    Vowel,
    #[serde(rename = "C")]
    Consonant,
}

impl SegmentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentKind::Vowel => "V",
            SegmentKind::Consonant => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub interval: Interval,
    pub kind: SegmentKind,
}

impl Segment {
    /// Rounded to the nanosecond so equal frame spans give equal durations.
    pub fn duration_ms(&self) -> f64 {
        (self.interval.duration_s() * 1e9).round() / 1e6
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTrack {
    pub segments: Vec<Segment>,
    pub utterance_duration_s: f64,
}

impl SegmentTrack {
    pub fn durations_ms(&self, kind: SegmentKind) -> Vec<f64> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .map(Segment::duration_ms)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "start_s,end_s,kind")?;
        for s in &self.segments {
            writeln!(
                out,
                "{:.4},{:.4},{}",
                s.interval.start_s,
                s.interval.end_s,
                s.kind.as_str()
            )?;
        }
        Ok(())
    }
}

/// Finds voiced intensity peaks and grows each into a nucleus.
///
/// A nucleus is the maximal run of voiced frames around a peak whose level
/// stays within `peak_drop_db` of it. Regions that touch, or whose peaks are
/// closer than `merge_ms`, are fused; survivors must last `min_nucleus_ms`.
pub fn detect_nuclei(intensity: &IntensityContour, pitch: &PitchTrack, cfg: &NucleusConfig) -> NucleusList {
    let n = intensity.db.len().min(pitch.frames.len());
    let db = &intensity.db[..n];
    let voiced: Vec<bool> = (0..n).map(|i| pitch.is_voiced(i)).collect();
    let level = |i: isize| -> f64 {
        if i < 0 || i as usize >= n || !voiced[i as usize] {
            f64::NEG_INFINITY
        } else {
            db[i as usize]
        }
    };

    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| voiced[i])
        .filter(|&i| {
            let here = db[i];
            here >= level(i as isize - 1) && here > level(i as isize + 1)
        })
        .collect();
    // loudest first; index order breaks ties
    peaks.sort_by(|&a, &b| db[b].total_cmp(&db[a]).then(a.cmp(&b)));

    let mut regions: Vec<Region> = Vec::new();
    for p in peaks {
        if regions.iter().any(|r| r.first <= p && p <= r.last) {
            continue;
        }
        let floor = db[p] - cfg.peak_drop_db;
        let mut first = p;
        while first > 0 && voiced[first - 1] && db[first - 1] >= floor {
            first -= 1;
        }
        let mut last = p;
        while last + 1 < n && voiced[last + 1] && db[last + 1] >= floor {
            last += 1;
        }
        regions.push(Region {
            first,
            last,
            peak_lo: p,
            peak_hi: p,
        });
    }
    regions.sort_by_key(|r| r.first);

    let merge_frames = cfg.merge_ms / 1000.0 / intensity.hop_s - 1e-9;
    let mut groups: Vec<Region> = regions;
    loop {
        let before = groups.len();
        let mut merged: Vec<Region> = Vec::with_capacity(groups.len());
        for r in groups {
            match merged.last_mut() {
                Some(prev)
                    if r.first <= prev.last + 1
                        || (r.peak_lo as f64 - prev.peak_hi as f64).abs() < merge_frames =>
                {
                    prev.last = prev.last.max(r.last);
                    prev.peak_lo = prev.peak_lo.min(r.peak_lo);
                    prev.peak_hi = prev.peak_hi.max(r.peak_hi);
                }
                _ => merged.push(r),
            }
        }
        groups = merged;
        if groups.len() == before {
            break;
        }
    }

    let min_frames = cfg.min_nucleus_ms / 1000.0 / intensity.hop_s - 1e-9;
    let hop = intensity.hop_s;
    let duration = intensity.duration_s;
    let nuclei = groups
        .into_iter()
        .filter(|r| (r.last - r.first + 1) as f64 >= min_frames)
        .map(|r| Interval::new(r.first as f64 * hop, ((r.last + 1) as f64 * hop).min(duration)))
        .collect();
    NucleusList::new(nuclei, duration).expect("frame-aligned regions are separated")
}

#[derive(Debug, Clone, Copy)]
struct Region {
    first: usize,
    last: usize,
    peak_lo: usize,
    peak_hi: usize,
}

/// Vowel segments from nuclei, consonant segments from the gaps between them.
/// Edge gaps shorter than `edge_consonant_ms` are left unlabelled.
pub fn coarse_cv_segment(nuclei: &NucleusList, edge_consonant_ms: f64) -> Result<SegmentTrack, SegmentationError> {
    let list = nuclei.nuclei();
    let (first, last) = match (list.first(), list.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(SegmentationError::NoNuclei),
    };
    let total = nuclei.utterance_duration_s();
    let edge_min = edge_consonant_ms / 1000.0;
    let consonant = |start_s, end_s| Segment {
        interval: Interval::new(start_s, end_s),
        kind: SegmentKind::Consonant,
    };

    let mut segments = Vec::with_capacity(2 * list.len() + 1);
    if first.start_s >= edge_min - 1e-12 && first.start_s > 0.0 {
        segments.push(consonant(0.0, first.start_s));
    }
    for (i, n) in list.iter().enumerate() {
        if i > 0 {
            segments.push(consonant(list[i - 1].end_s, n.start_s));
        }
        segments.push(Segment {
            interval: *n,
            kind: SegmentKind::Vowel,
        });
    }
    let tail = total - last.end_s;
    if tail >= edge_min - 1e-12 && tail > 0.0 {
        segments.push(consonant(last.end_s, total));
    }
    Ok(SegmentTrack {
        segments,
        utterance_duration_s: total,
    })
}
