//! Framewise F0 estimation with a voicing decision.
//!
//! Each frame is scored with the normalized cross-correlation
//! `r(τ) = Σ x[j]·x[j+τ] / sqrt(Σ x[j]² · Σ x[j+τ]²)` over a 40 ms window,
//! computed through one FFT autocorrelation plus prefix energies. The best
//! local maximum (with a small penalty on long lags to discourage octave
//! drops) is refined by a parabola through its neighbours.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{amplitude_db, frame_count, frame_rms, hop_samples, AudioBuffer, HOP_S};

const WINDOW_S: f64 = 0.040;

#[derive(Debug, Error, PartialEq)]
pub enum PitchError {
    #[error("BandTooNarrow: ceiling/floor ratio {0:.3} is below 1.1")]
    BandTooNarrow(f64),
    #[error("BufferTooShort: {samples} samples, need at least {needed}")]
    BufferTooShort { samples: usize, needed: usize },
    #[error("invalid pitch band [{floor}, {ceil}] Hz at {sample_rate} Hz sampling")]
    InvalidBand { floor: f64, ceil: f64, sample_rate: u32 },
    #[error("NonPositiveFrequency: {0} Hz")]
    NonPositiveFrequency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchConfig {
    pub floor_hz: f64,
    pub ceil_hz: f64,
    /// Minimum normalized correlation at the chosen lag for a voiced frame.
    pub voicing_threshold: f64,
    /// Frames quieter than the loudest frame by more than this are unvoiced (dB, < 0).
    pub silence_db: f64,
    /// Penalty per octave of lag, favouring the shortest plausible period.
    pub octave_cost: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            floor_hz: 75.0,
            ceil_hz: 500.0,
            voicing_threshold: 0.45,
            silence_db: -35.0,
            octave_cost: 0.01,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate_hz: u32) -> Result<(), PitchError> {
        let invalid = PitchError::InvalidBand {
            floor: self.floor_hz,
            ceil: self.ceil_hz,
            sample_rate: sample_rate_hz,
        };
        if !(self.floor_hz > 0.0) || !(self.ceil_hz > self.floor_hz) {
            return Err(invalid);
        }
        if self.ceil_hz > sample_rate_hz as f64 / 4.0 {
            return Err(invalid);
        }
        let ratio = self.ceil_hz / self.floor_hz;
        if ratio < 1.1 {
            return Err(PitchError::BandTooNarrow(ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    pub time_s: f64,
    /// `None` marks an unvoiced frame.
    pub f0_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub frames: Vec<PitchFrame>,
    pub hop_s: f64,
    pub f0_floor_hz: f64,
    pub f0_ceil_hz: f64,
}

impl PitchTrack {
    /// Builds a track on the shared frame grid from per-frame values.
    pub fn from_values(values: &[Option<f64>], f0_floor_hz: f64, f0_ceil_hz: f64) -> Self {
        let frames = values
            .iter()
            .enumerate()
            .map(|(i, &f0_hz)| PitchFrame {
                time_s: (i as f64 + 0.5) * HOP_S,
                f0_hz,
            })
            .collect();
        Self {
            frames,
            hop_s: HOP_S,
            f0_floor_hz,
            f0_ceil_hz,
        }
    }

    pub fn voiced(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.frames
            .iter()
            .filter_map(|f| f.f0_hz.map(|hz| (f.time_s, hz)))
    }

    pub fn is_voiced(&self, index: usize) -> bool {
        self.frames.get(index).is_some_and(|f| f.f0_hz.is_some())
    }

    /// Writes `time_s,f0_hz` rows, unvoiced frames as `NA`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time_s,f0_hz")?;
        for f in &self.frames {
            match f.f0_hz {
                Some(hz) => writeln!(out, "{:.4},{:.3}", f.time_s, hz)?,
                None => writeln!(out, "{:.4},NA", f.time_s)?,
            }
        }
        Ok(())
    }
}

/// Frequency ratio in semitones: `12 · log2(f_hi / f_lo)`.
pub fn hz_to_semitones(f_hi: f64, f_lo: f64) -> Result<f64, PitchError> {
    for f in [f_hi, f_lo] {
        if !(f > 0.0) {
            return Err(PitchError::NonPositiveFrequency(f));
        }
    }
    Ok(12.0 * (f_hi / f_lo).log2())
}

pub fn estimate_pitch(buffer: &AudioBuffer, cfg: &PitchConfig) -> Result<PitchTrack, PitchError> {
    let sr = buffer.sample_rate_hz();
    cfg.validate(sr)?;
    let needed = (2.0 * sr as f64 / cfg.floor_hz).ceil() as usize;
    if buffer.len() < needed {
        return Err(PitchError::BufferTooShort {
            samples: buffer.len(),
            needed,
        });
    }

    let samples = buffer.samples();
    let hop = hop_samples(sr);
    let n_frames = frame_count(samples.len(), hop);
    let window_s = WINDOW_S.max(2.0 / cfg.floor_hz);
    let win = (window_s * sr as f64).round() as usize;

    let rms = frame_rms(samples, sr, window_s);
    let peak_db = amplitude_db(rms.iter().cloned().fold(0.0, f64::max));

    let lag_min = ((sr as f64 / cfg.ceil_hz).floor() as usize).max(2);
    let lag_max = ((sr as f64 / cfg.floor_hz).ceil() as usize).min(win - 2);
    let mut scorer = LagScorer::new(win);

    let values: Vec<Option<f64>> = (0..n_frames)
        .map(|i| {
            if !peak_db.is_finite() || amplitude_db(rms[i]) < peak_db + cfg.silence_db {
                return None;
            }
            let centre2 = (2 * i + 1) * hop;
            let lo = centre2 as isize / 2 - win as isize / 2;
            if !scorer.load(samples, lo) {
                return None;
            }
            let r = scorer.normalized_correlation(lag_max + 1);
            pick_period(&r, lag_min, lag_max, sr as f64, cfg)
                .map(|lag| (sr as f64 / lag).clamp(cfg.floor_hz, cfg.ceil_hz))
        })
        .collect();

    Ok(PitchTrack::from_values(&values, cfg.floor_hz, cfg.ceil_hz))
}

/// Chooses the best lag among local correlation maxima and refines it.
fn pick_period(
    r: &[f64],
    lag_min: usize,
    lag_max: usize,
    sample_rate: f64,
    cfg: &PitchConfig,
) -> Option<f64> {
    let mut best: Option<(f64, f64, f64)> = None;
    for lag in lag_min.max(1)..=lag_max {
        if lag + 1 >= r.len() {
            break;
        }
        if !(r[lag] > r[lag - 1] && r[lag] >= r[lag + 1]) {
            continue;
        }
        // Score the interpolated peak: a bright source can lose most of its
        // correlation half a sample off the true period, which would favour
        // whichever multiple happens to land nearer an integer lag.
        let (offset, peak) = parabolic_peak(r[lag - 1], r[lag], r[lag + 1]);
        let period = lag as f64 + offset;
        let score = peak - cfg.octave_cost * (cfg.floor_hz * period / sample_rate).log2();
        if best.is_none_or(|(_, _, s)| score > s) {
            best = Some((period, peak, score));
        }
    }
    let (period, peak, _) = best?;
    if peak < cfg.voicing_threshold {
        return None;
    }
    Some(period)
}

/// Vertex of the parabola through three equally spaced points, as an
/// offset from the middle point plus the interpolated height.
fn parabolic_peak(left: f64, centre: f64, right: f64) -> (f64, f64) {
    let denom = left - 2.0 * centre + right;
    if denom.abs() < 1e-15 {
        return (0.0, centre);
    }
    let offset = (0.5 * (left - right) / denom).clamp(-0.5, 0.5);
    let height = centre - 0.25 * (left - right) * offset;
    (offset, height)
}

struct LagScorer {
    win: usize,
    frame: Vec<f64>,
    spectrum: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
    prefix: Vec<f64>,
}

impl LagScorer {
    fn new(win: usize) -> Self {
        let n_fft = (2 * win).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            win,
            frame: vec![0.0; win],
            spectrum: vec![Complex::default(); n_fft],
            forward,
            inverse,
            scratch: vec![Complex::default(); scratch_len],
            prefix: vec![0.0; win + 1],
        }
    }

    /// Copies the mean-removed window starting at `lo` (zero padded).
    /// Returns false when the window carries no energy.
    fn load(&mut self, samples: &[f64], lo: isize) -> bool {
        for (j, slot) in self.frame.iter_mut().enumerate() {
            let idx = lo + j as isize;
            *slot = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
        }
        let mean = self.frame.iter().sum::<f64>() / self.win as f64;
        self.frame.iter_mut().for_each(|s| *s -= mean);
        let mut acc = 0.0;
        self.prefix[0] = 0.0;
        for (j, s) in self.frame.iter().enumerate() {
            acc += s * s;
            self.prefix[j + 1] = acc;
        }
        acc > 0.0
    }

    /// `r(τ)` for `τ` in `0..=max_lag`.
    fn normalized_correlation(&mut self, max_lag: usize) -> Vec<f64> {
        for (slot, &s) in self.spectrum.iter_mut().zip(self.frame.iter()) {
            *slot = Complex::new(s, 0.0);
        }
        for slot in self.spectrum[self.win..].iter_mut() {
            *slot = Complex::default();
        }
        self.forward
            .process_with_scratch(&mut self.spectrum, &mut self.scratch);
        for c in self.spectrum.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.inverse
            .process_with_scratch(&mut self.spectrum, &mut self.scratch);
        let scale = self.spectrum.len() as f64;
        let total = self.prefix[self.win];
        (0..=max_lag.min(self.win - 1))
            .map(|lag| {
                let head = self.prefix[self.win - lag];
                let tail = total - self.prefix[lag];
                let denom = (head * tail).sqrt();
                if denom <= total * 1e-12 {
                    0.0
                } else {
                    self.spectrum[lag].re / scale / denom
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(s, sr, "sine").unwrap()
    }

    #[test]
    fn semitone_examples() {
        assert!((hz_to_semitones(200.0, 100.0).unwrap() - 12.0).abs() < 1e-12);
        assert_eq!(hz_to_semitones(150.0, 150.0).unwrap(), 0.0);
        let st = hz_to_semitones(330.3, 156.3).unwrap();
        assert!((st - 12.95).abs() < 0.01, "{st}");
        assert!(matches!(
            hz_to_semitones(0.0, 100.0),
            Err(PitchError::NonPositiveFrequency(_))
        ));
    }

    #[test]
    fn pure_tone_interior_frames_are_voiced_near_200hz() {
        let track = estimate_pitch(&sine(200.0, 1.0, 16000), &PitchConfig::default()).unwrap();
        let n = track.frames.len();
        for f in &track.frames[3..n - 3] {
            let hz = f.f0_hz.expect("interior frame voiced");
            assert!((198.0..=202.0).contains(&hz), "{hz}");
        }
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = (0..16000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let buf = AudioBuffer::new(s, 16000, "noise").unwrap();
        let track = estimate_pitch(&buf, &PitchConfig::default()).unwrap();
        let unvoiced = track.frames.iter().filter(|f| f.f0_hz.is_none()).count();
        assert!(unvoiced as f64 >= 0.9 * track.frames.len() as f64);
    }

    #[test]
    fn zeros_are_unvoiced() {
        let buf = AudioBuffer::new(vec![0.0; 16000], 16000, "z").unwrap();
        let track = estimate_pitch(&buf, &PitchConfig::default()).unwrap();
        assert!(track.frames.iter().all(|f| f.f0_hz.is_none()));
    }

    #[test]
    fn band_and_length_errors() {
        let cfg = PitchConfig {
            floor_hz: 100.0,
            ceil_hz: 105.0,
            ..PitchConfig::default()
        };
        assert!(matches!(
            estimate_pitch(&sine(100.0, 1.0, 16000), &cfg),
            Err(PitchError::BandTooNarrow(_))
        ));
        let short = AudioBuffer::new(vec![0.1; 100], 16000, "s").unwrap();
        assert!(matches!(
            estimate_pitch(&short, &PitchConfig::default()),
            Err(PitchError::BufferTooShort { .. })
        ));
    }

    #[test]
    fn frame_times_are_on_the_grid() {
        let track = estimate_pitch(&sine(150.0, 0.5, 16000), &PitchConfig::default()).unwrap();
        for w in track.frames.windows(2) {
            assert!((w[1].time_s - w[0].time_s - HOP_S).abs() < 1e-12);
        }
    }

    #[test]
    fn parabola_vertex() {
        // y = -(x - 0.25)^2 sampled at -1, 0, 1
        let f = |x: f64| -(x - 0.25) * (x - 0.25);
        let (off, h) = parabolic_peak(f(-1.0), f(0.0), f(1.0));
        assert!((off - 0.25).abs() < 1e-12);
        assert!(h.abs() < 1e-12);
    }
}
