//! Mono PCM buffers, 16-bit WAV ingestion and the energy-gate silence trimmer.
//!
//! Every framewise analysis in the crate shares one frame grid: frame `i` is
//! centred at `(i + 0.5) * hop` and "owns" the samples `[i * hop, (i + 1) * hop)`.
//! Windows longer than the hop are zero-padded at the buffer edges. Keeping a
//! single grid lets intensity, pitch and silence decisions be compared frame
//! by frame without resampling.

use std::io::ErrorKind;
use std::path::Path;

use thiserror::Error;

/// Analysis hop shared by every framewise measurement (10 ms).
pub const HOP_S: f64 = 0.010;
/// Lowest sample rate the pipeline accepts.
pub const MIN_SAMPLE_RATE_HZ: u32 = 8000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("UnsupportedFormat: {0}")]
    UnsupportedFormat(String),
    #[error("CorruptHeader: {0}")]
    CorruptHeader(String),
    #[error("EmptyAfterTrim: every frame was classified as silence")]
    EmptyAfterTrim,
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono samples in `[-1, 1]` plus the sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    source_id: String,
}

impl AudioBuffer {
    pub fn new(
        samples: Vec<f64>,
        sample_rate_hz: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if sample_rate_hz < MIN_SAMPLE_RATE_HZ {
            return Err(AudioError::InvalidBuffer(format!(
                "sample rate {sample_rate_hz} Hz is below {MIN_SAMPLE_RATE_HZ} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidBuffer("buffer has no samples".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidBuffer(format!(
                "sample value {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copy with every sample multiplied by `gain`, clipped to `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| (s * gain).clamp(-1.0, 1.0))
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
            source_id: self.source_id.clone(),
        }
    }

    /// Number of hop-sized frames on the shared grid (at least one).
    pub fn frame_count(&self) -> usize {
        frame_count(self.samples.len(), hop_samples(self.sample_rate_hz))
    }
}

pub(crate) fn hop_samples(sample_rate_hz: u32) -> usize {
    ((HOP_S * sample_rate_hz as f64).round() as usize).max(1)
}

pub(crate) fn frame_count(n_samples: usize, hop: usize) -> usize {
    (n_samples / hop).max(1)
}

/// Sample range owned by frame `index`; the last frame absorbs the remainder.
pub(crate) fn owned_range(index: usize, hop: usize, n_frames: usize, n_samples: usize) -> (usize, usize) {
    let start = index * hop;
    let end = if index + 1 == n_frames {
        n_samples
    } else {
        (index + 1) * hop
    };
    (start.min(n_samples), end.min(n_samples))
}

/// Framewise RMS over windows of `window_s` centred on the shared grid.
/// Samples outside the buffer count as zeros.
pub fn frame_rms(samples: &[f64], sample_rate_hz: u32, window_s: f64) -> Vec<f64> {
    let hop = hop_samples(sample_rate_hz);
    let win = ((window_s * sample_rate_hz as f64).round() as usize).max(1);
    let n_frames = frame_count(samples.len(), hop);

    let mut prefix = Vec::with_capacity(samples.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for s in samples {
        acc += s * s;
        prefix.push(acc);
    }

    (0..n_frames)
        .map(|i| {
            let centre2 = (2 * i + 1) * hop;
            let lo = (centre2 as isize - win as isize).div_euclid(2);
            let hi = (lo + win as isize).clamp(0, samples.len() as isize) as usize;
            let lo = (lo.max(0) as usize).min(hi);
            let energy = (prefix[hi] - prefix[lo]).max(0.0);
            (energy / win as f64).sqrt()
        })
        .collect()
}

pub(crate) fn amplitude_db(rms: f64) -> f64 {
    if rms > 0.0 {
        20.0 * rms.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Reads a RIFF/WAVE file holding 16-bit integer PCM with one or two channels.
/// Stereo input is averaged down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.is_file() {
        return Err(AudioError::MissingFile(display));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound_error(e, &display))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{display}: {:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{display}: {} channels, expected 1 or 2",
            spec.channels
        )));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(|e| map_hound_error(e, &display))?;

    let channels = spec.channels as usize;
    let samples: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
            sum / channels as f64
        })
        .collect();
    if samples.is_empty() {
        return Err(AudioError::CorruptHeader(format!("{display}: no sample data")));
    }
    AudioBuffer::new(samples, spec.sample_rate, source_id_for(path))
}

fn source_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn map_hound_error(err: hound::Error, path: &str) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == ErrorKind::NotFound => {
            AudioError::MissingFile(path.to_string())
        }
        hound::Error::IoError(e) if e.kind() == ErrorKind::UnexpectedEof => {
            AudioError::CorruptHeader(format!("{path}: truncated file"))
        }
        hound::Error::IoError(e) => AudioError::Io {
            path: path.to_string(),
            source: e,
        },
        hound::Error::Unsupported => {
            AudioError::UnsupportedFormat(format!("{path}: unsupported WAVE encoding"))
        }
        hound::Error::FormatError(msg) => AudioError::CorruptHeader(format!("{path}: {msg}")),
        other => AudioError::CorruptHeader(format!("{path}: {other}")),
    }
}

/// Quantizes `samples` to 16-bit PCM and writes a canonical mono WAV file.
pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: display.clone(),
            source,
        },
        other => AudioError::CorruptHeader(format!("{display}: {other}")),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &buffer.samples {
        writer.write_sample(quantize(s)).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

pub(crate) fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Energy-gate parameters for [`trim_silence`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SilenceGate {
    /// Level below the loudest frame at which a frame counts as silent (dB, < 0).
    pub threshold_db: f64,
    /// Shortest silent stretch that gets removed.
    pub min_silence_ms: f64,
}

impl Default for SilenceGate {
    fn default() -> Self {
        Self {
            threshold_db: -40.0,
            min_silence_ms: 200.0,
        }
    }
}

impl SilenceGate {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold_db < 0.0) {
            return Err(format!(
                "silence threshold must be negative, got {} dB",
                self.threshold_db
            ));
        }
        if !(self.min_silence_ms > 0.0) {
            return Err(format!(
                "minimum silence must be positive, got {} ms",
                self.min_silence_ms
            ));
        }
        Ok(())
    }
}

const TRIM_WINDOW_S: f64 = 0.025;

/// Removes runs of silent frames lasting at least `gate.min_silence_ms`.
///
/// A frame is silent when its 25 ms RMS sits more than `|threshold_db|` below
/// the loudest frame. Removed runs take the samples their frames own on the
/// shared grid; what remains is concatenated in order.
pub fn trim_silence(buffer: &AudioBuffer, gate: &SilenceGate) -> Result<AudioBuffer, AudioError> {
    gate.validate().map_err(AudioError::InvalidBuffer)?;
    let rms = frame_rms(&buffer.samples, buffer.sample_rate_hz, TRIM_WINDOW_S);
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(AudioError::EmptyAfterTrim);
    }
    let floor = peak * 10f64.powf(gate.threshold_db / 20.0);
    let silent: Vec<bool> = rms.iter().map(|&r| r < floor).collect();

    let hop = hop_samples(buffer.sample_rate_hz);
    let n_frames = rms.len();
    let min_frames = (gate.min_silence_ms / 1000.0 / HOP_S - 1e-9).ceil().max(1.0) as usize;

    let mut keep = vec![true; n_frames];
    let mut i = 0;
    while i < n_frames {
        if !silent[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n_frames && silent[i] {
            i += 1;
        }
        if i - start >= min_frames {
            keep[start..i].iter_mut().for_each(|k| *k = false);
        }
    }

    if keep.iter().all(|&k| k) {
        return Ok(buffer.clone());
    }
    let mut samples = Vec::with_capacity(buffer.samples.len());
    for (idx, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let (lo, hi) = owned_range(idx, hop, n_frames, buffer.samples.len());
        samples.extend_from_slice(&buffer.samples[lo..hi]);
    }
    if samples.is_empty() {
        return Err(AudioError::EmptyAfterTrim);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate_hz: buffer.sample_rate_hz,
        source_id: buffer.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32, amp: f64) -> Vec<f64> {
        let n = (secs * sr as f64).round() as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn rejects_out_of_range_samples_and_low_rates() {
        assert!(AudioBuffer::new(vec![1.5], 16000, "x").is_err());
        assert!(AudioBuffer::new(vec![0.0], 4000, "x").is_err());
        assert!(AudioBuffer::new(vec![], 16000, "x").is_err());
    }

    #[test]
    fn frame_rms_of_constant_signal_is_its_level_in_the_interior() {
        let buf = vec![0.5; 16000];
        let rms = frame_rms(&buf, 16000, 0.025);
        assert_eq!(rms.len(), 100);
        for r in &rms[2..98] {
            assert!((r - 0.5).abs() < 1e-12);
        }
        // edge frames are zero padded
        assert!(rms[0] < 0.5);
    }

    #[test]
    fn trims_internal_silence() {
        let sr = 16000;
        let mut s = tone(440.0, 0.5, sr, 0.5);
        s.extend(vec![0.0; sr as usize]);
        s.extend(tone(440.0, 0.5, sr, 0.5));
        let buf = AudioBuffer::new(s, sr, "t").unwrap();
        let out = trim_silence(&buf, &SilenceGate::default()).unwrap();
        // Frames whose 25 ms window reaches into the tone survive: roughly one
        // extra frame on each side of the gap.
        assert!((out.duration_s() - 1.0).abs() <= 0.02 + 1e-9, "{}", out.duration_s());
    }

    #[test]
    fn no_silence_is_a_no_op() {
        let buf = AudioBuffer::new(tone(440.0, 1.0, 16000, 0.3), 16000, "t").unwrap();
        assert_eq!(trim_silence(&buf, &SilenceGate::default()).unwrap(), buf);
    }

    #[test]
    fn all_zero_buffer_is_empty_after_trim() {
        let buf = AudioBuffer::new(vec![0.0; 8000], 16000, "z").unwrap();
        assert!(matches!(
            trim_silence(&buf, &SilenceGate::default()),
            Err(AudioError::EmptyAfterTrim)
        ));
    }

    #[test]
    fn short_pauses_survive() {
        let sr = 16000;
        let mut s = tone(300.0, 0.4, sr, 0.5);
        s.extend(vec![0.0; (0.1 * sr as f64) as usize]);
        s.extend(tone(300.0, 0.4, sr, 0.5));
        let buf = AudioBuffer::new(s, sr, "p").unwrap();
        assert_eq!(trim_silence(&buf, &SilenceGate::default()).unwrap(), buf);
    }

    #[test]
    fn gate_validation() {
        let bad = SilenceGate {
            threshold_db: 3.0,
            min_silence_ms: 200.0,
        };
        assert!(bad.validate().is_err());
        let bad = SilenceGate {
            threshold_db: -40.0,
            min_silence_ms: 0.0,
        };
        assert!(bad.validate().is_err());
    }
}
