//! FOA front end: STFT, log-mel spectrograms and mel-pooled intensity vectors.
//!
//! Conventions used throughout:
//! - channels are in ACN order (W, Y, Z, X) with SN3D normalization;
//! - the STFT uses a periodic Hann window, no padding, and returns the raw
//!   (unnormalized) one-sided DFT. For a frame `x` of length `N` the energy
//!   relation is `Σ(w·x)² = (|X₀|² + 2·Σ_{k=1}^{N/2-1}|X_k|² + |X_{N/2}|²) / N`,
//!   see [`one_sided_energy`];
//! - the mel scale is HTK (`2595·log10(1 + f/700)`), 64 bands spanning
//!   50 Hz to 12 kHz; each triangular row is normalized to unit sum.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 24_000;
pub const WINDOW_LEN: usize = 1024;
pub const HOP_LEN: usize = 320;
pub const N_BINS: usize = WINDOW_LEN / 2 + 1;
pub const N_MELS: usize = 64;
pub const MEL_FMIN: f64 = 50.0;
pub const MEL_FMAX: f64 = 12_000.0;
pub const LOG_EPS: f64 = 1e-10;
pub const INTENSITY_EPS: f64 = 1e-10;
pub const SEGMENT_SECONDS: usize = 5;
pub const SEGMENT_SAMPLES: usize = SEGMENT_SECONDS * SAMPLE_RATE as usize;
/// Feature channels: 4 log-mel (W, Y, Z, X) + 3 intensity (x, y, z).
pub const FEATURE_CHANNELS: usize = 7;

/// Number of STFT frames for `n` samples (no padding).
pub fn frame_count(n_samples: usize, window_len: usize, hop: usize) -> usize {
    if n_samples < window_len {
        0
    } else {
        (n_samples - window_len) / hop + 1
    }
}

/// Four-channel first-order ambisonics waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    /// `[W, Y, Z, X]`, equal lengths.
    pub channels: [Vec<f32>; 4],
    pub sample_rate: u32,
    pub room_id: String,
    pub clip_id: String,
}

impl FoaClip {
    pub fn new(channels: [Vec<f32>; 4], sample_rate: u32, room_id: impl Into<String>, clip_id: impl Into<String>) -> Result<Self> {
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Invalid("FOA channels differ in length".into()));
        }
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Invalid(format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE}")));
        }
        Ok(FoaClip {
            channels,
            sample_rate,
            room_id: room_id.into(),
            clip_id: clip_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-overlapping fixed-length pieces; a trailing remainder is dropped.
    pub fn segments(&self, seg_len: usize) -> Vec<FoaClip> {
        (0..self.len() / seg_len)
            .map(|s| FoaClip {
                channels: std::array::from_fn(|c| self.channels[c][s * seg_len..(s + 1) * seg_len].to_vec()),
                sample_rate: self.sample_rate,
                room_id: self.room_id.clone(),
                clip_id: format!("{}_seg{s:02}", self.clip_id),
            })
            .collect()
    }

    pub fn scaled(&self, gain: f32) -> FoaClip {
        let mut out = self.clone();
        for c in &mut out.channels {
            c.iter_mut().for_each(|v| *v *= gain);
        }
        out
    }
}

/// Complex STFT of a 4-channel clip, indexed `[channel][frame][bin]`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != 4 * frames * bins {
            return Err(Error::Shape {
                op: "spectrum",
                lhs: vec![4, frames, bins],
                rhs: vec![data.len()],
            });
        }
        Ok(Spectrum { frames, bins, data })
    }

    pub fn frame(&self, ch: usize, t: usize) -> &[Complex64] {
        let off = (ch * self.frames + t) * self.bins;
        &self.data[off..off + self.bins]
    }

    fn frame_mut(&mut self, ch: usize, t: usize) -> &mut [Complex64] {
        let off = (ch * self.frames + t) * self.bins;
        &mut self.data[off..off + self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(clip: &FoaClip, window_len: usize, hop: usize) -> Result<Spectrum> {
    if window_len == 0 || hop == 0 {
        return Err(Error::Invalid("window and hop must be positive".into()));
    }
    if clip.len() < window_len {
        return Err(Error::ClipTooShort {
            samples: clip.len(),
            needed: window_len,
        });
    }
    let frames = frame_count(clip.len(), window_len, hop);
    let bins = window_len / 2 + 1;
    let window = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut spec = Spectrum {
        frames,
        bins,
        data: vec![Complex64::new(0.0, 0.0); 4 * frames * bins],
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for ch in 0..4 {
        let x = &clip.channels[ch];
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(f64::from(x[start + i]) * window[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            spec.frame_mut(ch, t).copy_from_slice(&buf[..bins]);
        }
    }
    Ok(spec)
}

/// Time-domain energy of the windowed frame recovered from its one-sided DFT
/// (`window_len` even).
pub fn one_sided_energy(frame: &[Complex64], window_len: usize) -> f64 {
    let last = frame.len() - 1;
    let inner: f64 = frame[1..last].iter().map(|c| c.norm_sqr()).sum();
    (frame[0].norm_sqr() + 2.0 * inner + frame[last].norm_sqr()) / window_len as f64
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK mel filterbank over one-sided FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Dense `[n_mels × n_bins]` weights.
    weights: Vec<f64>,
    /// Nonzero bin range per band.
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<Self> {
        let n_bins = n_fft / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let mut edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        // pin the outer edges so round-off cannot leak weight past them
        edges[0] = fmin;
        edges[n_mels + 1] = fmax;
        let bin_hz = sample_rate / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        let mut support = Vec::with_capacity(n_mels);
        for b in 0..n_mels {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let row = &mut weights[b * n_bins..(b + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::Invalid(format!("mel band {b} covers no FFT bin")));
            }
            row.iter_mut().for_each(|w| *w /= total);
            let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            support.push((first, last + 1));
        }
        Ok(MelFilterbank {
            n_mels,
            n_bins,
            weights,
            support,
        })
    }

    /// The 64-band, 50 Hz–12 kHz bank for 1024-point frames at 24 kHz.
    pub fn standard() -> Arc<MelFilterbank> {
        static BANK: OnceLock<Arc<MelFilterbank>> = OnceLock::new();
        BANK.get_or_init(|| {
            Arc::new(
                MelFilterbank::new(N_MELS, WINDOW_LEN, f64::from(SAMPLE_RATE), MEL_FMIN, MEL_FMAX)
                    .expect("standard mel bank is well formed"),
            )
        })
        .clone()
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.n_bins..(band + 1) * self.n_bins]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Apply to one frame of per-bin values.
    pub fn apply(&self, per_bin: &[f64], out: &mut [f64]) {
        for (b, o) in out.iter_mut().enumerate() {
            let (s, e) = self.support[b];
            let row = &self.weights[b * self.n_bins + s..b * self.n_bins + e];
            *o = row.iter().zip(&per_bin[s..e]).map(|(w, v)| w * v).sum();
        }
    }
}

/// `10·log10(mel_energy + ε)` per channel; output `[4 × T × n_mels]` flattened.
pub fn logmel(spec: &Spectrum, bank: &MelFilterbank) -> Result<Vec<f64>> {
    if spec.bins != bank.n_bins {
        return Err(Error::Shape {
            op: "logmel",
            lhs: vec![spec.bins],
            rhs: vec![bank.n_bins],
        });
    }
    let nm = bank.n_mels;
    let mut out = vec![0.0; 4 * spec.frames * nm];
    let mut power = vec![0.0; spec.bins];
    for ch in 0..4 {
        for t in 0..spec.frames {
            for (p, c) in power.iter_mut().zip(spec.frame(ch, t)) {
                *p = c.norm_sqr();
            }
            let dst = &mut out[(ch * spec.frames + t) * nm..(ch * spec.frames + t + 1) * nm];
            bank.apply(&power, dst);
            dst.iter_mut().for_each(|v| *v = 10.0 * (*v + LOG_EPS).log10());
        }
    }
    Ok(out)
}

/// Mel-pooled active intensity `Re(conj(W)·(X, Y, Z))`, normalized per
/// (frame, band) by its Euclidean norm plus ε. Output `[3 × T × n_mels]`
/// flattened, component order (x, y, z).
pub fn intensity_vectors(spec: &Spectrum, bank: &MelFilterbank) -> Result<Vec<f64>> {
    if spec.bins != bank.n_bins {
        return Err(Error::Shape {
            op: "intensity_vectors",
            lhs: vec![spec.bins],
            rhs: vec![bank.n_bins],
        });
    }
    let (nm, tf) = (bank.n_mels, spec.frames);
    let mut out = vec![0.0; 3 * tf * nm];
    let mut per_bin = vec![0.0; spec.bins];
    let mut pooled = [vec![0.0; nm], vec![0.0; nm], vec![0.0; nm]];
    // ACN: 0=W, 1=Y, 2=Z, 3=X; output order x, y, z.
    let dipoles = [3usize, 1, 2];
    for t in 0..tf {
        let w = spec.frame(0, t);
        for (axis, &ch) in dipoles.iter().enumerate() {
            let d = spec.frame(ch, t);
            for ((p, wk), dk) in per_bin.iter_mut().zip(w).zip(d) {
                *p = (wk.conj() * dk).re;
            }
            bank.apply(&per_bin, &mut pooled[axis]);
        }
        for b in 0..nm {
            let (x, y, z) = (pooled[0][b], pooled[1][b], pooled[2][b]);
            let norm = (x * x + y * y + z * z).sqrt() + INTENSITY_EPS;
            out[t * nm + b] = x / norm;
            out[(tf + t) * nm + b] = y / norm;
            out[(2 * tf + t) * nm + b] = z / norm;
        }
    }
    Ok(out)
}

/// Stacked model input `[7 × T × 64]` stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub frames: usize,
    pub mels: usize,
    pub values: Vec<f32>,
}

impl FeatureTensor {
    pub fn shape(&self) -> [usize; 3] {
        [FEATURE_CHANNELS, self.frames, self.mels]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames * self.mels;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"MSLD")?;
        w.write_all(&1u32.to_le_bytes())?;
        for d in self.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| Error::format(origin, "truncated feature header"))?;
        if &head[..4] != b"MSLD" {
            return Err(Error::format(origin, "not a feature file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]) as usize;
        if word(4) != 1 {
            return Err(Error::format(origin, format!("unsupported feature version {}", word(4))));
        }
        let (c, t, m) = (word(8), word(12), word(16));
        if c != FEATURE_CHANNELS {
            return Err(Error::format(origin, format!("expected {FEATURE_CHANNELS} channels, found {c}")));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(origin, e))?;
        if payload.len() != c * t * m * 4 {
            return Err(Error::format(origin, "feature payload length does not match dims"));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(FeatureTensor { frames: t, mels: m, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

/// Full front end: log-mel of all four channels followed by the three
/// intensity channels.
pub fn extract_features(clip: &FoaClip) -> Result<FeatureTensor> {
    let spec = stft(clip, WINDOW_LEN, HOP_LEN)?;
    let bank = MelFilterbank::standard();
    let lm = logmel(&spec, &bank)?;
    let iv = intensity_vectors(&spec, &bank)?;
    let values = lm.iter().chain(&iv).map(|&v| v as f32).collect();
    Ok(FeatureTensor {
        frames: spec.frames,
        mels: bank.n_mels,
        values,
    })
}

/// Read a 4-channel WAV (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path, room_id: &str, clip_id: &str) -> Result<FoaClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 4 {
        return Err(Error::format(path, format!("expected 4 channels, found {}", spec.channels)));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        (fmt, bits) => return Err(Error::format(path, format!("unsupported sample format {fmt:?}/{bits}"))),
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    let n = interleaved.len() / 4;
    let channels = std::array::from_fn(|c| (0..n).map(|i| interleaved[i * 4 + c]).collect());
    FoaClip::new(channels, spec.sample_rate, room_id, clip_id).map_err(|e| Error::format(path, e.to_string()))
}

/// Write a clip as 16-bit PCM (samples clamped to [-1, 1]).
pub fn write_wav(path: &Path, clip: &FoaClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e.to_string()))?;
    for i in 0..clip.len() {
        for c in 0..4 {
            let v = (clip.channels[c][i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    w.finalize().map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_from(ch: [Vec<f32>; 4]) -> FoaClip {
        FoaClip::new(ch, SAMPLE_RATE, "r", "c").unwrap()
    }

    fn silent(n: usize) -> FoaClip {
        clip_from(std::array::from_fn(|_| vec![0.0; n]))
    }

    #[test]
    fn frame_count_for_five_seconds() {
        assert_eq!(frame_count(120_000, 1024, 320), 372);
    }

    #[test]
    fn short_clip_rejected() {
        let err = stft(&silent(1000), 1024, 320).unwrap_err();
        assert!(err.to_string().contains("clip too short"));
    }

    #[test]
    fn bin_centered_tone_peaks_at_bin_ten() {
        let f = 10.0 * f64::from(SAMPLE_RATE) / 1024.0;
        let n = 24_000;
        let w: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / f64::from(SAMPLE_RATE)).sin() as f32)
            .collect();
        let clip = clip_from([w, vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
        let spec = stft(&clip, 1024, 320).unwrap();
        for t in 0..spec.frames {
            let fr = spec.frame(0, t);
            let arg = (0..fr.len()).max_by(|&a, &b| fr[a].norm().total_cmp(&fr[b].norm())).unwrap();
            assert_eq!(arg, 10, "frame {t}");
        }
    }

    #[test]
    fn silence_gives_floor_and_zero_intensity() {
        let feat = extract_features(&silent(SEGMENT_SAMPLES)).unwrap();
        assert_eq!(feat.shape(), [7, 372, 64]);
        let floor = (10.0 * LOG_EPS.log10()) as f32;
        for c in 0..4 {
            assert!(feat.channel(c).iter().all(|&v| v == floor));
        }
        for c in 4..7 {
            assert!(feat.channel(c).iter().all(|&v| v == 0.0));
        }
        assert_eq!(floor, -100.0);
    }

    #[test]
    fn filterbank_rows_unit_sum_and_bounded_support() {
        let bank = MelFilterbank::standard();
        for b in 0..N_MELS {
            let s: f64 = bank.row(b).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            // nothing outside 50 Hz .. 12 kHz
            let hz_per_bin = f64::from(SAMPLE_RATE) / WINDOW_LEN as f64;
            for (k, &w) in bank.row(b).iter().enumerate() {
                if w > 0.0 {
                    let f = k as f64 * hz_per_bin;
                    assert!(f > MEL_FMIN && f < MEL_FMAX);
                }
            }
        }
    }

    #[test]
    fn single_bin_touches_only_covering_bands() {
        let bank = MelFilterbank::standard();
        let k = 100;
        let frame: Vec<Complex64> = (0..N_BINS)
            .map(|i| if i == k { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
            .collect();
        let data: Vec<Complex64> = (0..4).flat_map(|_| frame.clone()).collect();
        let spec = Spectrum::new(1, N_BINS, data).unwrap();
        let lm = logmel(&spec, &bank).unwrap();
        for b in 0..N_MELS {
            let active = lm[b] > -100.0 + 1e-9;
            assert_eq!(active, bank.row(b)[k] > 0.0, "band {b}");
        }
    }

    #[test]
    fn feature_file_roundtrip() {
        let feat = FeatureTensor {
            frames: 2,
            mels: 3,
            values: (0..42).map(|i| i as f32 * 0.5 - 3.0).collect(),
        };
        let mut buf = Vec::new();
        feat.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MSLD");
        assert_eq!(buf.len(), 20 + 42 * 4);
        let back = FeatureTensor::read_from(buf.as_slice(), Path::new("m")).unwrap();
        assert_eq!(back, feat);
    }

    #[test]
    fn segments_drop_remainder() {
        let clip = silent(SEGMENT_SAMPLES * 2 + 10);
        let segs = clip.segments(SEGMENT_SAMPLES);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].clip_id, "c_seg01");
    }
}
