//! Deterministic DSP frontend: waveform to log-mel, F0/energy tracks and
//! MFCCs, plus the Griffin-Lim fallback inversion and the binary feature
//! cache format.
//!
//! Everything here is pure and stateless. Frame timing is shared between
//! the mel extractor and the prosody tracks so they are always
//! frame-synchronous.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use tapegrad::Matrix;

/// STFT / mel analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate_hz: u32,
    pub fft_size: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 22050,
            fft_size: 1024,
            hop_length: 256,
            win_length: 1024,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(Error::Validation("need 0 < hop <= win".into()));
        }
        if self.win_length > self.fft_size {
            return Err(Error::Validation("need win <= fft".into()));
        }
        if self.win_length % 2 != 0 {
            return Err(Error::Validation("win_length must be even".into()));
        }
        if self.n_mels != 80 {
            return Err(Error::Validation(
                "n_mels must be 80 to match the decoder output".into(),
            ));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz) {
            return Err(Error::Validation("need 0 <= fmin < fmax".into()));
        }
        if self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::Validation("fmax above Nyquist".into()));
        }
        Ok(())
    }

    /// Frames per second of the analysis grid.
    pub fn fps(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop_length as f64
    }

    /// Frame count for a signal of `len` samples under centered framing.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop_length + 1
    }
}

/// Log-amplitude mel spectrogram, frames in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Matrix,
    pub config: AudioConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frame-synchronous F0 (Hz, 0 when unvoiced), energy, and voicing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTracks {
    pub f0_hz: Vec<f64>,
    pub energy: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl ProsodyTracks {
    pub fn n_frames(&self) -> usize {
        self.f0_hz.len()
    }
}

/// Value clamped into the log to avoid -inf on silence.
pub const LOG_FLOOR: f64 = 1e-5;

/// Minimum normalized autocorrelation for a frame to count as voiced.
const VOICING_THRESHOLD: f64 = 0.3;

/// F0 search range in Hz.
const F0_MIN_HZ: f64 = 60.0;
const F0_MAX_HZ: f64 = 500.0;

fn check_samples(samples: &[f64], cfg: &AudioConfig) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Audio("empty input signal".into()));
    }
    if samples.len() < cfg.win_length {
        return Err(Error::Audio(format!(
            "signal of {} samples is shorter than the {}-sample analysis window",
            samples.len(),
            cfg.win_length
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Audio("non-finite sample in input".into()));
    }
    Ok(())
}

/// Reflection padding by `pad` samples on each side.
fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    assert!(n > pad, "signal too short to reflect");
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i]);
    }
    out.extend_from_slice(samples);
    for i in 2..=pad + 1 {
        out.push(samples[n - i]);
    }
    out
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Centered STFT; rows are frames, columns the `fft/2 + 1` bins.
fn stft(samples: &[f64], cfg: &AudioConfig) -> Array2<Complex64> {
    let pad = cfg.win_length / 2;
    let padded = reflect_pad(samples, pad);
    let n_frames = (padded.len() - cfg.win_length) / cfg.hop_length + 1;
    let n_bins = cfg.fft_size / 2 + 1;
    let window = hann(cfg.win_length);
    let offset = (cfg.fft_size - cfg.win_length) / 2;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut out = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for f in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = f * cfg.hop_length;
        for j in 0..cfg.win_length {
            buf[offset + j] = Complex64::new(padded[start + j] * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(n_bins).enumerate() {
            out[(f, k)] = *c;
        }
    }
    out
}

/// Inverse STFT by windowed overlap-add; returns `(n_frames - 1) * hop`
/// samples (the centered-framing padding is trimmed).
fn istft(spec: &Array2<Complex64>, cfg: &AudioConfig) -> Vec<f64> {
    let n_frames = spec.nrows();
    let n_bins = spec.ncols();
    let window = hann(cfg.win_length);
    let offset = (cfg.fft_size - cfg.win_length) / 2;
    let padded_len = (n_frames - 1) * cfg.hop_length + cfg.win_length;
    let mut acc = vec![0.0; padded_len];
    let mut den = vec![0.0; padded_len];
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for f in 0..n_frames {
        for k in 0..cfg.fft_size {
            buf[k] = if k < n_bins {
                spec[(f, k)]
            } else {
                spec[(f, cfg.fft_size - k)].conj()
            };
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop_length;
        for j in 0..cfg.win_length {
            let v = buf[offset + j].re / cfg.fft_size as f64;
            acc[start + j] += v * window[j];
            den[start + j] += window[j] * window[j];
        }
    }
    let pad = cfg.win_length / 2;
    let out_len = (n_frames - 1) * cfg.hop_length;
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            if den[j] > 1e-10 {
                acc[j] / den[j]
            } else {
                0.0
            }
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels x n_bins]` on the HTK mel scale.
pub fn mel_filterbank(cfg: &AudioConfig) -> Matrix {
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

/// Waveform to log-mel. Centered frames (`n_frames = len/hop + 1`), power
/// spectrum through the mel filterbank, natural log clamped at
/// [`LOG_FLOOR`].
pub fn wav_to_mel(samples: &[f64], cfg: &AudioConfig) -> Result<MelSpectrogram> {
    check_samples(samples, cfg)?;
    let spec = stft(samples, cfg);
    let fb = mel_filterbank(cfg);
    let n_frames = spec.nrows();
    let mut frames = Matrix::zeros((n_frames, cfg.n_mels));
    let n_bins = spec.ncols();
    let mut power = vec![0.0; n_bins];
    for f in 0..n_frames {
        for k in 0..n_bins {
            power[k] = spec[(f, k)].norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let mut acc = 0.0;
            for k in 0..n_bins {
                acc += fb[(m, k)] * power[k];
            }
            frames[(f, m)] = acc.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
    })
}

/// Autocorrelation F0 tracker plus per-frame energy, frame-synchronous
/// with [`wav_to_mel`]. Unvoiced frames get `f0 = 0`.
pub fn extract_f0(samples: &[f64], cfg: &AudioConfig) -> Result<ProsodyTracks> {
    check_samples(samples, cfg)?;
    let sr = cfg.sample_rate_hz as f64;
    let lag_min = (sr / F0_MAX_HZ).ceil() as usize;
    let lag_max = ((sr / F0_MIN_HZ).floor() as usize).min(cfg.win_length - 2);
    if lag_min + 2 > lag_max {
        return Err(Error::Audio(
            "window too short for the F0 search range".into(),
        ));
    }
    let pad = cfg.win_length / 2;
    let padded = reflect_pad(samples, pad);
    let n_frames = (padded.len() - cfg.win_length) / cfg.hop_length + 1;
    let win = cfg.win_length;

    let mut f0 = vec![0.0; n_frames];
    let mut energy = vec![0.0; n_frames];
    let mut voiced = vec![false; n_frames];
    let mut seg = vec![0.0; win];
    let mut nacf = vec![0.0; lag_max + 2];

    for f in 0..n_frames {
        let start = f * cfg.hop_length;
        let frame = &padded[start..start + win];
        energy[f] = frame.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mean = frame.iter().sum::<f64>() / win as f64;
        for (d, s) in seg.iter_mut().zip(frame) {
            *d = s - mean;
        }
        let total: f64 = seg.iter().map(|x| x * x).sum();
        if total < 1e-16 {
            continue; // silent frame
        }
        // prefix sums of squares for per-lag energy normalization
        let mut sq_prefix = vec![0.0; win + 1];
        for i in 0..win {
            sq_prefix[i + 1] = sq_prefix[i] + seg[i] * seg[i];
        }
        for lag in lag_min - 1..=lag_max + 1 {
            let n = win - lag;
            let mut num = 0.0;
            for t in 0..n {
                num += seg[t] * seg[t + lag];
            }
            let e1 = sq_prefix[n];
            let e2 = sq_prefix[win] - sq_prefix[lag];
            nacf[lag.min(lag_max + 1)] = if e1 > 0.0 && e2 > 0.0 {
                num / (e1 * e2).sqrt()
            } else {
                0.0
            };
        }
        let nacf_at = |lag: usize| nacf[lag.min(lag_max + 1)];
        let mut best = f64::NEG_INFINITY;
        for lag in lag_min..=lag_max {
            if nacf_at(lag) > best {
                best = nacf_at(lag);
            }
        }
        if best < VOICING_THRESHOLD {
            continue;
        }
        // earliest local maximum close to the global one wins, which keeps
        // the tracker off subharmonics (larger lags with near-equal peaks)
        let mut chosen = None;
        for lag in lag_min..=lag_max {
            let v = nacf_at(lag);
            if v >= 0.9 * best && v >= nacf_at(lag - 1) && v >= nacf_at(lag + 1) {
                chosen = Some(lag);
                break;
            }
        }
        let lag = match chosen {
            Some(l) => l,
            None => continue,
        };
        // parabolic interpolation for sub-sample lag precision
        let (y0, y1, y2) = (nacf_at(lag - 1), nacf_at(lag), nacf_at(lag + 1));
        let denom = y0 - 2.0 * y1 + y2;
        let delta = if denom.abs() > 1e-12 {
            (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let hz = sr / (lag as f64 + delta);
        if hz.is_finite() && hz > 0.0 {
            f0[f] = hz;
            voiced[f] = true;
        }
    }
    Ok(ProsodyTracks { f0_hz: f0, energy, voiced })
}

/// First `n_coeffs` of the orthonormal type-II DCT of each log-mel row.
pub fn mel_to_mfcc(mel: &MelSpectrogram, n_coeffs: usize) -> Result<Matrix> {
    let m = mel.frames.ncols();
    if n_coeffs > m {
        return Err(Error::Validation(format!(
            "requested {n_coeffs} cepstral coefficients from {m} mel bands"
        )));
    }
    Ok(dct_ii(&mel.frames, n_coeffs))
}

/// Orthonormal DCT-II over rows.
pub(crate) fn dct_ii(x: &Matrix, n_coeffs: usize) -> Matrix {
    let (n, m) = x.dim();
    let mf = m as f64;
    let mut out = Matrix::zeros((n, n_coeffs));
    for f in 0..n {
        for j in 0..n_coeffs {
            let mut acc = 0.0;
            for i in 0..m {
                acc += x[(f, i)]
                    * (std::f64::consts::PI * j as f64 * (2 * i + 1) as f64 / (2.0 * mf)).cos();
            }
            let scale = if j == 0 {
                (1.0 / mf).sqrt()
            } else {
                (2.0 / mf).sqrt()
            };
            out[(f, j)] = acc * scale;
        }
    }
    out
}

/// Griffin-Lim inversion before peak normalization.
fn griffin_lim_raw(mel: &MelSpectrogram, iterations: usize) -> Vec<f64> {
    let cfg = &mel.config;
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.fft_size / 2 + 1;
    // undo the log and its clamp floor
    let power_mel = mel.frames.mapv(|v| (v.exp() - LOG_FLOOR).max(0.0));
    // pseudo-inverse filterbank back to the linear spectrum
    let fb_na = nalgebra::DMatrix::from_fn(fb.nrows(), fb.ncols(), |i, j| fb[(i, j)]);
    let pinv = fb_na
        .pseudo_inverse(1e-10)
        .expect("mel filterbank pseudo-inverse");
    let n_frames = power_mel.nrows();
    let mut mag = Array2::zeros((n_frames, n_bins));
    for f in 0..n_frames {
        for k in 0..n_bins {
            let mut acc = 0.0;
            for m in 0..cfg.n_mels {
                acc += pinv[(k, m)] * power_mel[(f, m)];
            }
            mag[(f, k)] = acc.max(0.0).sqrt();
        }
    }
    // zero-phase start, then alternate projections
    let mut spec = mag.mapv(|m| Complex64::new(m, 0.0));
    for _ in 0..iterations {
        let x = istft(&spec, cfg);
        if x.len() < cfg.win_length {
            break;
        }
        let re = stft(&x, cfg);
        for f in 0..n_frames.min(re.nrows()) {
            for k in 0..n_bins {
                let c = re[(f, k)];
                let norm = c.norm();
                spec[(f, k)] = if norm > 1e-12 {
                    c / norm * mag[(f, k)]
                } else {
                    Complex64::new(mag[(f, k)], 0.0)
                };
            }
        }
    }
    istft(&spec, cfg)
}

/// Invert a log-mel back to a waveform with Griffin-Lim phase
/// reconstruction, then peak-normalize to 0.95. Near-silent
/// reconstructions (peak below 1e-6) are returned as-is instead of being
/// amplified to full scale.
pub fn mel_to_wav_fallback(mel: &MelSpectrogram, iterations: usize) -> Vec<f64> {
    let mut x = griffin_lim_raw(mel, iterations);
    let peak = x.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    if peak > 1e-6 {
        let s = 0.95 / peak;
        x.iter_mut().for_each(|v| *v *= s);
    }
    x
}

/// Mel-to-waveform adapter. The production vocoder slot; the bundled
/// implementation is Griffin-Lim.
pub trait Vocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Vec<f64>>;
}

pub struct GriffinLimVocoder {
    pub iterations: usize,
}

impl Default for GriffinLimVocoder {
    fn default() -> Self {
        Self { iterations: 60 }
    }
}

impl Vocoder for GriffinLimVocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        Ok(mel_to_wav_fallback(mel, self.iterations))
    }
}

// --- binary feature cache -------------------------------------------------

const MEL1_MAGIC: &[u8; 4] = b"MEL1";

/// Write a `[n_frames x n_cols]` matrix in the MEL1 cache format:
/// magic, n_frames/n_cols/sample_rate/hop as u32 LE, then row-major f32 LE.
pub fn write_mel1(path: &Path, frames: &Matrix, sample_rate: u32, hop: u32) -> Result<()> {
    let (n, m) = frames.dim();
    let mut buf = Vec::with_capacity(20 + n * m * 4);
    buf.extend_from_slice(MEL1_MAGIC);
    let mut hdr = [0u8; 16];
    LittleEndian::write_u32(&mut hdr[0..4], n as u32);
    LittleEndian::write_u32(&mut hdr[4..8], m as u32);
    LittleEndian::write_u32(&mut hdr[8..12], sample_rate);
    LittleEndian::write_u32(&mut hdr[12..16], hop);
    buf.extend_from_slice(&hdr);
    let mut cell = [0u8; 4];
    for v in frames.iter() {
        LittleEndian::write_f32(&mut cell, *v as f32);
        buf.extend_from_slice(&cell);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a MEL1 file back as `(frames, sample_rate, hop)`.
pub fn read_mel1(path: &Path) -> Result<(Matrix, u32, u32)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 20 || &buf[0..4] != MEL1_MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a MEL1 cache file",
            path.display()
        )));
    }
    let n = LittleEndian::read_u32(&buf[4..8]) as usize;
    let m = LittleEndian::read_u32(&buf[8..12]) as usize;
    let sr = LittleEndian::read_u32(&buf[12..16]);
    let hop = LittleEndian::read_u32(&buf[16..20]);
    if buf.len() != 20 + n * m * 4 {
        return Err(Error::Validation(format!(
            "{}: truncated MEL1 payload",
            path.display()
        )));
    }
    let mut frames = Matrix::zeros((n, m));
    for (i, v) in frames.iter_mut().enumerate() {
        *v = LittleEndian::read_f32(&buf[20 + i * 4..24 + i * 4]) as f64;
    }
    Ok((frames, sr, hop))
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    write_mel1(
        path,
        &mel.frames,
        mel.config.sample_rate_hz,
        mel.config.hop_length as u32,
    )
}

pub fn read_mel(path: &Path, cfg: &AudioConfig) -> Result<MelSpectrogram> {
    let (frames, sr, hop) = read_mel1(path)?;
    if sr != cfg.sample_rate_hz || hop != cfg.hop_length as u32 || frames.ncols() != cfg.n_mels {
        return Err(Error::Validation(format!(
            "{}: cache header does not match the audio config",
            path.display()
        )));
    }
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
    })
}

/// Scalar per-frame track (F0 or energy) in the same container.
pub fn write_track(path: &Path, values: &[f64], cfg: &AudioConfig) -> Result<()> {
    let m = Matrix::from_shape_vec((values.len(), 1), values.to_vec()).expect("column vector");
    write_mel1(path, &m, cfg.sample_rate_hz, cfg.hop_length as u32)
}

pub fn read_track(path: &Path) -> Result<Vec<f64>> {
    let (m, _, _) = read_mel1(path)?;
    if m.ncols() != 1 {
        return Err(Error::Validation(format!(
            "{}: expected a single-column track",
            path.display()
        )));
    }
    Ok(m.column(0).to_vec())
}

// --- wav io ----------------------------------------------------------------

/// Read a WAV file, mixing channels down to mono. Returns samples in
/// [-1, 1] and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let mut mono = Vec::new();
    match spec.sample_format {
        hound::SampleFormat::Float => {
            let mut it = reader.into_samples::<f32>();
            loop {
                let mut acc = 0.0;
                let mut got = 0;
                for _ in 0..channels {
                    match it.next() {
                        Some(s) => {
                            acc += s.map_err(|e| {
                                Error::Audio(format!("{}: {e}", path.display()))
                            })? as f64;
                            got += 1;
                        }
                        None => break,
                    }
                }
                if got == 0 {
                    break;
                }
                mono.push(acc / got as f64);
            }
        }
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            let mut it = reader.into_samples::<i32>();
            loop {
                let mut acc = 0.0;
                let mut got = 0;
                for _ in 0..channels {
                    match it.next() {
                        Some(s) => {
                            acc += s.map_err(|e| {
                                Error::Audio(format!("{}: {e}", path.display()))
                            })? as f64
                                / scale;
                            got += 1;
                        }
                        None => break,
                    }
                }
                if got == 0 {
                    break;
                }
                mono.push(acc / got as f64);
            }
        }
    }
    Ok((mono, spec.sample_rate))
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
}
