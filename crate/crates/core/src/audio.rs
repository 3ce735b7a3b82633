//! Audio front end: mono 16 kHz conversion, magnitude spectrograms, MFCCs and
//! the per-utterance normalizations applied before every backend.
//!
//! Framing is shared by the spectrogram and MFCC paths: 25 ms Hamming
//! windows every 10 ms, centered so that a buffer of `n` samples yields
//! `round(n / 160)` frames, with reflect padding at both edges. Each window
//! is zero-padded to a 1024-point FFT and the one-sided bins `0..512` are
//! kept, giving exactly 512 frequency rows.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::binio;
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_LEN: usize = 400;
pub const HOP_LEN: usize = 160;
pub const FFT_LEN: usize = 1024;
pub const FREQ_BINS: usize = 512;
pub const CROP_FRAMES: usize = 300;
pub const MFCC_DIM: usize = 13;
pub const MEL_FILTERS: usize = 26;
pub const LOG_FLOOR: f64 = 1e-10;
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Mono audio at a known sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Magnitude spectrogram, `[512 x T]`, rows are frequency bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub frame_step_s: f64,
    pub window_len_s: f64,
}

impl Spectrogram {
    pub fn from_matrix(magnitudes: Array2<f64>) -> Result<Self> {
        if magnitudes.nrows() != FREQ_BINS || magnitudes.ncols() == 0 {
            return Err(Error::InvalidAudio(format!(
                "spectrogram must be {FREQ_BINS} x T with T >= 1, got {:?}",
                magnitudes.dim()
            )));
        }
        Ok(Self {
            magnitudes,
            frame_step_s: HOP_LEN as f64 / SAMPLE_RATE as f64,
            window_len_s: WINDOW_LEN as f64 / SAMPLE_RATE as f64,
        })
    }

    pub fn frames(&self) -> usize {
        self.magnitudes.ncols()
    }
}

/// Cepstral features, `[13 x T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccFrames {
    pub coeffs: Array2<f64>,
    pub frame_step_s: f64,
    pub window_len_s: f64,
}

impl MfccFrames {
    pub fn from_matrix(coeffs: Array2<f64>) -> Result<Self> {
        if coeffs.nrows() != MFCC_DIM {
            return Err(Error::InvalidAudio(format!(
                "mfcc matrix must have {MFCC_DIM} rows, got {}",
                coeffs.nrows()
            )));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAudio("non-finite cepstral coefficient".into()));
        }
        Ok(Self {
            coeffs,
            frame_step_s: HOP_LEN as f64 / SAMPLE_RATE as f64,
            window_len_s: WINDOW_LEN as f64 / SAMPLE_RATE as f64,
        })
    }

    pub fn frames(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.coeffs.view()
    }
}

/// Averages channels and resamples to 16 kHz with a Hann-windowed sinc
/// interpolator. `channels[c][i]` is sample `i` of channel `c`.
pub fn to_mono_16k(channels: &[Vec<f64>], rate: u32) -> Result<AudioBuffer> {
    if rate == 0 {
        return Err(Error::InvalidAudio("sample rate must be positive".into()));
    }
    let Some(first) = channels.first() else {
        return Err(Error::InvalidAudio("no channels".into()));
    };
    let n = first.len();
    if n == 0 {
        return Err(Error::InvalidAudio("no samples".into()));
    }
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidAudio("channels differ in length".into()));
    }
    let scale = 1.0 / channels.len() as f64;
    let mono: Vec<f64> = if channels.len() == 1 {
        first.clone()
    } else {
        (0..n)
            .map(|i| channels.iter().map(|c| c[i]).sum::<f64>() * scale)
            .collect()
    };
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidAudio("non-finite sample".into()));
    }
    if rate == SAMPLE_RATE {
        return AudioBuffer::new(mono, SAMPLE_RATE);
    }
    AudioBuffer::new(resample(&mono, rate, SAMPLE_RATE), SAMPLE_RATE)
}

fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    const HALF_TAPS: f64 = 16.0;
    let ratio = from as f64 / to as f64;
    // Cutoff relative to the input Nyquist; below 1 when downsampling.
    let cutoff = (to as f64 / from as f64).min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let out_len = ((x.len() as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos - half_width).ceil().max(0.0) as usize;
            let hi = ((pos + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (j, &xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = pos - j as f64;
                let window = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += xj * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Number of frames produced for a buffer of `n` samples.
pub fn frame_count(n: usize) -> usize {
    (n + HOP_LEN / 2) / HOP_LEN
}

fn hamming() -> Vec<f64> {
    (0..WINDOW_LEN)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (WINDOW_LEN - 1) as f64).cos())
        .collect()
}

fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    // Single reflection suffices because padding (200) < n (>= 400).
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Runs `f` on the FFT of every windowed frame.
fn stft<F: FnMut(usize, &[Complex<f64>], &[f64])>(buf: &AudioBuffer, mut f: F) -> Result<usize> {
    if buf.sample_rate_hz != SAMPLE_RATE {
        return Err(Error::InvalidAudio(format!(
            "expected {SAMPLE_RATE} Hz audio, got {}",
            buf.sample_rate_hz
        )));
    }
    let n = buf.samples.len();
    if n < WINDOW_LEN {
        return Err(Error::InvalidAudio(format!(
            "buffer of {n} samples is shorter than one {WINDOW_LEN}-sample window"
        )));
    }
    let frames = frame_count(n);
    let window = hamming();
    let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
    let mut spectrum = vec![Complex::new(0.0, 0.0); FFT_LEN];
    let mut windowed = vec![0.0; WINDOW_LEN];
    for t in 0..frames {
        let center = (t * HOP_LEN + HOP_LEN / 2) as isize;
        let start = center - (WINDOW_LEN / 2) as isize;
        for (i, w) in window.iter().enumerate() {
            windowed[i] = buf.samples[reflect(start + i as isize, n)] * w;
        }
        for (slot, &v) in spectrum.iter_mut().zip(windowed.iter()) {
            *slot = Complex::new(v, 0.0);
        }
        for slot in spectrum.iter_mut().skip(WINDOW_LEN) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut spectrum);
        f(t, &spectrum, &windowed);
    }
    Ok(frames)
}

/// Linear-magnitude short-time spectrum, 512 rows by `round(n / 160)` frames.
pub fn spectrogram(buf: &AudioBuffer) -> Result<Spectrogram> {
    let frames = frame_count(buf.samples.len()).max(1);
    let mut mags = Array2::zeros((FREQ_BINS, frames));
    stft(buf, |t, spectrum, _| {
        for (k, c) in spectrum.iter().take(FREQ_BINS).enumerate() {
            mags[[k, t]] = c.norm();
        }
    })?;
    Spectrogram::from_matrix(mags)
}

/// Standardizes every row to zero mean and unit variance over time.
fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let cols = m.ncols() as f64;
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / cols;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
        let std = var.max(VARIANCE_FLOOR).sqrt();
        row.mapv_inplace(|v| (v - mean) / std);
    }
    out
}

/// Per-frequency-bin mean and variance normalization over the utterance.
pub fn normalize_spectrogram(spec: &Spectrogram) -> Result<Spectrogram> {
    if spec.frames() < 2 {
        return Err(Error::InvalidAudio(
            "normalization needs at least two frames".into(),
        ));
    }
    Ok(Spectrogram {
        magnitudes: normalize_rows(&spec.magnitudes),
        ..spec.clone()
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided power spectrum bins `0..=512`.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / FFT_LEN as f64;
    (0..MEL_FILTERS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=FFT_LEN / 2)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// 13 cepstral coefficients per frame: C0 is the log frame energy, C1..C12
/// are the orthonormal DCT-II of 26 log mel energies.
pub fn mfcc(buf: &AudioBuffer) -> Result<MfccFrames> {
    let frames = frame_count(buf.samples.len()).max(1);
    let bank = mel_filterbank();
    let mut coeffs = Array2::zeros((MFCC_DIM, frames));
    let mut power = vec![0.0; FFT_LEN / 2 + 1];
    let mut log_mel = vec![0.0; MEL_FILTERS];
    let m = MEL_FILTERS as f64;
    stft(buf, |t, spectrum, windowed| {
        for (p, c) in power.iter_mut().zip(spectrum) {
            *p = c.norm_sqr();
        }
        for (lm, filt) in log_mel.iter_mut().zip(&bank) {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *lm = e.max(LOG_FLOOR).ln();
        }
        let energy: f64 = windowed.iter().map(|v| v * v).sum();
        coeffs[[0, t]] = energy.max(LOG_FLOOR).ln();
        for k in 1..MFCC_DIM {
            let s: f64 = log_mel
                .iter()
                .enumerate()
                .map(|(j, v)| v * (PI * k as f64 * (j as f64 + 0.5) / m).cos())
                .sum();
            coeffs[[k, t]] = s * (2.0 / m).sqrt();
        }
    })?;
    MfccFrames::from_matrix(coeffs)
}

/// Cepstral mean and variance normalization over the utterance.
pub fn cmvn(frames: &MfccFrames) -> Result<MfccFrames> {
    if frames.frames() < 2 {
        return Err(Error::InvalidAudio("cmvn needs at least two frames".into()));
    }
    Ok(MfccFrames {
        coeffs: normalize_rows(&frames.coeffs),
        ..frames.clone()
    })
}

/// Uniformly placed contiguous 300-frame crop.
pub fn random_crop_3s(spec: &Spectrogram, seed: u64) -> Result<Spectrogram> {
    let mut rng = crate::rng::seeded(seed);
    random_crop_with(spec, &mut rng)
}

pub fn random_crop_with(spec: &Spectrogram, rng: &mut crate::rng::Rng) -> Result<Spectrogram> {
    let t = spec.frames();
    if t < CROP_FRAMES {
        return Err(Error::InvalidAudio(format!(
            "crop needs {CROP_FRAMES} frames, spectrogram has {t}"
        )));
    }
    let offset = rng.gen_range(0..=t - CROP_FRAMES);
    Ok(Spectrogram {
        magnitudes: spec
            .magnitudes
            .slice(ndarray::s![.., offset..offset + CROP_FRAMES])
            .to_owned(),
        ..spec.clone()
    })
}

/// Reads any PCM WAV and converts it to mono 16 kHz.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mut split = vec![Vec::with_capacity(samples.len() / channels.max(1)); channels];
    for (i, s) in samples.into_iter().enumerate() {
        split[i % channels].push(s);
    }
    to_mono_16k(&split, spec.sample_rate)
}

/// Writes a 16-bit mono WAV, clipping to [-1, 1].
pub fn write_wav(path: &Path, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &buf.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Feature file: "VXF1", u32 rows, u32 cols, row-major f32 values.
pub fn write_features<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    binio::write_magic(w, b"VXF1")?;
    binio::write_u32(w, m.nrows())?;
    binio::write_u32(w, m.ncols())?;
    binio::write_f32s(w, m.iter().copied())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    binio::read_magic(r, b"VXF1")?;
    let rows = binio::read_u32(r)?;
    let cols = binio::read_u32(r)?;
    let values = binio::read_f32s(r, rows * cols)?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_features(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Array2<f64>> {
    read_features(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(freq: f64, rate: u32, secs: f64) -> Vec<f64> {
        let n = (rate as f64 * secs).round() as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::seeded(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn buffer(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, SAMPLE_RATE).unwrap()
    }

    // Naive O(n^2) DFT magnitude peak, independent of rustfft.
    fn dft_peak_hz(x: &[f64], rate: u32) -> f64 {
        let n = x.len();
        let (mut best, mut best_k) = (0.0, 0);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let mag = re * re + im * im;
            if mag > best {
                best = mag;
                best_k = k;
            }
        }
        best_k as f64 * rate as f64 / n as f64
    }

    #[test]
    fn mono_16k_identity() {
        let x = noise(1000, 1);
        let out = to_mono_16k(&[x.clone()], 16_000).unwrap();
        assert_eq!(out.samples, x);
        assert_eq!(out.sample_rate_hz, 16_000);
    }

    #[test]
    fn identical_channels_average_to_either() {
        let x = noise(777, 2);
        let out = to_mono_16k(&[x.clone(), x.clone()], 16_000).unwrap();
        assert_eq!(out.samples, x);
    }

    #[test]
    fn upsampled_sine_keeps_its_frequency() {
        let x = sine(440.0, 8_000, 0.25);
        let out = to_mono_16k(&[x.clone()], 8_000).unwrap();
        assert!((out.samples.len() as i64 - 2 * x.len() as i64).abs() <= 1);
        let bin = 16_000.0 / out.samples.len() as f64;
        let peak = dft_peak_hz(&out.samples, 16_000);
        assert!((peak - 440.0).abs() <= bin, "peak {peak}");
    }

    #[test]
    fn downsampling_preserves_duration() {
        let x = noise(44_100, 3);
        let out = to_mono_16k(&[x], 44_100).unwrap();
        assert!((out.duration_s() - 1.0).abs() <= 1.0 / 16_000.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(to_mono_16k(&[], 16_000), Err(Error::InvalidAudio(_))));
        assert!(matches!(
            to_mono_16k(&[vec![]], 16_000),
            Err(Error::InvalidAudio(_))
        ));
    }

    #[test]
    fn three_seconds_is_512_by_300() {
        let s = spectrogram(&buffer(noise(48_000, 4))).unwrap();
        assert_eq!(s.magnitudes.dim(), (512, 300));
        assert!(s.magnitudes.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn frame_count_follows_duration() {
        for n in [400, 1_000, 16_000, 16_079, 16_080, 48_000, 72_000] {
            let s = spectrogram(&buffer(vec![0.1; n])).unwrap();
            let expected = (n as f64 / 160.0).round() as usize;
            assert_eq!(s.frames(), expected, "n = {n}");
        }
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let s = spectrogram(&buffer(vec![0.0; 16_000])).unwrap();
        assert!(s.magnitudes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_buffer_is_rejected() {
        assert!(matches!(
            spectrogram(&buffer(vec![0.0; 399])),
            Err(Error::InvalidAudio(_))
        ));
        assert!(matches!(mfcc(&buffer(vec![0.0; 10])), Err(Error::InvalidAudio(_))));
    }

    #[test]
    fn bin_center_sine_peaks_at_its_bin() {
        for k in [10usize, 57, 128, 300, 480] {
            let f = k as f64 * 16_000.0 / 1024.0;
            let s = spectrogram(&buffer(sine(f, 16_000, 1.0))).unwrap();
            let expected = (f * 1024.0 / 16_000.0).round() as usize;
            // Frames whose window lies entirely inside the signal; edge
            // frames see the reflected continuation.
            let interior = 1..=(16_000 - 280) / 160;
            for t in interior {
                let col = s.magnitudes.column(t);
                let argmax = col
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(argmax, expected);
            }
        }
    }

    #[test]
    fn energy_scales_quadratically() {
        let x = noise(16_000, 5);
        let a = spectrogram(&buffer(x.clone())).unwrap();
        let b = spectrogram(&buffer(x.iter().map(|v| v * 3.0).collect())).unwrap();
        let ea: f64 = a.magnitudes.iter().map(|v| v * v).sum();
        let eb: f64 = b.magnitudes.iter().map(|v| v * v).sum();
        assert!((eb / ea - 9.0).abs() < 1e-9);
    }

    fn assert_standardized(m: &Array2<f64>) {
        let cols = m.ncols() as f64;
        for row in m.axis_iter(Axis(0)) {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn normalized_rows_are_standard() {
        let s = spectrogram(&buffer(noise(24_000, 6))).unwrap();
        let n = normalize_spectrogram(&s).unwrap();
        assert_standardized(&n.magnitudes);
        let twice = normalize_spectrogram(&n).unwrap();
        let diff = (&twice.magnitudes - &n.magnitudes)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let mut m = Array2::from_elem((512, 10), 1.0);
        m.row_mut(3).fill(7.0);
        m[[4, 2]] = 2.0;
        let n = normalize_spectrogram(&Spectrogram::from_matrix(m).unwrap()).unwrap();
        assert!(n.magnitudes.row(3).iter().all(|&v| v == 0.0));
        assert!(n.magnitudes.row(0).iter().all(|&v| v == 0.0));
        assert!(n.magnitudes[[4, 2]] > 0.0);
    }

    #[test]
    fn normalization_needs_two_frames() {
        let s = Spectrogram::from_matrix(Array2::zeros((512, 1))).unwrap();
        assert!(matches!(normalize_spectrogram(&s), Err(Error::InvalidAudio(_))));
        let f = MfccFrames::from_matrix(Array2::zeros((13, 1))).unwrap();
        assert!(matches!(cmvn(&f), Err(Error::InvalidAudio(_))));
    }

    #[test]
    fn mfcc_shape_matches_spectrogram_framing() {
        let m = mfcc(&buffer(noise(48_000, 7))).unwrap();
        assert_eq!(m.coeffs.dim(), (13, 300));
    }

    #[test]
    fn silent_mfcc_frames_are_identical() {
        let m = mfcc(&buffer(vec![0.0; 8_000])).unwrap();
        let first = m.coeffs.column(0).to_owned();
        for col in m.coeffs.axis_iter(Axis(1)) {
            assert_eq!(col, first);
        }
        assert!((first[0] - LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn doubling_amplitude_only_shifts_c0() {
        let x = noise(16_000, 8);
        let a = mfcc(&buffer(x.clone())).unwrap();
        let b = mfcc(&buffer(x.iter().map(|v| v * 2.0).collect())).unwrap();
        let shift = 4f64.ln();
        for t in 0..a.frames() {
            assert!((b.coeffs[[0, t]] - a.coeffs[[0, t]] - shift).abs() < 1e-6);
            for k in 1..MFCC_DIM {
                assert!((b.coeffs[[k, t]] - a.coeffs[[k, t]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cmvn_standardizes_and_is_idempotent() {
        let m = mfcc(&buffer(noise(20_000, 9))).unwrap();
        let n = cmvn(&m).unwrap();
        assert_standardized(&n.coeffs);
        let again = cmvn(&n).unwrap();
        let diff = (&again.coeffs - &n.coeffs)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6);
        let mut c = Array2::from_elem((13, 5), 2.5);
        c[[1, 0]] = 1.0;
        let z = cmvn(&MfccFrames::from_matrix(c).unwrap()).unwrap();
        assert!(z.coeffs.row(0).iter().all(|&v| v == 0.0));
    }

    fn ramp(t: usize) -> Spectrogram {
        Spectrogram::from_matrix(Array2::from_shape_fn((512, t), |(_, j)| j as f64)).unwrap()
    }

    #[test]
    fn crop_of_exact_length_is_identity() {
        let s = ramp(300);
        assert_eq!(random_crop_3s(&s, 11).unwrap(), s);
    }

    #[test]
    fn crop_is_deterministic_and_contiguous() {
        let s = ramp(450);
        let a = random_crop_3s(&s, 5).unwrap();
        assert_eq!(a, random_crop_3s(&s, 5).unwrap());
        let start = a.magnitudes[[0, 0]];
        for j in 0..300 {
            assert_eq!(a.magnitudes[[17, j]], start + j as f64);
        }
        assert!(matches!(
            random_crop_3s(&ramp(299), 1),
            Err(Error::InvalidAudio(_))
        ));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let s = ramp(600);
        let mut counts = [0usize; 301];
        let draws = 10_000;
        for seed in 0..draws {
            let c = random_crop_3s(&s, seed).unwrap();
            counts[c.magnitudes[[0, 0]] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        let expected = draws as f64 / 301.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Upper 0.001 tail of chi-square with 300 dof.
        assert!(chi2 < 381.425, "chi2 = {chi2}");
    }

    #[test]
    fn feature_file_round_trip() {
        let mut rng = crate::rng::seeded(3);
        let m = Array2::from_shape_fn((4, 7), |_| rng.gen::<f32>() as f64);
        let mut bytes = Vec::new();
        write_features(&mut bytes, &m).unwrap();
        assert_eq!(&bytes[..4], b"VXF1");
        assert_eq!(bytes.len(), 12 + 4 * 28);
        assert_eq!(read_features(&mut bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let buf = buffer(sine(300.0, 16_000, 0.1).iter().map(|v| v * 0.5).collect());
        write_wav(&path, &buf).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), buf.len());
        for (a, b) in back.samples.iter().zip(&buf.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
