//! Short-time Fourier transform and spectrogram rendering.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Guards `log10(0)` in [`power_to_db`].
pub const POWER_EPSILON: f64 = 1e-12;
pub const DEFAULT_DB_FLOOR: f64 = -80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hamming,
    Hann,
    Rectangular,
}

impl WindowFn {
    /// Symmetric window coefficients of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        if len == 1 {
            return vec![1.0];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / denom;
                match self {
                    WindowFn::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowFn::Hann => 0.5 - 0.5 * phase.cos(),
                    WindowFn::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub nfft: usize,
    pub window_len: usize,
    pub overlap: usize,
    pub window_fn: WindowFn,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            nfft: 512,
            window_len: 512,
            overlap: 384,
            window_fn: WindowFn::Hamming,
        }
    }
}

impl StftConfig {
    pub fn hop(&self) -> usize {
        self.window_len.saturating_sub(self.overlap)
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.nfft.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(self.nfft));
        }
        if !(self.overlap < self.window_len && self.window_len <= self.nfft) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= overlap ({}) < window_len ({}) <= nfft ({})",
                self.overlap, self.window_len, self.nfft
            )));
        }
        Ok(())
    }

    /// Number of whole frames that fit in `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        self.validate()?;
        if len < self.window_len {
            return Err(Error::TooShort {
                len,
                window: self.window_len,
            });
        }
        Ok((len - self.window_len) / self.hop() + 1)
    }
}

/// Splits a signal into overlapping frames. The trailing remainder that does
/// not fill a whole window is dropped.
pub fn frame_signal(samples: &[f64], cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let count = cfg.frame_count(samples.len())?;
    let hop = cfg.hop();
    Ok((0..count)
        .map(|k| samples[k * hop..k * hop + cfg.window_len].to_vec())
        .collect())
}

/// Radix-2 decimation-in-time FFT. `x` is zero-padded (or must already be)
/// to length `n`.
pub fn fft(x: &[Complex64], n: usize) -> Result<Vec<Complex64>> {
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    if x.len() > n {
        return Err(Error::Shape(format!("fft input of {} samples exceeds n = {n}", x.len())));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..x.len()].copy_from_slice(x);
    fft_in_place(&mut buf);
    Ok(buf)
}

fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        // twiddles computed directly per index, no recurrence drift
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / size as f64))
            .collect();
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

/// Complex STFT, stored bin-major: `data[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftMatrix {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl StftMatrix {
    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<Complex64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<StftMatrix> {
    let frames = frame_signal(&clip.samples, cfg)?;
    let window = cfg.window_fn.coefficients(cfg.window_len);
    let bins = cfg.bins();
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.nfft];
    for (j, frame) in frames.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (slot, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex64::new(s * w, 0.0);
        }
        fft_in_place(&mut buf);
        for (b, value) in buf[..bins].iter().enumerate() {
            data[b * frames.len() + j] = *value;
        }
    }
    Ok(StftMatrix {
        bins,
        frames: frames.len(),
        data,
    })
}

/// Log-power spectrogram, bin-major like [`StftMatrix`]. Row 0 is DC.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub db_floor: f64,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub fn power_to_db(c: &StftMatrix, db_floor: f64, config: StftConfig) -> Spectrogram {
    let values = c
        .data
        .iter()
        .map(|z| (10.0 * (z.norm_sqr() + POWER_EPSILON).log10()).max(db_floor))
        .collect();
    Spectrogram {
        bins: c.bins,
        frames: c.frames,
        values,
        db_floor,
        config,
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&self.pixels)?;
        writer.finish()?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Parse(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected 8-bit grayscale PNG",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        Self::new(info.width as usize, info.height as usize, buf)
    }
}

/// Rounds half-up and clamps into the 8-bit range.
pub(crate) fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Maps the spectrogram's own [min, max] onto [0, 255]. Low frequencies end
/// up on the bottom row. A flat spectrogram renders black.
pub fn render_image(s: &Spectrogram) -> Result<GrayImage> {
    if s.values.is_empty() {
        return Err(Error::Shape("empty spectrogram".into()));
    }
    let (lo, hi) = s.min_max();
    let range = hi - lo;
    let mut pixels = vec![0u8; s.values.len()];
    if range > 0.0 {
        for bin in 0..s.bins {
            let row = s.bins - 1 - bin;
            for frame in 0..s.frames {
                pixels[row * s.frames + frame] = to_u8((s.get(bin, frame) - lo) / range * 255.0);
            }
        }
    }
    GrayImage::new(s.frames, s.bins, pixels)
}

/// Sidecar metadata written next to each rendered spectrogram PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramSidecar {
    pub source_id: String,
    pub stft: StftConfig,
    pub db_floor: f64,
    pub norm_min_db: f64,
    pub norm_max_db: f64,
    pub bins: usize,
    pub frames: usize,
}

/// Full audio → spectrogram image path, without augmentation.
pub fn spectrogram_image(clip: &AudioClip, cfg: &StftConfig, db_floor: f64) -> Result<(GrayImage, SpectrogramSidecar)> {
    let spec = power_to_db(&stft(clip, cfg)?, db_floor, *cfg);
    let image = render_image(&spec)?;
    let (lo, hi) = spec.min_max();
    let sidecar = SpectrogramSidecar {
        source_id: clip.source_id.clone(),
        stft: *cfg,
        db_floor,
        norm_min_db: lo,
        norm_max_db: hi,
        bins: spec.bins,
        frames: spec.frames,
    };
    Ok((image, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| v * Complex64::from_polar(1.0, -2.0 * PI * ((k * t) % n) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: 16000,
            source_id: "t".into(),
        }
    }

    #[test]
    fn frame_counts() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.hop(), 128);
        // sliding-window count by brute force
        let mut naive = 0;
        let mut start = 0;
        while start + 512 <= 16000 {
            naive += 1;
            start += 128;
        }
        assert_eq!(naive, 122);
        assert_eq!(frame_signal(&vec![0.0; 16000], &cfg).unwrap().len(), 122);
        assert_eq!(frame_signal(&vec![0.0; 512], &cfg).unwrap().len(), 1);
        assert!(matches!(frame_signal(&vec![0.0; 511], &cfg), Err(Error::TooShort { .. })));
        let frames = frame_signal(&(0..1000).map(|i| i as f64).collect::<Vec<_>>(), &cfg).unwrap();
        assert_eq!(frames[2][0], 256.0);
    }

    #[test]
    fn invalid_configs() {
        let bad = StftConfig { nfft: 500, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::NotPowerOfTwo(500))));
        let bad = StftConfig { overlap: 512, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = StftConfig { window_len: 1024, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fft_impulse_and_constant() {
        let mut x = vec![Complex64::new(0.0, 0.0); 16];
        x[0] = Complex64::new(1.0, 0.0);
        for v in fft(&x, 16).unwrap() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let c = Complex64::new(0.3, -0.2);
        let out = fft(&vec![c; 64], 64).unwrap();
        assert!((out[0] - c * 64.0).norm() < 1e-9);
        assert!(out[1..].iter().all(|v| v.norm() < 1e-9));
        assert!(matches!(fft(&x, 12), Err(Error::NotPowerOfTwo(12))));
    }

    #[test]
    fn fft_zero_pads() {
        let x = vec![Complex64::new(1.0, 0.0); 3];
        let mut padded = x.clone();
        padded.resize(8, Complex64::new(0.0, 0.0));
        let a = fft(&x, 8).unwrap();
        let b = naive_dft(&padded);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &n in &[2usize, 8, 64, 512] {
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let fast = fft(&x, n).unwrap();
            let slow = naive_dft(&x);
            let scale = slow.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn sine_at_bin_center_peaks_at_that_bin() {
        let cfg = StftConfig::default();
        let k = 37;
        let f = k as f64 * 16000.0 / 512.0;
        let x: Vec<f64> = (0..4000).map(|t| (2.0 * PI * f * t as f64 / 16000.0).sin() * 0.5).collect();
        let m = stft(&clip(x), &cfg).unwrap();
        assert_eq!(m.bins, 257);
        for j in 0..m.frames {
            let col = m.column(j);
            let best = (0..col.len()).max_by(|&a, &b| col[a].norm().total_cmp(&col[b].norm())).unwrap();
            assert_eq!(best, k);
        }
    }

    #[test]
    fn stft_column_equals_windowed_dft() {
        let cfg = StftConfig { nfft: 64, window_len: 48, overlap: 16, window_fn: WindowFn::Hann };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = stft(&clip(x.clone()), &cfg).unwrap();
        let w = WindowFn::Hann.coefficients(48);
        let start = 2 * cfg.hop();
        let mut frame: Vec<Complex64> = (0..48).map(|i| Complex64::new(x[start + i] * w[i], 0.0)).collect();
        frame.resize(64, Complex64::new(0.0, 0.0));
        let oracle = naive_dft(&frame);
        for b in 0..m.bins {
            assert!((m.get(b, 2) - oracle[b]).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_signal_gives_zero_matrix_and_floor() {
        let m = stft(&clip(vec![0.0; 1024]), &StftConfig::default()).unwrap();
        assert!(m.data.iter().all(|c| c.norm() == 0.0));
        let s = power_to_db(&m, -80.0, StftConfig::default());
        assert!(s.values.iter().all(|&v| v == -80.0));
        assert_eq!(render_image(&s).unwrap().pixels.iter().filter(|&&p| p != 0).count(), 0);
    }

    #[test]
    fn db_examples() {
        let m = StftMatrix {
            bins: 1,
            frames: 3,
            data: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(3.0, 1.0)],
        };
        let s = power_to_db(&m, -80.0, StftConfig::default());
        assert!(s.values[0].abs() < 1e-9);
        assert_eq!(s.values[1], -80.0);
        assert!((s.values[2] - 10.0).abs() < 1e-9);
    }

    fn spectrogram(bins: usize, frames: usize, values: Vec<f64>) -> Spectrogram {
        Spectrogram { bins, frames, values, db_floor: -80.0, config: StftConfig::default() }
    }

    #[test]
    fn render_endpoints_and_flip() {
        // bin 0 (low frequency) = max, bin 1 = floor
        let img = render_image(&spectrogram(2, 1, vec![-10.0, -80.0])).unwrap();
        assert_eq!((img.width, img.height), (1, 2));
        assert_eq!(img.pixels, vec![0, 255]);
        let flat = render_image(&spectrogram(2, 2, vec![-20.0; 4])).unwrap();
        assert!(flat.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn render_keeps_monotone_columns() {
        let values: Vec<f64> = (0..50).map(|b| -80.0 + (b as f64).powf(1.3)).collect();
        let img = render_image(&spectrogram(50, 1, values)).unwrap();
        // bottom row is bin 0, so pixels decrease going down
        assert!(img.pixels.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(GrayImage::load_png(&path).unwrap(), img);
        assert!(matches!(GrayImage::load_png(dir.path().join("nope.png")), Err(Error::MissingFile(_))));
    }

    proptest::proptest! {
        #[test]
        fn parseval_per_frame(xs in proptest::collection::vec(-1.0f64..1.0, 512)) {
            let w = WindowFn::Hamming.coefficients(512);
            let windowed: Vec<Complex64> = xs.iter().zip(&w).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
            let time: f64 = windowed.iter().map(|c| c.norm_sqr()).sum();
            let freq: f64 = fft(&windowed, 512).unwrap().iter().map(|c| c.norm_sqr()).sum::<f64>() / 512.0;
            proptest::prop_assert!((time - freq).abs() <= 1e-6 * time.max(1e-300));
        }

        #[test]
        fn stft_columns_match_frame_count(len in 512usize..3000) {
            let cfg = StftConfig::default();
            let m = stft(&clip(vec![0.1; len]), &cfg).unwrap();
            proptest::prop_assert_eq!(m.frames, frame_signal(&vec![0.0; len], &cfg).unwrap().len());
        }

        #[test]
        fn render_is_monotone(base in proptest::collection::vec(-70.0f64..-10.0, 12), bump in proptest::collection::vec(0.0f64..5.0, 12)) {
            // equal ranges: pin min and max in both spectrograms
            let mut a = base.clone();
            a[0] = -80.0;
            a[1] = 0.0;
            let mut b: Vec<f64> = a.iter().zip(&bump).map(|(v, d)| (v + d).min(0.0)).collect();
            b[0] = -80.0;
            let pa = render_image(&spectrogram(3, 4, a)).unwrap();
            let pb = render_image(&spectrogram(3, 4, b)).unwrap();
            for (x, y) in pa.pixels.iter().zip(&pb.pixels) {
                proptest::prop_assert!(x <= y);
            }
        }
    }
}
