//! Audio front end: PCM16 WAV ingestion, Hann-windowed STFT, triangular mel
//! filterbank, and the binary embedding-table format.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, Reader};
use crate::tensor::Matrix;

pub const EMBEDDING_DIM: usize = 1024;
pub const DEFAULT_WINDOW: usize = 2048;
pub const DEFAULT_HOP: usize = 512;
pub const DEFAULT_MEL_BINS: usize = 128;

const EMBEDDING_MAGIC: &[u8; 4] = b"QMEB";
const EMBEDDING_VERSION: u16 = 1;
const FLAG_LABELS: u8 = 1;

/// `M(f) = 1125 · ln(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::param("frequency", format!("must be >= 0 Hz, got {f}")));
    }
    Ok(1125.0 * (1.0 + f / 700.0).ln())
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1125.0).exp() - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !(s.abs() <= 1.0 + 1e-6)) {
            return Err(Error::Data(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Magnitude spectrogram, `frames × bins`, bins `0..=window/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub window: usize,
    pub hop: usize,
    pub magnitudes: Vec<f32>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.magnitudes[t * self.bins..(t + 1) * self.bins]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub mel_bins: usize,
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Power per `[frame][mel bin]`, row-major.
    pub values: Vec<f32>,
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Hann-windowed frames through a power-of-two FFT; no padding.
pub fn stft_magnitude(clip: &AudioClip, window: usize, hop: usize) -> Result<Spectrogram> {
    if !window.is_power_of_two() || window < 2 {
        return Err(Error::param("window", format!("{window} is not a power of two")));
    }
    if hop == 0 {
        return Err(Error::param("hop", "must be positive"));
    }
    let n = clip.samples.len();
    if n < window {
        return Err(Error::Data(format!(
            "clip of {n} samples is shorter than the {window}-sample window; pad it first"
        )));
    }
    let frames = frame_count(n, window, hop);
    let bins = window / 2 + 1;
    let hann = hann_window(window);
    let fft: Arc<dyn Fft<f32>> = FftPlanner::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0f32, 0.0); window];
    let mut magnitudes = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(clip.samples[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        frames,
        bins,
        window,
        hop,
        magnitudes,
    })
}

/// Triangular filters, `mel_bins × (window/2 + 1)`. Peaks are equally
/// spaced on the mel axis between 0 Hz and Nyquist; each row is scaled to a
/// peak of exactly 1.
pub fn mel_filter_matrix(window: usize, mel_bins: usize, sample_rate: u32) -> Result<Matrix> {
    if mel_bins < 2 {
        return Err(Error::param("mel_bins", format!("need at least 2, got {mel_bins}")));
    }
    let bins = window / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist)?;
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / window as f64;
    let mut m = Matrix::zeros(mel_bins, bins);
    for f in 0..mel_bins {
        let (lo, center, hi) = (edges[f], edges[f + 1], edges[f + 2]);
        let row = m.row_mut(f);
        for (k, w) in row.iter_mut().enumerate() {
            let hz = k as f64 * bin_hz;
            let v = if hz <= lo || hz >= hi {
                0.0
            } else if hz <= center {
                (hz - lo) / (center - lo)
            } else {
                (hi - hz) / (hi - center)
            };
            *w = v as f32;
        }
        let peak = row.iter().cloned().fold(0.0f32, f32::max);
        if peak == 0.0 {
            // Filter narrower than one FFT bin: use the nearest bin.
            let k = ((center / bin_hz).round() as usize).min(bins - 1);
            row[k] = 1.0;
        } else {
            let argmax = crate::tensor::argmax(row);
            for w in row.iter_mut() {
                *w /= peak;
            }
            row[argmax] = 1.0;
        }
    }
    Ok(m)
}

/// Mel centre frequencies (in mel) of the filters built by
/// [`mel_filter_matrix`].
pub fn mel_centers(mel_bins: usize, sample_rate: u32) -> Result<Vec<f64>> {
    let top = hz_to_mel(sample_rate as f64 / 2.0)?;
    Ok((1..=mel_bins).map(|i| top * i as f64 / (mel_bins + 1) as f64).collect())
}

/// Filter-weighted sums of squared magnitudes.
pub fn mel_filterbank(spec: &Spectrogram, mel_bins: usize, sample_rate: u32) -> Result<MelSpectrogram> {
    let filters = mel_filter_matrix(spec.window, mel_bins, sample_rate)?;
    if filters.cols() != spec.bins {
        return Err(Error::shape(format!("{} spectrum bins", spec.bins), format!("{} filter taps", filters.cols())));
    }
    let mut values = Vec::with_capacity(spec.frames * mel_bins);
    for t in 0..spec.frames {
        let power: Vec<f32> = spec.frame(t).iter().map(|m| m * m).collect();
        for f in 0..mel_bins {
            let e: f32 = filters.row(f).iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push(e.max(0.0));
        }
    }
    Ok(MelSpectrogram {
        frames: spec.frames,
        mel_bins,
        window: spec.window,
        hop: spec.hop,
        sample_rate,
        values,
    })
}

pub fn melspectrogram(clip: &AudioClip, window: usize, hop: usize, mel_bins: usize) -> Result<MelSpectrogram> {
    let spec = stft_magnitude(clip, window, hop)?;
    mel_filterbank(&spec, mel_bins, clip.sample_rate)
}

/// Reads a PCM 16-bit WAV; stereo (or wider) is averaged to mono.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    parse_wav(&fs::read(path)?)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    let mut r = Reader::new(bytes, "wav");
    if r.bytes(4)? != b"RIFF" {
        return Err(Error::Format("missing RIFF header".into()));
    }
    let _riff_len = r.u32()?;
    if r.bytes(4)? != b"WAVE" {
        return Err(Error::Format("RIFF form is not WAVE".into()));
    }
    let mut format: Option<(u16, u32)> = None;
    loop {
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(id).into_owned();
        match id {
            b"fmt " => {
                let body = r.bytes(len)?;
                let mut f = Reader::new(body, "fmt chunk");
                let tag = f.u16()?;
                let channels = f.u16()?;
                let rate = f.u32()?;
                let _byte_rate = f.u32()?;
                let _align = f.u16()?;
                let bits = f.u16()?;
                if tag != 1 {
                    return Err(Error::UnsupportedWav {
                        chunk: name,
                        reason: format!("format tag {tag}, only PCM (1) is supported"),
                    });
                }
                if bits != 16 {
                    return Err(Error::UnsupportedWav {
                        chunk: name,
                        reason: format!("{bits}-bit samples, only 16-bit is supported"),
                    });
                }
                if channels == 0 {
                    return Err(Error::UnsupportedWav {
                        chunk: name,
                        reason: "zero channels".into(),
                    });
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = format.ok_or_else(|| Error::UnsupportedWav {
                    chunk: name.clone(),
                    reason: "data chunk precedes fmt chunk".into(),
                })?;
                let body = r.bytes(len)?;
                let frame_bytes = 2 * channels as usize;
                if body.len() % frame_bytes != 0 {
                    return Err(Error::Truncated(format!("data chunk of {} bytes is not whole frames", body.len())));
                }
                let samples = body
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f32 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0)
                            .sum();
                        sum / channels as f32
                    })
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {
                r.bytes(len)?;
            }
        }
        if len % 2 == 1 && r.remaining() > 0 {
            r.bytes(1)?;
        }
    }
}

/// Encodes mono PCM16 (samples clamped to `[-1, 1]`).
pub fn encode_wav(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Rows of 1024-dimensional embeddings with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    labels: Option<Vec<u32>>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if data.len() % EMBEDDING_DIM != 0 {
            return Err(Error::shape(
                format!("rows of {EMBEDDING_DIM}"),
                format!("buffer of {}", data.len()),
            ));
        }
        let rows = data.len() / EMBEDDING_DIM;
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::shape(format!("{rows} rows"), format!("{} labels", l.len())));
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(EmbeddingTable { rows, labels, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        EMBEDDING_DIM
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, EMBEDDING_DIM, self.data.clone()).expect("validated on construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.rows * (4 + 4 * EMBEDDING_DIM));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
        out.push(if self.labels.is_some() { FLAG_LABELS } else { 0 });
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "embedding file");
        let magic = r.bytes(4)?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"QMEB\"")));
        }
        let version = r.u16()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let rows = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim != EMBEDDING_DIM {
            return Err(Error::Format(format!("dim {dim}, expected {EMBEDDING_DIM}")));
        }
        let flags = r.u8()?;
        if flags & !FLAG_LABELS != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        let labels = if flags & FLAG_LABELS != 0 {
            let b = r.bytes(rows * 4)?;
            Some(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        } else {
            None
        };
        let data = r.f32s(rows * dim)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        EmbeddingTable::new(data, labels)
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    atomic_write(path, &table.to_bytes())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::from_bytes(&fs::read(path)?)
}
