//! Weight and activation quantizers, bit packing, and model-size accounting.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`). Scales, means,
//! thresholds and biases are always kept as `f32` and are counted in size
//! reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Scale used when every weight equals the mean.
pub const DEGENERATE_SCALE: f32 = 1e-8;

/// Bytes of per-layer framing in the model container: scheme tag, two
/// dimensions, bits per code, scale count, bias count, payload length.
pub const LAYER_FRAMING_BYTES: usize = 1 + 4 + 4 + 1 + 4 + 4 + 8;

/// Container bytes outside the layer table for a single-expert file:
/// magic, version, file length, kind, expert count, expert header (scheme
/// tag, input width, class count, dropout, layer count), CRC.
pub const SINGLE_EXPERT_HEADER_BYTES: usize = 4 + 2 + 8 + 1 + 2 + (1 + 4 + 4 + 4 + 2) + 4;

/// Bit widths accepted by BitLinear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Bits(u8);

impl Bits {
    pub const ALL: [Bits; 5] = [Bits(1), Bits(2), Bits(4), Bits(8), Bits(16)];

    pub fn new(k: u8) -> Result<Self> {
        match k {
            1 | 2 | 4 | 8 | 16 => Ok(Bits(k)),
            _ => Err(Error::param("k", format!("{k} not in {{1, 2, 4, 8, 16}}"))),
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Largest code, `2^{k-1} - 1`.
    pub fn qmax(self) -> i32 {
        (1i32 << (self.0 - 1)) - 1
    }

    /// Smallest code, `-2^{k-1}`.
    pub fn qmin(self) -> i32 {
        -(1i32 << (self.0 - 1))
    }
}

impl TryFrom<u8> for Bits {
    type Error = Error;
    fn try_from(k: u8) -> Result<Self> {
        Bits::new(k)
    }
}

impl From<Bits> for u8 {
    fn from(b: Bits) -> u8 {
        b.0
    }
}

/// Numeric regime of one affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantScheme {
    Float32,
    BitLinear(Bits),
    Ternary,
    BitwiseBinary,
}

impl QuantScheme {
    pub fn bitlinear(k: u8) -> Result<Self> {
        Ok(QuantScheme::BitLinear(Bits::new(k)?))
    }

    /// Bits per stored weight code.
    pub fn code_bits(self) -> u8 {
        match self {
            QuantScheme::Float32 => 32,
            QuantScheme::BitLinear(k) => k.get(),
            QuantScheme::Ternary => 2,
            QuantScheme::BitwiseBinary => 1,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            QuantScheme::Float32 => 0,
            QuantScheme::BitLinear(_) => 1,
            QuantScheme::Ternary => 2,
            QuantScheme::BitwiseBinary => 3,
        }
    }

    pub fn from_tag(tag: u8, bits: u8) -> Result<Self> {
        match tag {
            0 => Ok(QuantScheme::Float32),
            1 => Ok(QuantScheme::BitLinear(Bits::new(bits)?)),
            2 => Ok(QuantScheme::Ternary),
            3 => Ok(QuantScheme::BitwiseBinary),
            _ => Err(Error::Format(format!("unknown scheme tag {tag}"))),
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantScheme::Float32 => f.write_str("float32"),
            QuantScheme::BitLinear(k) => write!(f, "bitlinear{}", k.get()),
            QuantScheme::Ternary => f.write_str("ternary"),
            QuantScheme::BitwiseBinary => f.write_str("bitwise"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "fp32" => Ok(QuantScheme::Float32),
            "ternary" | "bitnet" => Ok(QuantScheme::Ternary),
            "bitwise" | "ptq" => Ok(QuantScheme::BitwiseBinary),
            _ => {
                let k = s
                    .strip_prefix("bitlinear")
                    .or_else(|| s.strip_prefix('q'))
                    .and_then(|k| k.parse::<u8>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown quantization scheme `{s}`")))?;
                QuantScheme::bitlinear(k)
            }
        }
    }
}

impl TryFrom<String> for QuantScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantScheme> for String {
    fn from(s: QuantScheme) -> String {
        s.to_string()
    }
}

/// Integer codes with the per-layer affine parameters of BitLinear.
#[derive(Clone, Debug, PartialEq)]
pub struct BitLinearCodes {
    pub codes: Vec<i32>,
    pub scale: f32,
    pub mean: f32,
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Mean-centred symmetric k-bit quantization for `k ∈ {2, 4, 8, 16}`:
/// `s = max|W − μ| / (2^{k−1} − 1)`, `q = clip(round((W − μ)/s))`.
pub fn quantize_bitlinear(w: &Matrix, k: Bits) -> Result<BitLinearCodes> {
    if k.get() == 1 {
        return Err(Error::param("k", "k = 1 uses sign quantization"));
    }
    check_finite(w.as_slice())?;
    let values = w.as_slice();
    if values.is_empty() {
        return Ok(BitLinearCodes {
            codes: Vec::new(),
            scale: DEGENERATE_SCALE,
            mean: 0.0,
        });
    }
    let mean = (values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64) as f32;
    let spread = values
        .iter()
        .fold(0.0f64, |m, &v| m.max((v as f64 - mean as f64).abs()));
    if spread == 0.0 {
        return Ok(BitLinearCodes {
            codes: vec![0; values.len()],
            scale: DEGENERATE_SCALE,
            mean,
        });
    }
    let scale = (spread / k.qmax() as f64) as f32;
    let codes = values
        .iter()
        .map(|&v| bitlinear_code(v, mean, scale, k))
        .collect();
    Ok(BitLinearCodes { codes, scale, mean })
}

/// Unclipped code `round((v − μ) / s)`.
#[inline]
pub(crate) fn bitlinear_raw(v: f32, mean: f32, scale: f32) -> f64 {
    ((v as f64 - mean as f64) / scale as f64).round()
}

#[inline]
pub(crate) fn bitlinear_code(v: f32, mean: f32, scale: f32, k: Bits) -> i32 {
    (bitlinear_raw(v, mean, scale).clamp(k.qmin() as f64, k.qmax() as f64)) as i32
}

/// One-bit realization: `q = sign(W)` with `sign(0) = +1`, `s = mean|W|`.
pub fn quantize_sign(w: &Matrix) -> Result<(Vec<i32>, f32)> {
    check_finite(w.as_slice())?;
    let values = w.as_slice();
    let codes = values.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let scale = if values.is_empty() {
        DEGENERATE_SCALE
    } else {
        let m = values.iter().map(|&v| v.abs() as f64).sum::<f64>() / values.len() as f64;
        if m == 0.0 {
            DEGENERATE_SCALE
        } else {
            m as f32
        }
    };
    Ok((codes, scale))
}

/// `sign(w) · 1(|w| > τ)` elementwise.
pub fn quantize_ternary(w: &Matrix, tau: f32) -> Result<Vec<i8>> {
    if !(tau >= 0.0) {
        return Err(Error::param("tau", format!("must be >= 0, got {tau}")));
    }
    check_finite(w.as_slice())?;
    Ok(w.as_slice().iter().map(|&v| ternary_code(v, tau)).collect())
}

#[inline]
pub(crate) fn ternary_code(v: f32, tau: f32) -> i8 {
    if v.abs() > tau {
        if v >= 0.0 {
            1
        } else {
            -1
        }
    } else {
        0
    }
}

/// Absmax int8 activation quantization: `s_x = 127 / max|x|`.
pub fn quantize_activations(x: &[f32]) -> Result<(Vec<i8>, f32)> {
    check_finite(x)?;
    let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 { 1.0 } else { 127.0 / max };
    let codes = x
        .iter()
        .map(|&v| ((v as f64 * scale as f64).round().clamp(-127.0, 127.0)) as i8)
        .collect();
    Ok((codes, scale))
}

pub fn dequantize_activations(codes: &[i8], scale: f32) -> Vec<f32> {
    codes.iter().map(|&c| c as f32 / scale).collect()
}

/// Bit-packed codes. Codes are stored offset-binary (`code + 2^{k−1}`),
/// LSB-first within each byte, in row-major order. One-bit payloads store
/// sign codes as `bit = (code > 0)`; 32-bit payloads hold raw `f32` bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedWeights {
    bits_per_code: u8,
    code_count: usize,
    payload: Vec<u8>,
}

pub fn packed_len(code_count: usize, bits: u8) -> usize {
    (code_count * bits as usize).div_ceil(8)
}

impl PackedWeights {
    pub fn pack(codes: &[i32], bits: u8) -> Result<Self> {
        if !matches!(bits, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::param("bits", format!("cannot pack {bits}-bit codes")));
        }
        let mut payload = vec![0u8; packed_len(codes.len(), bits)];
        let offset = 1i64 << (bits - 1);
        for (i, &c) in codes.iter().enumerate() {
            let raw: u64 = if bits == 1 {
                match c {
                    1 => 1,
                    -1 => 0,
                    _ => return Err(Error::param("codes", format!("sign code {c} at {i}"))),
                }
            } else {
                let u = c as i64 + offset;
                if u < 0 || u >= 1 << bits {
                    return Err(Error::param(
                        "codes",
                        format!("code {c} at {i} outside {bits}-bit range"),
                    ));
                }
                u as u64
            };
            write_bits(&mut payload, i * bits as usize, bits, raw);
        }
        Ok(PackedWeights {
            bits_per_code: bits,
            code_count: codes.len(),
            payload,
        })
    }

    pub fn from_f32(values: &[f32]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        PackedWeights {
            bits_per_code: 32,
            code_count: values.len(),
            payload,
        }
    }

    /// Wraps raw bytes; fails unless the payload length matches.
    pub fn from_raw(bits_per_code: u8, code_count: usize, payload: Vec<u8>) -> Result<Self> {
        if !matches!(bits_per_code, 1 | 2 | 4 | 8 | 16 | 32) {
            return Err(Error::Integrity(format!("bits per code {bits_per_code}")));
        }
        let want = packed_len(code_count, bits_per_code);
        if payload.len() != want {
            return Err(Error::Integrity(format!(
                "payload of {} bytes, expected {want} for {code_count} codes at {bits_per_code} bits",
                payload.len()
            )));
        }
        Ok(PackedWeights {
            bits_per_code,
            code_count,
            payload,
        })
    }

    pub fn bits_per_code(&self) -> u8 {
        self.bits_per_code
    }

    pub fn code_count(&self) -> usize {
        self.code_count
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn unpack(&self) -> Result<Vec<i32>> {
        let bits = self.bits_per_code;
        if bits == 32 {
            return Err(Error::Integrity("32-bit payload holds floats, not codes".into()));
        }
        if self.payload.len() != packed_len(self.code_count, bits) {
            return Err(Error::Integrity("payload length does not match code count".into()));
        }
        let offset = 1i64 << (bits - 1);
        Ok((0..self.code_count)
            .map(|i| {
                let raw = read_bits(&self.payload, i * bits as usize, bits);
                if bits == 1 {
                    if raw == 1 {
                        1
                    } else {
                        -1
                    }
                } else {
                    (raw as i64 - offset) as i32
                }
            })
            .collect())
    }

    pub fn unpack_f32(&self) -> Result<Vec<f32>> {
        if self.bits_per_code != 32 || self.payload.len() != self.code_count * 4 {
            return Err(Error::Integrity("not a float payload".into()));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

// Widths divide 8 or equal 16, so a code never straddles a byte boundary
// unless it is 16 bits wide and byte aligned.
fn write_bits(buf: &mut [u8], bit_pos: usize, bits: u8, value: u64) {
    let i = bit_pos / 8;
    if bits == 16 {
        buf[i..i + 2].copy_from_slice(&(value as u16).to_le_bytes());
    } else {
        buf[i] |= (value as u8) << (bit_pos % 8);
    }
}

fn read_bits(buf: &[u8], bit_pos: usize, bits: u8) -> u64 {
    let i = bit_pos / 8;
    if bits == 16 {
        u16::from_le_bytes([buf[i], buf[i + 1]]) as u64
    } else {
        ((buf[i] >> (bit_pos % 8)) & ((1u16 << bits) - 1) as u8) as u64
    }
}

/// A layer in its stored form. Field meaning depends on `scheme`:
///
/// | scheme        | `scales`                    | `mean` | `threshold`          |
/// |---------------|-----------------------------|--------|----------------------|
/// | Float32       | empty                       | –      | –                    |
/// | BitLinear(1)  | `[s]`, `s = mean|W|`        | –      | –                    |
/// | BitLinear(k)  | `[s_w]`                     | `μ_W`  | –                    |
/// | Ternary       | `α_i` per output channel    | –      | `τ`                  |
/// | BitwiseBinary | output scale per channel    | –      | activation threshold |
///
/// Weights are `out_dim × in_dim`, row `i` feeding output `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub scheme: QuantScheme,
    pub packed: PackedWeights,
    pub scales: Vec<f32>,
    pub mean: f32,
    pub threshold: f32,
    pub bias: Vec<f32>,
}

impl QuantizedLayer {
    pub fn float32(weights: &Matrix, bias: Vec<f32>) -> Result<Self> {
        check_bias(weights, &bias)?;
        Ok(QuantizedLayer {
            in_dim: weights.cols(),
            out_dim: weights.rows(),
            scheme: QuantScheme::Float32,
            packed: PackedWeights::from_f32(weights.as_slice()),
            scales: Vec::new(),
            mean: 0.0,
            threshold: 0.0,
            bias,
        })
    }

    /// BitLinear at any supported width; `k = 1` goes through sign
    /// quantization.
    pub fn bitlinear(weights: &Matrix, k: Bits, bias: Vec<f32>) -> Result<Self> {
        check_bias(weights, &bias)?;
        let (codes, scale, mean) = if k.get() == 1 {
            let (c, s) = quantize_sign(weights)?;
            (c, s, 0.0)
        } else {
            let q = quantize_bitlinear(weights, k)?;
            (q.codes, q.scale, q.mean)
        };
        Ok(QuantizedLayer {
            in_dim: weights.cols(),
            out_dim: weights.rows(),
            scheme: QuantScheme::BitLinear(k),
            packed: PackedWeights::pack(&codes, k.get())?,
            scales: vec![scale],
            mean,
            threshold: 0.0,
            bias,
        })
    }

    pub fn ternary(weights: &Matrix, tau: f32, alphas: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        check_bias(weights, &bias)?;
        if alphas.len() != weights.rows() {
            return Err(Error::shape(
                format!("{} output channels", weights.rows()),
                format!("{} channel scales", alphas.len()),
            ));
        }
        let codes: Vec<i32> = quantize_ternary(weights, tau)?
            .into_iter()
            .map(i32::from)
            .collect();
        Ok(QuantizedLayer {
            in_dim: weights.cols(),
            out_dim: weights.rows(),
            scheme: QuantScheme::Ternary,
            packed: PackedWeights::pack(&codes, 2)?,
            scales: alphas,
            mean: 0.0,
            threshold: tau,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.bias.len()
    }

    /// Number of `f32` values stored besides scales and bias.
    pub(crate) fn aux_floats(&self) -> usize {
        match self.scheme {
            QuantScheme::Float32 => 0,
            QuantScheme::BitLinear(k) if k.get() == 1 => 0,
            QuantScheme::BitLinear(_) => 1,
            QuantScheme::Ternary | QuantScheme::BitwiseBinary => 1,
        }
    }

    /// Checks every structural invariant; returns an integrity error on the
    /// first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.in_dim * self.out_dim;
        if self.packed.code_count() != n {
            return Err(Error::Integrity(format!(
                "{} codes for a {}x{} layer",
                self.packed.code_count(),
                self.out_dim,
                self.in_dim
            )));
        }
        if self.packed.bits_per_code() != self.scheme.code_bits() {
            return Err(Error::Integrity(format!(
                "{}-bit payload for scheme {}",
                self.packed.bits_per_code(),
                self.scheme
            )));
        }
        if !self.bias.is_empty() && self.bias.len() != self.out_dim {
            return Err(Error::Integrity(format!("bias of {} for {} outputs", self.bias.len(), self.out_dim)));
        }
        let want_scales = match self.scheme {
            QuantScheme::Float32 => 0,
            QuantScheme::BitLinear(_) => 1,
            QuantScheme::Ternary | QuantScheme::BitwiseBinary => self.out_dim,
        };
        if self.scales.len() != want_scales {
            return Err(Error::Integrity(format!(
                "{} scales for scheme {} (expected {want_scales})",
                self.scales.len(),
                self.scheme
            )));
        }
        let all_finite = self
            .scales
            .iter()
            .chain(&self.bias)
            .chain([&self.mean, &self.threshold])
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Integrity("non-finite layer parameter".into()));
        }
        Ok(())
    }

    /// Reconstructs real-valued weights (`out_dim × in_dim`).
    pub fn dequantize(&self) -> Result<Matrix> {
        self.validate()?;
        let (rows, cols) = (self.out_dim, self.in_dim);
        let data = match self.scheme {
            QuantScheme::Float32 => self.packed.unpack_f32()?,
            QuantScheme::BitLinear(k) => {
                let s = self.scales[0];
                let codes = self.packed.unpack()?;
                if k.get() == 1 {
                    codes.iter().map(|&c| c as f32 * s).collect()
                } else {
                    codes.iter().map(|&c| c as f32 * s + self.mean).collect()
                }
            }
            QuantScheme::Ternary => {
                let codes = self.packed.unpack()?;
                if let Some(i) = codes.iter().position(|c| !(-1..=1).contains(c)) {
                    return Err(Error::Integrity(format!("ternary code {} at {i}", codes[i])));
                }
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| c as f32 * self.scales[i / cols])
                    .collect()
            }
            QuantScheme::BitwiseBinary => {
                // ±1 decoding, scaled per output channel.
                let codes = self.packed.unpack()?;
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| c as f32 * self.scales[i / cols].abs())
                    .collect()
            }
        };
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn storage_bytes(&self) -> LayerSize {
        LayerSize {
            scheme: self.scheme,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            params: self.param_count(),
            payload_bytes: self.packed.payload().len(),
            quant_param_bytes: 4 * (self.scales.len() + self.aux_floats()),
            bias_bytes: 4 * self.bias.len(),
            framing_bytes: LAYER_FRAMING_BYTES,
        }
    }
}

fn check_bias(weights: &Matrix, bias: &[f32]) -> Result<()> {
    if !bias.is_empty() && bias.len() != weights.rows() {
        return Err(Error::shape(
            format!("{} outputs", weights.rows()),
            format!("bias of {}", bias.len()),
        ));
    }
    check_finite(bias)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub scheme: QuantScheme,
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: usize,
    pub payload_bytes: usize,
    pub quant_param_bytes: usize,
    pub bias_bytes: usize,
    pub framing_bytes: usize,
}

impl LayerSize {
    /// Bytes attributed to the layer itself (framing is counted as header).
    pub fn bytes(&self) -> usize {
        self.payload_bytes + self.quant_param_bytes + self.bias_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub scheme: String,
    pub layers: Vec<LayerSize>,
    pub param_count: usize,
    pub header_bytes: usize,
    pub total_bytes: usize,
    pub fp32_bytes: usize,
    pub reduction: f64,
}

impl SizeReport {
    pub fn total_kb(&self) -> f64 {
        self.total_bytes as f64 / 1000.0
    }
}

/// Size of `layers` as stored in a single-expert container, against an
/// all-`f32` baseline of `param_count × 4` bytes.
pub fn model_size_report(layers: &[QuantizedLayer]) -> SizeReport {
    let sizes: Vec<LayerSize> = layers.iter().map(QuantizedLayer::storage_bytes).collect();
    let param_count: usize = sizes.iter().map(|l| l.params).sum();
    let header_bytes =
        SINGLE_EXPERT_HEADER_BYTES + sizes.iter().map(|l| l.framing_bytes).sum::<usize>();
    let total_bytes = header_bytes + sizes.iter().map(LayerSize::bytes).sum::<usize>();
    let fp32_bytes = param_count * 4;
    let mut schemes: Vec<String> = Vec::new();
    for l in &sizes {
        let s = l.scheme.to_string();
        if !schemes.contains(&s) {
            schemes.push(s);
        }
    }
    SizeReport {
        scheme: schemes.join("+"),
        layers: sizes,
        param_count,
        header_bytes,
        total_bytes,
        fp32_bytes,
        reduction: fp32_bytes as f64 / total_bytes as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn row(v: &[f32]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    fn k(bits: u8) -> Bits {
        Bits::new(bits).unwrap()
    }

    #[test]
    fn bitlinear_k8_example() {
        // Zero-mean variant of the worked example; 63.5 rounds away to 64.
        let q = quantize_bitlinear(&row(&[1.27, -1.27, 0.635, -0.635]), k(8)).unwrap();
        assert_eq!(q.mean, 0.0);
        assert!((q.scale - 0.01).abs() < 1e-9);
        assert_eq!(q.codes, vec![127, -127, 64, -64]);
    }

    #[test]
    fn bitlinear_k8_example_with_nonzero_mean() {
        // The literal vector [1.27, -1.27, 0.635, 0] has mean 0.15875, so
        // centring shifts every code: s = 1.42875 / 127.
        let q = quantize_bitlinear(&row(&[1.27, -1.27, 0.635, 0.0]), k(8)).unwrap();
        assert!((q.mean - 0.15875).abs() < 1e-6);
        assert!((q.scale - 1.42875 / 127.0).abs() < 1e-7);
        assert_eq!(q.codes, vec![99, -127, 42, -14]);
    }

    #[test]
    fn bitlinear_k2_example() {
        let q = quantize_bitlinear(&row(&[0.9, -0.9, 0.45, -0.45]), k(2)).unwrap();
        assert!((q.scale - 0.9).abs() < 1e-7);
        assert_eq!(q.codes, vec![1, -1, 1, -1]);
    }

    #[test]
    fn bitlinear_all_zero() {
        for bits in [2, 4, 8, 16] {
            let q = quantize_bitlinear(&Matrix::zeros(3, 4), k(bits)).unwrap();
            assert_eq!(q.scale, DEGENERATE_SCALE);
            assert!(q.codes.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn bits_reject_unsupported_width() {
        assert!(Bits::new(3).is_err());
        assert!(Bits::new(0).is_err());
        assert!(quantize_bitlinear(&row(&[1.0]), k(1)).is_err());
    }

    #[test]
    fn sign_examples() {
        let (codes, s) = quantize_sign(&row(&[0.3, -0.2, 0.0])).unwrap();
        assert_eq!(codes, vec![1, -1, 1]);
        assert!((s - 0.5 / 3.0).abs() < 1e-7);
        let (codes, _) = quantize_sign(&row(&[0.1, 2.0, 3.0])).unwrap();
        assert!(codes.iter().all(|&c| c == 1));
    }

    #[test]
    fn sign_dequant_error_bounded_by_max_abs() {
        let mut rng = Rng::new(9);
        let w = row(&(0..64).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>());
        let (codes, s) = quantize_sign(&w).unwrap();
        let max = w.max_abs();
        for (c, v) in codes.iter().zip(w.as_slice()) {
            assert!((*c as f32 * s - v).abs() <= max + 1e-6);
        }
    }

    #[test]
    fn ternary_examples() {
        let w = row(&[0.5, -0.02, 0.1, -0.3]);
        assert_eq!(quantize_ternary(&w, 0.05).unwrap(), vec![1, 0, 1, -1]);
        assert_eq!(quantize_ternary(&w, 0.6).unwrap(), vec![0, 0, 0, 0]);
        let w = row(&[0.5, -0.02, 0.0, -0.3]);
        assert_eq!(quantize_ternary(&w, 0.0).unwrap(), vec![1, -1, 0, -1]);
        assert!(quantize_ternary(&w, -0.1).is_err());
    }

    #[test]
    fn activation_examples() {
        let (codes, s) = quantize_activations(&[2.0, -1.0, 0.5]).unwrap();
        assert_eq!(s, 63.5);
        assert_eq!(codes, vec![127, -64, 32]);
        let (codes, s) = quantize_activations(&[0.0; 5]).unwrap();
        assert_eq!(s, 1.0);
        assert!(codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn activation_round_trip_error() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let n = 1 + rng.below(32);
            let x: Vec<f32> = (0..n).map(|_| rng.normal() as f32 * 3.0).collect();
            let (codes, s) = quantize_activations(&x).unwrap();
            let back = dequantize_activations(&codes, s);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= 0.5 / s + 1e-6, "{a} vs {b} at s={s}");
            }
        }
    }

    #[test]
    fn dequantize_examples() {
        let w = row(&[1.27, -1.27, 0.635, -0.635]);
        let layer = QuantizedLayer::bitlinear(&w, k(8), vec![]).unwrap();
        let d = layer.dequantize().unwrap();
        let want = [1.27, -1.27, 0.64, -0.64];
        for (a, b) in d.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        let zeros = Matrix::from_vec(2, 3, vec![0.01; 6]).unwrap();
        let t = QuantizedLayer::ternary(&zeros, 0.05, vec![0.7, 0.2], vec![]).unwrap();
        assert_eq!(t.dequantize().unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn dequantize_k16_within_half_step() {
        let mut rng = Rng::new(5);
        let w = Matrix::from_vec(8, 8, (0..64).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
        let layer = QuantizedLayer::bitlinear(&w, k(16), vec![]).unwrap();
        let s = layer.scales[0];
        let d = layer.dequantize().unwrap();
        for (a, b) in d.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-6);
        }
    }

    #[test]
    fn corrupt_pack_is_an_integrity_error() {
        let w = Matrix::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let mut layer = QuantizedLayer::ternary(&w, 0.05, vec![1.0, 1.0], vec![]).unwrap();
        // Offset code 0 decodes to -2, illegal for ternary.
        layer.packed = PackedWeights::from_raw(2, 4, vec![0x00]).unwrap();
        assert!(matches!(layer.dequantize(), Err(Error::Integrity(_))));

        let mut layer = QuantizedLayer::bitlinear(&w, k(4), vec![]).unwrap();
        layer.packed = PackedWeights::from_raw(4, 3, vec![0, 0]).unwrap();
        assert!(matches!(layer.dequantize(), Err(Error::Integrity(_))));
        assert!(PackedWeights::from_raw(4, 4, vec![0]).is_err());
    }

    #[test]
    fn pack_layout_is_lsb_first_offset_binary() {
        // 4-bit codes -8 and 7 → nibbles 0x0 and 0xF → byte 0xF0.
        let p = PackedWeights::pack(&[-8, 7], 4).unwrap();
        assert_eq!(p.payload(), &[0xF0]);
        let p = PackedWeights::pack(&[1, -1, -1, 1, 1, -1, -1, -1, 1], 1).unwrap();
        assert_eq!(p.payload(), &[0b0001_1001, 0b0000_0001]);
        let p = PackedWeights::pack(&[-32768, 32767], 16).unwrap();
        assert_eq!(p.payload(), &[0x00, 0x00, 0xFF, 0xFF]);
        assert!(PackedWeights::pack(&[8], 4).is_err());
    }

    #[test]
    fn size_of_single_fp32_layer() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = model_size_report(&[QuantizedLayer::float32(&w, vec![]).unwrap()]);
        assert_eq!(r.layers[0].bytes(), 16);
        assert_eq!(r.total_bytes, 16 + r.header_bytes);
        assert_eq!(r.fp32_bytes, 16);
    }

    #[test]
    fn size_is_monotone_in_bits() {
        let mut rng = Rng::new(1);
        let w = Matrix::from_vec(37, 53, (0..37 * 53).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let bias = vec![0.0; 37];
        let sizes: Vec<usize> = Bits::ALL
            .iter()
            .map(|&b| model_size_report(&[QuantizedLayer::bitlinear(&w, b, bias.clone()).unwrap()]).total_bytes)
            .collect();
        assert!(sizes.windows(2).all(|p| p[0] < p[1]), "{sizes:?}");
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ["float32", "bitlinear1", "bitlinear16", "ternary", "bitwise"] {
            assert_eq!(s.parse::<QuantScheme>().unwrap().to_string(), s);
        }
        assert!("bitlinear3".parse::<QuantScheme>().is_err());
        assert!("int8".parse::<QuantScheme>().is_err());
    }
}
