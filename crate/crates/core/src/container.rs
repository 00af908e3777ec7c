//! `CQMF` binary model container.
//!
//! ```text
//! magic "CQMF" | version u16 | file length u64 | kind u8 | expert count u16
//! per expert:  scheme tag u8 | input width u32 | classes u32 | dropout f32
//!              | layer count u16 | layers
//! mixture only: routing block | router block
//! CRC32 of every preceding byte
//! ```
//!
//! A layer is `tag u8 | in u32 | out u32 | bits u8 | scale count u32 |
//! scales f32… | aux f32 (μ or τ, when the scheme has one) | bias count u32 |
//! bias f32… | payload length u64 | payload`. Integers and floats are
//! little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::expert::ExpertNet;
use crate::io_util::{atomic_write, Reader};
use crate::moe::{CuriosityTarget, MoEModel, RouterNet, RoutingConfig};
use crate::quant::{PackedWeights, QuantScheme, QuantizedLayer};

pub const MAGIC: &[u8; 4] = b"CQMF";
pub const VERSION: u16 = 1;
const KIND_EXPERT: u8 = 0;
const KIND_MOE: u8 = 1;
/// Magic, version and length: the minimum needed to classify a file.
const PREAMBLE: usize = 4 + 2 + 8;

#[derive(Clone, Debug)]
pub enum Model {
    Expert(ExpertNet),
    Mixture(MoEModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Expert(_) => "expert",
            Model::Mixture(_) => "moe",
        }
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn count<T: TryFrom<usize>>(n: usize, what: &str) -> Result<T> {
    T::try_from(n).map_err(|_| Error::Format(format!("{what} count {n} does not fit the container")))
}

fn aux_value(layer: &QuantizedLayer) -> Option<f32> {
    match layer.scheme {
        QuantScheme::Float32 => None,
        QuantScheme::BitLinear(k) if k.get() == 1 => None,
        QuantScheme::BitLinear(_) => Some(layer.mean),
        QuantScheme::Ternary | QuantScheme::BitwiseBinary => Some(layer.threshold),
    }
}

fn encode_layer(out: &mut Vec<u8>, layer: &QuantizedLayer) -> Result<()> {
    layer.validate()?;
    out.push(layer.scheme.tag());
    put_u32(out, count(layer.in_dim, "input")?);
    put_u32(out, count(layer.out_dim, "output")?);
    out.push(layer.packed.bits_per_code());
    put_u32(out, count(layer.scales.len(), "scale")?);
    put_f32s(out, &layer.scales);
    if let Some(a) = aux_value(layer) {
        put_f32s(out, &[a]);
    }
    put_u32(out, count(layer.bias.len(), "bias")?);
    put_f32s(out, &layer.bias);
    out.extend_from_slice(&(layer.packed.payload().len() as u64).to_le_bytes());
    out.extend_from_slice(layer.packed.payload());
    Ok(())
}

fn decode_layer(r: &mut Reader) -> Result<QuantizedLayer> {
    let tag = r.u8()?;
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let bits = r.u8()?;
    let scheme = QuantScheme::from_tag(tag, bits)?;
    let n_scales = r.u32()? as usize;
    let scales = r.f32s(n_scales)?;
    let mut layer = QuantizedLayer {
        in_dim,
        out_dim,
        scheme,
        packed: PackedWeights::from_f32(&[]),
        scales,
        mean: 0.0,
        threshold: 0.0,
        bias: Vec::new(),
    };
    match scheme {
        QuantScheme::BitLinear(k) if k.get() > 1 => layer.mean = r.f32()?,
        QuantScheme::Ternary | QuantScheme::BitwiseBinary => layer.threshold = r.f32()?,
        _ => {}
    }
    let n_bias = r.u32()? as usize;
    layer.bias = r.f32s(n_bias)?;
    let payload_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("payload length overflows".into()))?;
    let code_count = in_dim
        .checked_mul(out_dim)
        .ok_or_else(|| Error::Format("layer dimensions overflow".into()))?;
    layer.packed = PackedWeights::from_raw(bits, code_count, r.bytes(payload_len)?.to_vec())?;
    layer.validate()?;
    Ok(layer)
}

fn encode_expert(out: &mut Vec<u8>, e: &ExpertNet) -> Result<()> {
    let c = e.config();
    out.push(c.scheme().tag());
    put_u32(out, count(c.in_dim, "input")?);
    put_u32(out, count(c.num_classes, "class")?);
    put_f32s(out, &[c.dropout_p]);
    let layers = e.stored_layers();
    put_u16(out, count(layers.len(), "layer")?);
    for l in &layers {
        encode_layer(out, l)?;
    }
    Ok(())
}

fn decode_expert(r: &mut Reader) -> Result<ExpertNet> {
    let tag = r.u8()?;
    let in_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let dropout = r.f32()?;
    let n = r.u16()? as usize;
    let layers = (0..n).map(|_| decode_layer(r)).collect::<Result<Vec<_>>>()?;
    let net = ExpertNet::from_stored(layers, dropout)?;
    if net.config().scheme().tag() != tag || net.config().in_dim != in_dim || net.num_classes() != classes {
        return Err(Error::Format("expert header disagrees with its layers".into()));
    }
    Ok(net)
}

fn encode_routing(out: &mut Vec<u8>, c: &RoutingConfig) -> Result<()> {
    put_u16(out, count(c.k, "k")?);
    out.extend_from_slice(&c.temperature.to_le_bytes());
    out.extend_from_slice(&c.alpha_curiosity.to_le_bytes());
    put_f32s(out, &[c.alpha_balance]);
    put_u16(out, count(c.mc_samples, "mc sample")?);
    out.push(match c.curiosity_target {
        CuriosityTarget::ClassDistributions => 0,
        CuriosityTarget::GateSamples => 1,
    });
    out.push(c.entropy_gate.is_some() as u8);
    out.extend_from_slice(&c.entropy_gate.unwrap_or(0.0).to_le_bytes());
    Ok(())
}

fn f64_at(r: &mut Reader) -> Result<f64> {
    Ok(f64::from_bits(r.u64()?))
}

fn decode_routing(r: &mut Reader) -> Result<RoutingConfig> {
    let k = r.u16()? as usize;
    let temperature = f64_at(r)?;
    let alpha_curiosity = f64_at(r)?;
    let alpha_balance = r.f32()?;
    let mc_samples = r.u16()? as usize;
    let curiosity_target = match r.u8()? {
        0 => CuriosityTarget::ClassDistributions,
        1 => CuriosityTarget::GateSamples,
        t => return Err(Error::Format(format!("unknown curiosity target {t}"))),
    };
    let gated = r.u8()?;
    let gate = f64_at(r)?;
    Ok(RoutingConfig {
        k,
        temperature,
        alpha_curiosity,
        alpha_balance,
        mc_samples,
        curiosity_target,
        entropy_gate: (gated != 0).then_some(gate),
    })
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    out.extend_from_slice(&[0; 8]);
    match model {
        Model::Expert(e) => {
            out.push(KIND_EXPERT);
            put_u16(&mut out, 1);
            encode_expert(&mut out, e)?;
        }
        Model::Mixture(m) => {
            out.push(KIND_MOE);
            put_u16(&mut out, count(m.num_experts(), "expert")?);
            for e in m.experts() {
                encode_expert(&mut out, e)?;
            }
            encode_routing(&mut out, m.config())?;
            let router = m.router().mlp();
            put_u16(&mut out, count(router.dropout().len(), "dropout")?);
            put_f32s(&mut out, router.dropout());
            let layers = router.stored_layers();
            put_u16(&mut out, count(layers.len(), "layer")?);
            for l in &layers {
                encode_layer(&mut out, l)?;
            }
        }
    }
    let total = (out.len() + 4) as u64;
    out[6..14].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREAMBLE + 4 {
        return Err(Error::Truncated(format!("{} bytes is shorter than any container", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CQMF container".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let declared = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    if (bytes.len() as u64) < declared {
        return Err(Error::Truncated(format!("file has {} of {declared} bytes", bytes.len())));
    }
    if (bytes.len() as u64) > declared {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() as u64 - declared)));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader::new(&body[PREAMBLE..], "model container");
    let kind = r.u8()?;
    let n = r.u16()? as usize;
    let model = match kind {
        KIND_EXPERT => {
            if n != 1 {
                return Err(Error::Format(format!("expert container lists {n} experts")));
            }
            Model::Expert(decode_expert(&mut r)?)
        }
        KIND_MOE => {
            let experts = (0..n).map(|_| decode_expert(&mut r)).collect::<Result<Vec<_>>>()?;
            let routing = decode_routing(&mut r)?;
            let nd = r.u16()? as usize;
            let dropout = r.f32s(nd)?;
            let nl = r.u16()? as usize;
            let layers = (0..nl).map(|_| decode_layer(&mut r)).collect::<Result<Vec<_>>>()?;
            let router = RouterNet::from_stored(layers, dropout)?;
            Model::Mixture(MoEModel::new(experts, router, routing)?)
        }
        k => return Err(Error::Format(format!("unknown model kind {k}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} unparsed bytes before the checksum", r.remaining())));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path)?)
}
