//! Versioned binary checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "RNCK" u32:version
//! { [u8;4]:tag  u64:length  payload }*      sections, terminated by "END."
//! ```
//!
//! * `META`: UTF-8 `key=value` lines, order preserved.
//! * `NETW`: schedule string, dimensions, normalization and every layer as
//!   declared shapes followed by contiguous `f64` data.
//! * `ADAM`: optional optimizer state.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::net::{Dense, InputNormalization, ValueNet};
use super::schedule::ActivationSchedule;
use crate::binio::{put_f64, put_f64s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ValueNet,
    pub optimizer: Option<AdamState>,
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(net: ValueNet) -> Self {
        Self {
            net,
            optimizer: None,
            metadata: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        save_checkpoint(&self.net, self.optimizer.as_ref(), &self.metadata)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        load_checkpoint(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serialize a network, optional optimizer state and metadata.
pub fn save_checkpoint(
    net: &ValueNet,
    optimizer: Option<&AdamState>,
    metadata: &[(String, String)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);

    let mut meta = String::new();
    for (k, v) in metadata {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "metadata entry {k:?} cannot be stored as a key=value line"
            )));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    section(&mut out, b"META", meta.as_bytes());
    section(&mut out, b"NETW", &encode_net(net));
    if let Some(opt) = optimizer {
        section(&mut out, b"ADAM", &encode_adam(opt));
    }
    section(&mut out, b"END.", &[]);
    Ok(out)
}

/// Parse a checkpoint. Any truncation or inconsistency is an error; no
/// partially decoded network is returned.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut metadata = Vec::new();
    let mut net = None;
    let mut optimizer = None;
    loop {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        match &tag {
            b"META" => {
                let text = std::str::from_utf8(payload)
                    .map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
                for line in text.lines() {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::Corrupt(format!("metadata line {line:?}")))?;
                    metadata.push((k.to_string(), v.to_string()));
                }
            }
            b"NETW" => net = Some(decode_net(payload)?),
            b"ADAM" => optimizer = Some(decode_adam(payload)?),
            b"END." => break,
            other => {
                return Err(Error::Corrupt(format!(
                    "unknown section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes after END section".into()));
    }
    let net = net.ok_or_else(|| Error::Corrupt("missing NETW section".into()))?;
    if let Some(opt) = &optimizer {
        let params = net.parameters();
        if opt.first_moment.len() != params.len()
            || opt
                .first_moment
                .iter()
                .zip(&params)
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Corrupt("optimizer state does not match network".into()));
        }
    }
    Ok(Checkpoint {
        net,
        optimizer,
        metadata,
    })
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

fn encode_net(net: &ValueNet) -> Vec<u8> {
    let mut out = Vec::new();
    let schedule = net.schedule().render();
    put_u32(&mut out, schedule.len() as u32);
    out.extend_from_slice(schedule.as_bytes());
    put_u32(&mut out, net.input_dim() as u32);
    put_u32(&mut out, net.hidden_width() as u32);
    put_f64(&mut out, net.omega0());
    put_f64s(&mut out, net.normalization().offset());
    put_f64s(&mut out, net.normalization().scale());
    put_u32(&mut out, net.layers().len() as u32);
    for layer in net.layers() {
        put_f64(&mut out, layer.freq);
        put_u32(&mut out, layer.fan_out as u32);
        put_u32(&mut out, layer.fan_in as u32);
        put_f64s(&mut out, &layer.weight);
        put_u32(&mut out, layer.bias.len() as u32);
        put_f64s(&mut out, &layer.bias);
    }
    out
}

fn decode_net(payload: &[u8]) -> Result<ValueNet> {
    let mut r = Reader::new(payload);
    let slen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(slen)?)
        .map_err(|_| Error::Corrupt("schedule is not UTF-8".into()))?;
    let schedule = ActivationSchedule::parse(text)?;
    let input_dim = r.u32()? as usize;
    let _hidden = r.u32()? as usize;
    let omega0 = r.f64()?;
    let offset = r.f64s(input_dim)?;
    let scale = r.f64s(input_dim)?;
    let n_layers = r.u32()? as usize;
    if n_layers != schedule.len() {
        return Err(Error::Corrupt("layer count does not match schedule".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for act in schedule.layers() {
        let freq = r.f64()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let weight = r.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Corrupt("shape".into()))?)?;
        let blen = r.u32()? as usize;
        let bias = r.f64s(blen)?;
        layers.push(Dense {
            fan_in: cols,
            fan_out: rows,
            activation: *act,
            freq,
            weight,
            bias,
        });
    }
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes in NETW".into()));
    }
    let norm = InputNormalization::new(offset, scale)?;
    ValueNet::from_parts(schedule, omega0, norm, layers)
}

fn encode_adam(opt: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, opt.step);
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon] {
        put_f64(&mut out, v);
    }
    put_u32(&mut out, opt.first_moment.len() as u32);
    for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
        put_u64(&mut out, m.len() as u64);
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    out
}

fn decode_adam(payload: &[u8]) -> Result<AdamState> {
    let mut r = Reader::new(payload);
    let step = r.u64()?;
    let learning_rate = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let n = r.u32()? as usize;
    let mut first_moment = Vec::with_capacity(n.min(1024));
    let mut second_moment = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u64()? as usize;
        first_moment.push(r.f64s(len)?);
        second_moment.push(r.f64s(len)?);
    }
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes in ADAM".into()));
    }
    Ok(AdamState {
        learning_rate,
        beta1,
        beta2,
        epsilon,
        step,
        first_moment,
        second_moment,
    })
}
