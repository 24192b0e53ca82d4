//! Shared checkpoint format for every network in the pipeline.
//!
//! Layout: magic "DVD1", version u16, role u8, frozen u8, role-specific
//! header (drift models carry their step count and embedding spec), layer
//! count u16, then per layer: rows u32, cols u32, activation tag u8,
//! weights f32 LE row-major, biases f32 LE. All integers little-endian.
//! Writes go through a temp file and an atomic rename.

use std::fs;
use std::path::Path;

use crate::diffcore::{Act, Layer, MlpNet, Tensor2};
use crate::driftnet::{DriftModel, EmbedSpec};
use crate::error::{DvdError, Result};

const MAGIC: &[u8; 4] = b"DVD1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    SourceEncoder,
    TargetEncoder,
    Classifier,
    Drift,
}

impl NetRole {
    pub fn tag(self) -> u8 {
        match self {
            NetRole::SourceEncoder => 1,
            NetRole::TargetEncoder => 2,
            NetRole::Classifier => 3,
            NetRole::Drift => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(NetRole::SourceEncoder),
            2 => Some(NetRole::TargetEncoder),
            3 => Some(NetRole::Classifier),
            4 => Some(NetRole::Drift),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetRole::SourceEncoder => "Gs",
            NetRole::TargetEncoder => "Gt",
            NetRole::Classifier => "F",
            NetRole::Drift => "D",
        }
    }
}

#[derive(Debug)]
pub struct LoadedNet {
    pub net: MlpNet,
    pub role: NetRole,
    /// Present iff role == Drift: (t_steps, embedding spec).
    pub drift_header: Option<(usize, EmbedSpec)>,
}

pub fn save_net(
    path: &Path,
    role: NetRole,
    net: &MlpNet,
    drift_header: Option<(usize, EmbedSpec)>,
) -> Result<()> {
    if (role == NetRole::Drift) != drift_header.is_some() {
        return Err(DvdError::Contract(
            "drift header present iff role is D".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(role.tag());
    buf.push(u8::from(net.is_frozen()));
    if let Some((t, embed)) = drift_header {
        buf.extend_from_slice(&(t as u32).to_le_bytes());
        buf.push(embed.freqs);
    }
    buf.extend_from_slice(&(net.layers().len() as u16).to_le_bytes());
    for layer in net.layers() {
        buf.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        buf.push(layer.act.tag());
        for v in layer.weight.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Write via a temp sibling and rename, so a crashed run never leaves a
/// half-written file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: &str) -> Result<T> {
        Err(DvdError::Format {
            offset: self.pos as u64,
            msg: msg.to_string(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return self.fail("unexpected end of file");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn load_net(path: &Path, expected: NetRole) -> Result<LoadedNet> {
    let loaded = load_any_net(path)?;
    if loaded.role != expected {
        return Err(DvdError::Contract(format!(
            "checkpoint role mismatch: {} holds {}, expected {}",
            path.display(),
            loaded.role.name(),
            expected.name()
        )));
    }
    Ok(loaded)
}

pub fn load_any_net(path: &Path) -> Result<LoadedNet> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(DvdError::Format {
            offset: 0,
            msg: "bad magic, not a DVD1 checkpoint".into(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return r.fail(&format!("unsupported version {version}"));
    }
    let role_tag = r.u8()?;
    let role = NetRole::from_tag(role_tag)
        .ok_or_else(|| DvdError::Format {
            offset: (r.pos - 1) as u64,
            msg: format!("unknown role tag {role_tag}"),
        })?;
    let frozen = r.u8()? != 0;
    let drift_header = if role == NetRole::Drift {
        let t = r.u32()? as usize;
        let freqs = r.u8()?;
        Some((t, EmbedSpec { freqs }))
    } else {
        None
    };
    let layer_count = r.u16()? as usize;
    if layer_count == 0 {
        return r.fail("checkpoint holds zero layers");
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let act = Act::from_tag(r.u8()?).map_err(|_| DvdError::Format {
            offset: (r.pos - 1) as u64,
            msg: "unknown activation tag".into(),
        })?;
        let weight = Tensor2::from_vec(rows, cols, r.f32s(rows * cols)?)?;
        let bias = Tensor2::from_vec(1, cols, r.f32s(cols)?)?;
        layers.push(Layer { weight, bias, act });
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last layer");
    }
    let net = MlpNet::from_layers(layers, frozen)?;
    Ok(LoadedNet {
        net,
        role,
        drift_header,
    })
}

pub fn save_drift_model(path: &Path, model: &DriftModel) -> Result<()> {
    save_net(
        path,
        NetRole::Drift,
        model.net(),
        Some((model.t_steps(), model.embed_spec())),
    )
}

pub fn load_drift_model(path: &Path) -> Result<DriftModel> {
    let loaded = load_net(path, NetRole::Drift)?;
    let (t, embed) = loaded.drift_header.expect("drift header checked by role");
    DriftModel::from_parts(loaded.net, embed, t)
}
