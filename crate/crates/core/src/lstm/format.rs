//! Binary model and mesh files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic     4 bytes  "NEAC"
//! version   u16
//! arch      u8       1 = I, 2 = II, 3 = III
//! T         u16      window length
//! H         u16      horizon (s)
//! mesh      36 bytes input flags, m1 row-major, m2; LSB-first bit order
//! -- model files only --
//! seed      u64      weight initialization seed
//! n_params  u32
//! params    f64 x n  M1 layer(s), then the M2 layer; per layer the cells of
//!                    t = 0..T; per cell the gates g, i, f, o, each as w
//!                    (row-major), u (row-major), bias; then the combiner
//! inputs    u8       0 = absent, 1 = present, followed by:
//!             n_channels u16, channel names, target name,
//!             n_ranges u16, per range: name, min f64, max f64
//!             (names are u16 length + UTF-8)
//! -- both --
//! crc32     u32      CRC-32 of every preceding byte
//! ```

use crate::flightdata::{ChannelRange, NormRanges};

use super::{Arch, LstmError, Mesh, Network, MESH_BYTES};

pub const MAGIC: &[u8; 4] = b"NEAC";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 1 + 2 + 2;

/// How a network's inputs were built: channel order, target and the
/// normalization ranges computed on the training flights.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    pub channels: Vec<String>,
    pub target: String,
    pub ranges: NormRanges,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_header(out: &mut Vec<u8>, arch: Arch, window_len: usize, horizon: usize, mesh: &Mesh) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(arch.id());
    out.extend_from_slice(&(window_len as u16).to_le_bytes());
    out.extend_from_slice(&(horizon as u16).to_le_bytes());
    out.extend_from_slice(&mesh.to_bits());
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn serialize_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + MESH_BYTES + 16 + net.params().len() * 8);
    put_header(&mut out, net.arch(), net.window_len(), net.horizon(), net.mesh());
    out.extend_from_slice(&net.seed().to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    match &net.inputs {
        None => out.push(0),
        Some(spec) => {
            out.push(1);
            out.extend_from_slice(&(spec.channels.len() as u16).to_le_bytes());
            for c in &spec.channels {
                put_str(&mut out, c);
            }
            put_str(&mut out, &spec.target);
            out.extend_from_slice(&(spec.ranges.ranges.len() as u16).to_le_bytes());
            for r in &spec.ranges.ranges {
                put_str(&mut out, &r.name);
                out.extend_from_slice(&r.min.to_le_bytes());
                out.extend_from_slice(&r.max.to_le_bytes());
            }
        }
    }
    finish(out)
}

/// Mesh-only file: the model header and bitmaps followed by the CRC.
pub fn serialize_mesh(mesh: &Mesh, arch: Arch, horizon: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + MESH_BYTES + 4);
    put_header(&mut out, arch, arch.window_len(), horizon, mesh);
    finish(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LstmError> {
        let end = self.pos.checked_add(n).ok_or(LstmError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(LstmError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], LstmError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, LstmError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, LstmError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, LstmError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, LstmError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, LstmError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, LstmError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LstmError::InvalidHeader("name is not UTF-8".into()))
    }
}

struct Header {
    arch: Arch,
    horizon: usize,
    mesh: Mesh,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, LstmError> {
    if r.buf.len() < MAGIC.len() {
        return Err(LstmError::TruncatedFile);
    }
    if r.take(4)? != MAGIC {
        return Err(LstmError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(LstmError::VersionMismatch(version));
    }
    let arch_id = r.u8()?;
    let arch = Arch::from_id(arch_id).ok_or_else(|| LstmError::InvalidHeader(format!("unknown arch id {arch_id}")))?;
    let t = r.u16()? as usize;
    if t != arch.window_len() {
        return Err(LstmError::InvalidHeader(format!("window length {t} does not match architecture {arch}")));
    }
    let horizon = r.u16()? as usize;
    let mesh = Mesh::from_bits(r.take(MESH_BYTES)?)?;
    if !mesh.is_valid() {
        return Err(LstmError::InvalidMesh("m1 edge without its input or hidden mark".into()));
    }
    Ok(Header { arch, horizon, mesh })
}

fn check_crc(r: &mut Reader<'_>) -> Result<(), LstmError> {
    let body_end = r.pos;
    let stored = r.u32()?;
    if crc32fast::hash(&r.buf[..body_end]) != stored {
        return Err(LstmError::ChecksumMismatch);
    }
    if r.pos != r.buf.len() {
        return Err(LstmError::InvalidHeader(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(())
}

pub fn deserialize_network(bytes: &[u8]) -> Result<Network, LstmError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let mut net = Network::zeros(h.arch, h.mesh, h.horizon, seed);
    if n != net.params().len() {
        return Err(LstmError::DimensionMismatch { expected: net.params().len(), found: n });
    }
    let raw = r.take(n * 8)?;
    for (p, chunk) in net.params_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    net.inputs = match r.u8()? {
        0 => None,
        1 => {
            let nc = r.u16()? as usize;
            let channels = (0..nc).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
            let target = r.string()?;
            let nr = r.u16()? as usize;
            let mut ranges = Vec::with_capacity(nr);
            for _ in 0..nr {
                let name = r.string()?;
                let min = r.f64()?;
                let max = r.f64()?;
                ranges.push(ChannelRange { name, min, max });
            }
            Some(InputSpec { channels, target, ranges: NormRanges { ranges } })
        }
        other => return Err(LstmError::InvalidHeader(format!("bad input section flag {other}"))),
    };
    check_crc(&mut r)?;
    // stored files never carry values in masked slots, but a hand-edited one might
    net.enforce_mask();
    Ok(net)
}

/// Reads a mesh-only file, returning the mesh with its architecture and horizon.
pub fn deserialize_mesh(bytes: &[u8]) -> Result<(Mesh, Arch, usize), LstmError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    check_crc(&mut r)?;
    Ok((h.mesh, h.arch, h.horizon))
}
