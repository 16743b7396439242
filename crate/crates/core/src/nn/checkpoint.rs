//! Versioned binary serialization of a network: spec descriptor followed by
//! the flat parameter vector, all little-endian.
//!
//! ```text
//! magic   b"PBNN"
//! version u32
//! layers  u32
//! widths  u64 × (layers + 1)
//! per layer: activation u8, dropout f64
//! params  u64 count, f64 × count
//! ```

use std::io::{self, Read, Write};

use super::{Activation, DenseNetSpec, ParameterSet};
use crate::binio::*;
use crate::error::{Error, Result};

pub const NET_MAGIC: &[u8; 4] = b"PBNN";
pub const NET_VERSION: u32 = 1;
const MAX_LAYERS: u32 = 1024;
const MAX_PARAMS: usize = 1 << 31;

pub fn write_net(w: &mut impl Write, spec: &DenseNetSpec, params: &ParameterSet) -> io::Result<()> {
    w.write_all(NET_MAGIC)?;
    put_u32(w, NET_VERSION)?;
    put_u32(w, spec.layers() as u32)?;
    for &width in spec.widths() {
        put_u64(w, width as u64)?;
    }
    for l in 0..spec.layers() {
        put_u8(w, spec.activation(l).code())?;
        put_f64(w, spec.dropout(l))?;
    }
    put_f64s(w, params.values())
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("<network checkpoint>", detail)
}

pub fn read_net(r: &mut impl Read) -> Result<(DenseNetSpec, ParameterSet)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(r)?;
    if version != NET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let layers = get_u32(r)?;
    if layers == 0 || layers > MAX_LAYERS {
        return Err(bad(format!("implausible layer count {layers}")));
    }
    let widths = (0..=layers)
        .map(|_| get_u64(r).map(|v| v as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let mut activations = Vec::new();
    let mut dropout = Vec::new();
    for _ in 0..layers {
        let code = get_u8(r)?;
        activations.push(Activation::from_code(code).ok_or_else(|| bad(format!("activation {code}")))?);
        dropout.push(get_f64(r)?);
    }
    let spec = DenseNetSpec::new(widths, activations, dropout)?;
    let values = get_f64s(r, MAX_PARAMS)?;
    let params = ParameterSet::from_values(&spec, values)?;
    Ok((spec, params))
}
