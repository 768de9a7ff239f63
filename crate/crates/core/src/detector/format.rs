//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "DAEDMODL" | version u32 | id (u32 len + utf8) | variant u8
//! num_classes u32 | grid_s u32 | stride u32
//! anchors: u32 count + (f64, f64) pairs
//! layers: u32 count + per layer (in u32, out u32, kernel u32, stride u32,
//!                                act u8, leaky slope f64)
//! weights: per layer, kernel u64 len + f64 blob, bias u64 len + f64 blob
//! ```
//!
//! Round trips are bit-exact.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

use super::{Activation, AnchorGrid, ConvSpec, DetectorModel, LayerWeights, Variant};

const MAGIC: &[u8; 8] = b"DAEDMODL";
const VERSION: u32 = 1;

pub fn save_model(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DetectorModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes).map_err(|detail| Error::Format { path: path.display().to_string(), detail })
}

fn encode(model: &DetectorModel) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id = model.id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(model.variant.tag());
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid.grid_s as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid.stride as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid.anchors.len() as u32).to_le_bytes());
    for &(pw, ph) in &model.grid.anchors {
        out.extend_from_slice(&pw.to_le_bytes());
        out.extend_from_slice(&ph.to_le_bytes());
    }
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        out.extend_from_slice(&(l.in_ch as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_ch as u32).to_le_bytes());
        out.extend_from_slice(&(l.kernel as u32).to_le_bytes());
        out.extend_from_slice(&(l.stride as u32).to_le_bytes());
        let (act, slope) = match l.activation {
            Activation::None => (0u8, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(s) => (2, s),
        };
        out.push(act);
        out.extend_from_slice(&slope.to_le_bytes());
    }
    for w in &model.weights {
        write_blob(&mut out, w.kernel.data());
        write_blob(&mut out, w.bias.data());
    }
    out
}

fn write_blob(out: &mut Vec<u8>, data: &[f64]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.write_all(&v.to_le_bytes()).expect("vec write");
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<DetectorModel, String> {
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    read_exact(&mut c, &mut magic)?;
    if &magic != MAGIC {
        return Err("bad magic (not a model file)".into());
    }
    let version = read_u32(&mut c)?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let id_len = read_u32(&mut c)? as usize;
    if id_len > 4096 {
        return Err("unreasonable id length".into());
    }
    let mut id_bytes = vec![0u8; id_len];
    read_exact(&mut c, &mut id_bytes)?;
    let id = String::from_utf8(id_bytes).map_err(|_| "id is not utf-8".to_string())?;
    let variant = Variant::from_tag(read_u8(&mut c)?).ok_or("unknown variant tag")?;
    let num_classes = read_u32(&mut c)? as usize;
    let grid_s = read_u32(&mut c)? as usize;
    let stride = read_u32(&mut c)? as usize;
    let n_anchors = read_u32(&mut c)? as usize;
    if n_anchors == 0 || n_anchors > 64 {
        return Err("unreasonable anchor count".into());
    }
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        let pw = read_f64(&mut c)?;
        let ph = read_f64(&mut c)?;
        if pw <= 0.0 || ph <= 0.0 {
            return Err("anchor priors must be positive".into());
        }
        anchors.push((pw, ph));
    }
    let n_layers = read_u32(&mut c)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err("unreasonable layer count".into());
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_ch = read_u32(&mut c)? as usize;
        let out_ch = read_u32(&mut c)? as usize;
        let kernel = read_u32(&mut c)? as usize;
        let stride = read_u32(&mut c)? as usize;
        let act = read_u8(&mut c)?;
        let slope = read_f64(&mut c)?;
        let activation = match act {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu(slope),
            other => return Err(format!("unknown activation tag {other}")),
        };
        layers.push(ConvSpec { in_ch, out_ch, kernel, stride, activation });
    }
    let mut weights = Vec::with_capacity(n_layers);
    for l in &layers {
        let kernel = read_blob(&mut c)?;
        let expect = l.out_ch * l.in_ch * l.kernel * l.kernel;
        if kernel.len() != expect {
            return Err(format!("kernel blob length {} != expected {expect}", kernel.len()));
        }
        let bias = read_blob(&mut c)?;
        if bias.len() != l.out_ch {
            return Err(format!("bias blob length {} != expected {}", bias.len(), l.out_ch));
        }
        weights.push(LayerWeights {
            kernel: Tensor::new(vec![l.out_ch, l.in_ch, l.kernel, l.kernel], kernel),
            bias: Tensor::new(vec![l.out_ch], bias),
        });
    }
    if c.position() as usize != bytes.len() {
        return Err("trailing bytes after weight blobs".into());
    }

    let model = DetectorModel {
        id,
        variant,
        layers,
        weights,
        grid: AnchorGrid { grid_s, stride, anchors },
        num_classes,
    };
    // the architecture must actually produce the head shape it claims
    let head = model.grid.num_anchors() * (5 + num_classes);
    let last = model.layers.last().unwrap();
    if last.out_ch != head {
        return Err(format!("head channels {} != anchors*(5+K) = {head}", last.out_ch));
    }
    Ok(model)
}

fn read_exact(c: &mut Cursor<&[u8]>, buf: &mut [u8]) -> std::result::Result<(), String> {
    c.read_exact(buf).map_err(|_| "truncated file".to_string())
}

fn read_u8(c: &mut Cursor<&[u8]>) -> std::result::Result<u8, String> {
    let mut b = [0u8; 1];
    read_exact(c, &mut b)?;
    Ok(b[0])
}

fn read_u32(c: &mut Cursor<&[u8]>) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(c, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(c: &mut Cursor<&[u8]>) -> std::result::Result<f64, String> {
    let mut b = [0u8; 8];
    read_exact(c, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_blob(c: &mut Cursor<&[u8]>) -> std::result::Result<Vec<f64>, String> {
    let mut b = [0u8; 8];
    read_exact(c, &mut b)?;
    let len = u64::from_le_bytes(b) as usize;
    if len > 100_000_000 {
        return Err("unreasonable blob length".into());
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(c)?);
    }
    Ok(out)
}
