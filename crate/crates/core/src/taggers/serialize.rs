//! Versioned binary format for tagger parameters.
//!
//! Layout: magic `CSP1`, one model-type byte (0 = iid, 1 = crf, 2 = ar),
//! the two dimensions (`obs_vocab_size`, `V`) as u64 little-endian, then the
//! parameter blocks in declaration order as row-major f64 little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::taggers::{ArParams, CrfParams, IidParams, ModelType, TaggerParams};

pub const PARAMS_MAGIC: &[u8; 4] = b"CSP1";

fn type_byte(t: ModelType) -> u8 {
    match t {
        ModelType::Iid => 0,
        ModelType::Crf => 1,
        ModelType::Ar => 2,
    }
}

fn write_floats<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_params(params: &TaggerParams, path: &Path) -> Result<()> {
    let bytes = params_to_bytes(params);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<TaggerParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes)
}

pub fn params_to_bytes(params: &TaggerParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(type_byte(params.model_type()));
    let obs = params.obs_vocab_size() as u64;
    let v = params.label_dim() as u64;
    out.extend_from_slice(&obs.to_le_bytes());
    out.extend_from_slice(&v.to_le_bytes());
    match params {
        TaggerParams::Iid(p) => {
            write_floats(&mut out, p.emission.data()).unwrap();
            write_floats(&mut out, &p.bias).unwrap();
        }
        TaggerParams::Crf(p) => {
            write_floats(&mut out, p.emission.data()).unwrap();
            write_floats(&mut out, &p.bias).unwrap();
            write_floats(&mut out, p.transitions.data()).unwrap();
            write_floats(&mut out, &p.start).unwrap();
            write_floats(&mut out, &p.stop).unwrap();
        }
        TaggerParams::Ar(p) => {
            write_floats(&mut out, p.emission.data()).unwrap();
            write_floats(&mut out, p.prev_label.data()).unwrap();
            write_floats(&mut out, &p.bias).unwrap();
        }
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<TaggerParams> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("params file too short".into()))?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format(format!(
            "bad params magic {magic:?}, expected {PARAMS_MAGIC:?}"
        )));
    }
    let mut tb = [0u8; 1];
    r.read_exact(&mut tb)
        .map_err(|_| Error::Format("missing model-type byte".into()))?;
    let mut dims = [0u8; 16];
    r.read_exact(&mut dims)
        .map_err(|_| Error::Format("missing dimensions".into()))?;
    let obs = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
    let v = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
    if v < 2 {
        return Err(Error::Format(format!("label dimension {v} < 2")));
    }

    fn take_mat(r: &mut &[u8], rows: usize, cols: usize) -> Result<Mat> {
        let data = read_floats(r, rows * cols)
            .map_err(|_| Error::Format("truncated parameter block".into()))?;
        Ok(Mat::from_vec(rows, cols, data))
    }
    fn take_vec(r: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
        read_floats(r, n).map_err(|_| Error::Format(format!("truncated {what} block")))
    }

    let params = match tb[0] {
        0 => {
            let emission = take_mat(&mut r, obs, v)?;
            let bias = take_vec(&mut r, v, "bias")?;
            TaggerParams::Iid(IidParams { emission, bias })
        }
        1 => {
            let emission = take_mat(&mut r, obs, v)?;
            let bias = take_vec(&mut r, v, "bias")?;
            let transitions = take_mat(&mut r, v, v)?;
            let start = take_vec(&mut r, v, "start")?;
            let stop = take_vec(&mut r, v, "stop")?;
            TaggerParams::Crf(CrfParams {
                emission,
                bias,
                transitions,
                start,
                stop,
            })
        }
        2 => {
            let emission = take_mat(&mut r, obs, v)?;
            let prev_label = take_mat(&mut r, v + 1, v)?;
            let bias = take_vec(&mut r, v, "bias")?;
            TaggerParams::Ar(ArParams {
                emission,
                prev_label,
                bias,
            })
        }
        other => return Err(Error::Format(format!("unknown model-type byte {other}"))),
    };
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameter blocks",
            r.len()
        )));
    }
    let finite = match &params {
        TaggerParams::Iid(p) => p.is_finite(),
        TaggerParams::Crf(p) => p.is_finite(),
        TaggerParams::Ar(p) => p.is_finite(),
    };
    if !finite {
        return Err(Error::Format("non-finite parameter entries".into()));
    }
    Ok(params)
}
