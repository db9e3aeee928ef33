//! Checkpoint files: one text header line followed by little-endian `f32`
//! parameters in declared order.
//!
//! ```text
//! cidir-ckpt version=1 main=3,256,256,256,3 harmonizer=1,128,64,32,4 omega0=30 shared=1 params=N
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Architecture, Model, NetError};
use crate::autodiff::{Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "cidir-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

fn widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_widths(s: &str) -> Result<Vec<usize>, NetError> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| NetError::Checkpoint(format!("bad widths {s:?}: {e}")))
}

fn header(arch: &Architecture, count: usize) -> String {
    format!(
        "{CHECKPOINT_FORMAT} version={CHECKPOINT_VERSION} main={} harmonizer={} omega0={} shared={} params={count}\n",
        widths(&arch.main),
        arch.harmonizer.as_deref().map(widths).unwrap_or_else(|| "none".into()),
        arch.omega0,
        u8::from(arch.shared_activation),
    )
}

/// Serialize to any writer.
pub fn write_checkpoint<T: Real, W: Write>(model: &Model<T>, mut w: W) -> Result<(), NetError> {
    let count = model.param_count();
    w.write_all(header(&model.arch, count).as_bytes())?;
    let mut bytes = Vec::with_capacity(count * 4);
    for t in model.params() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<(), NetError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(Architecture, usize), NetError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(CHECKPOINT_FORMAT) {
        return Err(NetError::Checkpoint(format!("not a {CHECKPOINT_FORMAT} file")));
    }
    let (mut version, mut main, mut harm, mut omega0, mut shared, mut count) = (None, None, None, None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| NetError::Checkpoint(format!("malformed header field {kv:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| NetError::Checkpoint(format!("{k}: {e}")));
        match k {
            "version" => version = Some(num(v)?),
            "main" => main = Some(parse_widths(v)?),
            "harmonizer" => harm = Some(if v == "none" { None } else { Some(parse_widths(v)?) }),
            "omega0" => {
                omega0 = Some(
                    v.parse::<f64>()
                        .map_err(|e| NetError::Checkpoint(format!("omega0: {e}")))?,
                )
            }
            "shared" => shared = Some(num(v)? == 1),
            "params" => count = Some(num(v)?),
            _ => return Err(NetError::Checkpoint(format!("unknown header field {k:?}"))),
        }
    }
    let missing = |f: &str| NetError::Checkpoint(format!("header lacks {f}"));
    let version = version.ok_or_else(|| missing("version"))?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let arch = Architecture {
        main: main.ok_or_else(|| missing("main"))?,
        harmonizer: harm.ok_or_else(|| missing("harmonizer"))?,
        omega0: omega0.ok_or_else(|| missing("omega0"))?,
        shared_activation: shared.ok_or_else(|| missing("shared"))?,
    };
    if !arch.shared_activation {
        return Err(NetError::Checkpoint("per-layer activation parameters are not supported".into()));
    }
    let valid_ends = |w: &[usize], i: usize, o: usize| w.len() >= 2 && w[0] == i && w[w.len() - 1] == o;
    if !valid_ends(&arch.main, 3, 3) || arch.harmonizer.as_deref().is_some_and(|h| !valid_ends(h, 1, 4)) {
        return Err(NetError::Checkpoint("invalid layer widths".into()));
    }
    let count = count.ok_or_else(|| missing("params"))?;
    if count != arch.param_count() {
        return Err(NetError::Checkpoint(format!(
            "header declares {count} parameters, architecture has {}",
            arch.param_count()
        )));
    }
    Ok((arch, count))
}

/// Deserialize from any reader.
pub fn read_checkpoint<T: Real, R: Read>(r: R) -> Result<Model<T>, NetError> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let (arch, count) = parse_header(line.trim_end())?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(NetError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            count * 4,
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    let mut model = Model::<T>::zeros(arch);
    for t in model.params_mut() {
        let shape = t.shape().to_vec();
        let data: Vec<T> = values.by_ref().take(t.numel()).collect();
        *t = Tensor::new(shape, data)?;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>, NetError> {
    read_checkpoint(fs::File::open(path)?)
}
