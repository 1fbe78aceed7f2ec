//! Model checkpoints.
//!
//! A checkpoint is a UTF-8 header followed by raw little-endian `f64` data:
//!
//! ```text
//! facerep-checkpoint 1
//! config input_size 32
//! config in_channels 1
//! config stages 8|16|24|32|32
//! ...
//! param conv11.weight 8 1 3 3
//! ...
//! end
//! <parameter values, in header order>
//! ```
//!
//! Stage widths are comma-separated within a stage and `|`-separated between
//! stages. Floats use Rust's shortest round-trip formatting, so writing a
//! loaded checkpoint reproduces the original bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Init, Model, NetConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "facerep-checkpoint 1";

fn config_lines(c: &NetConfig) -> Vec<(String, String)> {
    let stages = c
        .stages
        .iter()
        .map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("|");
    vec![
        ("input_size".into(), c.input_size.to_string()),
        ("in_channels".into(), c.in_channels.to_string()),
        ("stages".into(), stages),
        ("proj_width".into(), c.proj_width.to_string()),
        ("num_filters".into(), c.num_filters.to_string()),
        ("hc_resolution".into(), c.hc_resolution.to_string()),
        ("d_percent".into(), c.d_percent.to_string()),
        ("num_classes".into(), c.num_classes.to_string()),
        ("init".into(), c.init.to_string()),
    ]
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut header = String::from(MAGIC);
    header.push('\n');
    for (k, v) in config_lines(model.config()) {
        header.push_str(&format!("config {} {}\n", k, v));
    }
    for (name, t) in model.params() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        header.push_str(&format!("param {} {}\n", name, dims.join(" ")));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for (_, t) in model.params() {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    Ok(fs::write(path, to_bytes(model))?)
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(format!("checkpoint: {}", msg.into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("header is not terminated by `end`"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| parse_err("header is not UTF-8"))?;
        pos += end + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(parse_err("missing magic line"));
    }
    let mut cfg: Vec<(String, String)> = Vec::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for line in &lines[1..] {
        let mut toks = line.split(' ');
        match toks.next() {
            Some("config") => {
                let key = toks.next().ok_or_else(|| parse_err("config line without key"))?;
                cfg.push((key.to_string(), toks.collect::<Vec<_>>().join(" ")));
            }
            Some("param") => {
                let name = toks.next().ok_or_else(|| parse_err("param line without name"))?;
                let dims = toks
                    .map(|t| t.parse::<usize>().map_err(|_| parse_err(format!("bad dimension in `{}`", line))))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name.to_string(), dims));
            }
            _ => return Err(parse_err(format!("unexpected header line `{}`", line))),
        }
    }
    let get = |k: &str| -> Result<&str> {
        cfg.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(format!("missing config `{}`", k)))
    };
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| parse_err(format!("bad `{}`", k))) };
    let stages = get("stages")?
        .split('|')
        .map(|s| {
            s.split(',')
                .map(|w| w.parse::<usize>().map_err(|_| parse_err("bad stage width")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        input_size: num("input_size")?,
        in_channels: num("in_channels")?,
        stages,
        proj_width: num("proj_width")?,
        num_filters: num("num_filters")?,
        hc_resolution: num("hc_resolution")?,
        d_percent: get("d_percent")?.parse().map_err(|_| parse_err("bad `d_percent`"))?,
        num_classes: num("num_classes")?,
        init: get("init")?.parse::<Init>()?,
    };
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let chunk = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| parse_err(format!("data for `{}` is truncated", name)))?;
        pos += 8 * n;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push((name, Tensor::new(shape, values)?));
    }
    if pos != bytes.len() {
        return Err(parse_err(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Model::from_params(config, params)
}
