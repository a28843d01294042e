//! Plain-text parameter checkpoints.
//!
//! ```text
//! graphsc-checkpoint 1
//! config input_dim=7 num_layers=3 hidden_dim=32 embed_dim=128 num_factors=4 abs_dim=128 g2_out_dim=128
//! tensor gin.0.mlp.0.weight 7x32
//! <row-major values separated by spaces>
//! ...
//! end
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so a save/load round trip is exact.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "graphsc-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

pub fn write_checkpoint<W: Write>(mut out: W, params: &ModelParams) -> Result<()> {
    let c = &params.config;
    writeln!(out, "{MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(
        out,
        "config input_dim={} num_layers={} hidden_dim={} embed_dim={} num_factors={} abs_dim={} g2_out_dim={}",
        c.input_dim, c.num_layers, c.hidden_dim, c.embed_dim, c.num_factors, c.abs_dim, c.g2_out_dim
    )?;
    for (name, t) in params.tensors() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "tensor {name} {}", shape.join("x"))?;
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", values.join(" "))?;
    }
    writeln!(out, "end")?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<ModelParams> {
    let mut lines = BufReader::new(input).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Argument(format!("checkpoint truncated before {what}")))
    };

    let header = next("header")?;
    let version = match header.split_once(' ') {
        Some((MAGIC, v)) => v.trim().to_string(),
        _ => {
            return Err(Error::Argument(format!(
                "not a checkpoint file (header `{header}`)"
            )))
        }
    };
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION.into(),
            found: version,
        });
    }

    let config = parse_config(&next("config")?)?;
    let mut params = super::xavier_init(&config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let head = next(name)?;
        let mut parts = head.split_whitespace();
        let (Some("tensor"), Some(found), Some(shape), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Argument(format!("bad tensor header `{head}`")));
        };
        if found != name {
            return Err(Error::Argument(format!(
                "expected tensor {name}, found {found}"
            )));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Argument(format!("bad shape `{shape}`")))
            })
            .collect::<Result<_>>()?;
        if shape != slot.shape() {
            return Err(Error::dim("checkpoint tensor", slot.shape(), &shape));
        }
        let body = next(name)?;
        let data: Vec<f64> = body
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Argument(format!("bad value `{v}` in {name}")))
            })
            .collect::<Result<_>>()?;
        *slot = Tensor::new(shape, data)?;
    }
    if next("end marker")?.trim() != "end" {
        return Err(Error::Argument("checkpoint has trailing tensors".into()));
    }
    Ok(params)
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("config") {
        return Err(Error::Argument(format!("bad config line `{line}`")));
    }
    let mut c = ModelConfig::new(0);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("bad config entry `{kv}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::Argument(format!("bad config value `{kv}`")))?;
        let slot = match k {
            "input_dim" => &mut c.input_dim,
            "num_layers" => &mut c.num_layers,
            "hidden_dim" => &mut c.hidden_dim,
            "embed_dim" => &mut c.embed_dim,
            "num_factors" => &mut c.num_factors,
            "abs_dim" => &mut c.abs_dim,
            "g2_out_dim" => &mut c.g2_out_dim,
            other => return Err(Error::UnknownKey(other.into())),
        };
        *slot = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(file)
}
