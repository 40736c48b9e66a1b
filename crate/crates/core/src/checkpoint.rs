//! Model checkpoints.
//!
//! A checkpoint is a text header followed by raw parameter data:
//!
//! ```text
//! ftseg-checkpoint 1
//! variant = attn_unet_multi_input
//! depth = 4
//! base_channels = 16
//! deep_supervision = true
//! input_channels = 1
//! seed = 0
//! param enc0.conv1.weight 16,1,3,3
//! ...
//! end
//! <little-endian f64 values of every parameter, in header order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "ftseg-checkpoint 1";

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    for (k, v) in model.config().to_pairs() {
        writeln!(out, "{k} = {v}").unwrap();
    }
    for p in model.params() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        writeln!(out, "param {} {}", p.name, dims.join(",")).unwrap();
    }
    writeln!(out, "end").unwrap();
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Model<T>> {
    let bad = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header ended unexpectedly".into()))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))
    };

    if next_line()? != MAGIC {
        return Err(bad("missing checkpoint magic line".into()));
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut declared: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad param line {line:?}")))?;
            let dims = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape in {line:?}")))?;
            declared.push((name.to_string(), dims));
        } else if let Some((k, v)) = line.split_once('=') {
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(bad(format!("unrecognised header line {line:?}")));
        }
    }
    let cfg = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut model = Model::<T>::new(cfg)?;
    if declared.len() != model.params().len() {
        return Err(bad(format!(
            "header lists {} parameters, configuration implies {}",
            declared.len(),
            model.params().len()
        )));
    }

    let mut body = &bytes[pos..];
    let mut values = Vec::with_capacity(declared.len());
    for ((name, dims), p) in declared.iter().zip(model.params()) {
        if *name != p.name || dims.as_slice() != p.value.shape() {
            return Err(bad(format!(
                "parameter {name} {dims:?} does not match expected {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let n: usize = dims.iter().product();
        if body.len() < 8 * n {
            return Err(bad(format!("data truncated in parameter {name}")));
        }
        let data = body[..8 * n]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        body = &body[8 * n..];
        values.push(Tensor::new(dims.clone(), data)?);
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes after parameter data", body.len())));
    }
    model.set_values(values)?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            variant: Variant::AttnUnetMultiInput,
            depth: 3,
            base_channels: 3,
            deep_supervision: true,
            input_channels: 2,
            seed: 11,
        };
        let model = Model::<f64>::new(cfg).unwrap();
        let bytes = to_bytes(&model);
        let back: Model<f64> = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in back.params().iter().zip(model.params()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_and_trailing_data_rejected() {
        let model = Model::<f64>::new(ModelConfig {
            depth: 2,
            base_channels: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let bytes = to_bytes(&model);
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f64>(&extra, Path::new("mem")).is_err());
        assert!(from_bytes::<f64>(b"nonsense\n", Path::new("mem")).is_err());
    }
}
