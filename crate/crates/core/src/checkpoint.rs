//! Versioned plain-text checkpoints.
//!
//! ```text
//! mollify-checkpoint 1
//! kind flow
//! dim 2
//! spec {"family":"flow",...}
//! param layer0.scale.l0.weight 2 1 64
//! <row-major values>
//! buffer layer1.running_mean 1 2
//! <values>
//! end
//! ```
//!
//! Values are written in shortest round-trip exponent notation, so a
//! reload is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{Model, ModelError, ModelSpec};

pub const FORMAT_MAGIC: &str = "mollify-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("cannot rebuild model: {0}")]
    Model(#[from] ModelError),
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_values(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:e}").expect("string write");
    }
    out.push('\n');
}

/// Serializes `model` to the checkpoint text format.
pub fn to_string(model: &Model) -> String {
    let spec = model.spec();
    let mut out = String::new();
    writeln!(out, "{FORMAT_MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(out, "kind {}", spec.kind_tag()).unwrap();
    writeln!(out, "dim {}", spec.dim()).unwrap();
    writeln!(out, "spec {}", serde_json::to_string(&spec).expect("spec serializes")).unwrap();
    for p in model.params().iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
        writeln!(out, "param {} {} {}", p.name, shape.len(), shape.join(" ")).unwrap();
        write_values(&mut out, p.value.data());
    }
    if let Model::Flow(f) = model {
        for (name, values) in f.buffers() {
            writeln!(out, "buffer {} 1 {}", name, values.len()).unwrap();
            write_values(&mut out, &values);
        }
    }
    out.push_str("end\n");
    out
}

/// Writes the checkpoint atomically: a sibling temp file is written,
/// flushed and renamed over `path`.
pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let text = to_string(model);
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map_or("ckpt".into(), |n| n.to_string_lossy().into_owned());
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(text.as_bytes()).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    from_str(&text)
}

pub fn from_str(text: &str) -> Result<Model, CheckpointError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| CheckpointError::Format {
            line: 0,
            reason: format!("unexpected end of file, expected {what}"),
        })
    };
    let bad = |line: usize, reason: &str| CheckpointError::Format {
        line,
        reason: reason.to_string(),
    };

    let (n, header) = next("header")?;
    let version = header
        .strip_prefix(FORMAT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(n, "missing checkpoint header"))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (n, kind) = next("kind")?;
    let kind = kind.strip_prefix("kind ").ok_or_else(|| bad(n, "expected `kind`"))?.to_string();
    let (n, dim) = next("dim")?;
    let dim: usize = dim
        .strip_prefix("dim ")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| bad(n, "expected `dim`"))?;
    let (n, spec) = next("spec")?;
    let spec: ModelSpec = spec
        .strip_prefix("spec ")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| bad(n, "expected a JSON `spec`"))?;
    if spec.kind_tag() != kind || spec.dim() != dim {
        return Err(bad(n, "spec disagrees with kind/dim header"));
    }
    // The architecture is rebuilt, then every value is overwritten.
    let mut model = Model::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut seen = 0;
    loop {
        let (n, line) = next("a block or `end`")?;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        let name = parts.next().ok_or_else(|| bad(n, "missing block name"))?.to_string();
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad(n, "missing rank"))?;
        let shape: Vec<usize> = parts.map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad(n, "bad shape"))?;
        if shape.len() != rank {
            return Err(bad(n, "rank does not match shape"));
        }
        let (vn, vline) = next("values")?;
        let values: Vec<f64> = if vline.is_empty() {
            Vec::new()
        } else {
            vline
                .split(' ')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(vn, "bad value"))?
        };
        if values.len() != shape.iter().product::<usize>() {
            return Err(bad(vn, "value count does not match shape"));
        }
        match tag {
            "param" => {
                let p = model
                    .params_mut()
                    .by_name_mut(&name)
                    .ok_or_else(|| bad(n, &format!("unknown parameter `{name}`")))?;
                if p.value.shape() != shape.as_slice() {
                    return Err(bad(n, &format!("shape mismatch for `{name}`")));
                }
                p.value = Tensor::new(shape, values).map_err(|e| bad(n, &e.to_string()))?;
                seen += 1;
            }
            "buffer" => match &mut model {
                Model::Flow(f) => f.set_buffer(&name, &values).map_err(|e| bad(n, &e.to_string()))?,
                Model::Vae(_) => return Err(bad(n, "VAE checkpoints have no buffers")),
            },
            _ => return Err(bad(n, &format!("unknown block `{tag}`"))),
        }
    }
    if seen != model.params().len() {
        return Err(bad(0, "checkpoint is missing parameters"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{FlowKind, FlowSpec};
    use crate::vae::{SampleMode, VaeSpec};

    fn perturbed(spec: ModelSpec) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Model::new(&spec, &mut rng).unwrap();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += ((i * 31 + j * 7) as f64).sin() * 1e-3 + 1.0 / 3.0 * 1e-7;
            }
        }
        m
    }

    #[test]
    fn flow_roundtrip_is_bitwise() {
        let m = perturbed(ModelSpec::Flow(FlowSpec {
            kind: FlowKind::Maf,
            dim: 3,
            layers: 2,
            hidden: vec![5],
            batchnorm: true,
        }));
        let text = to_string(&m);
        let back = from_str(&text).unwrap();
        assert_eq!(m.params(), back.params());
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn vae_roundtrip_is_bitwise() {
        let m = perturbed(ModelSpec::Vae(VaeSpec {
            dim: 2,
            latent: 1,
            hidden: vec![4],
            sample_mode: SampleMode::Mean,
        }));
        let back = from_str(&to_string(&m)).unwrap();
        assert_eq!(m.params(), back.params());
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        assert!(matches!(from_str("mollify-checkpoint 7\n"), Err(CheckpointError::Version(7))));
        let m = perturbed(ModelSpec::Flow(FlowSpec {
            kind: FlowKind::RealNvp,
            dim: 2,
            layers: 1,
            hidden: vec![3],
            batchnorm: false,
        }));
        let text = to_string(&m);
        let cut = &text[..text.len() / 2];
        assert!(matches!(from_str(cut), Err(CheckpointError::Format { .. })));
    }
}
