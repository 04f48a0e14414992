//! Text checkpoint format.
//!
//! ```text
//! mixcast-checkpoint v1
//! [config]
//! <TOML model config>
//! [meta]
//! key = value
//! [tensors]
//! tensor backbone.hidden.weight 64 13
//! <one row of values per line>
//! ```
//!
//! Values are written with shortest round-trip formatting, so loading a
//! saved model reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::{Graph, Model, ModelConfig, ModelError};

pub const CHECKPOINT_HEADER: &str = "mixcast-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad header)")]
    Header,
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A model plus free-form metadata (normalizer, training provenance).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

fn write_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "tensor {name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "[config]");
        out.push_str(&toml::to_string(self.model.config()).expect("config serializes"));
        let _ = writeln!(out, "[meta]");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "[tensors]");
        for (name, layer) in self.model.layers() {
            write_matrix(&mut out, &format!("{name}.weight"), &layer.weight);
            let bias = layer.bias.clone().insert_axis(ndarray::Axis(0));
            write_matrix(&mut out, &format!("{name}.bias"), &bias);
        }
        if let Some(g) = self.model.graph() {
            write_matrix(&mut out, "graph", g.normalized());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(CheckpointError::Header),
        }
        let expect_section = |l: Option<(usize, &str)>, name: &str| match l {
            Some((_, s)) if s.trim() == format!("[{name}]") => Ok(()),
            other => Err(CheckpointError::Syntax {
                line: other.map_or(0, |(i, _)| i + 1),
                msg: format!("expected [{name}]"),
            }),
        };
        expect_section(lines.next(), "config")?;
        let mut config_text = String::new();
        while let Some(&(_, l)) = lines.peek() {
            if l.trim() == "[meta]" {
                break;
            }
            config_text.push_str(l);
            config_text.push('\n');
            lines.next();
        }
        let config: ModelConfig =
            toml::from_str(&config_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
        expect_section(lines.next(), "meta")?;
        let mut meta = BTreeMap::new();
        while let Some(&(i, l)) = lines.peek() {
            if l.trim() == "[tensors]" {
                break;
            }
            let (k, v) = l.split_once(" = ").ok_or_else(|| CheckpointError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            meta.insert(k.to_string(), v.to_string());
            lines.next();
        }
        expect_section(lines.next(), "tensors")?;

        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        while let Some((i, l)) = lines.next() {
            if l.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            let syntax = |msg: &str| CheckpointError::Syntax {
                line: i + 1,
                msg: msg.to_string(),
            };
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(syntax("expected `tensor <name> <rows> <cols>`"));
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2].parse().map_err(|_| syntax("bad row count"))?;
            let cols: usize = parts[3].parse().map_err(|_| syntax("bad column count"))?;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (j, row) = lines.next().ok_or_else(|| CheckpointError::Tensor {
                    name: name.clone(),
                    msg: "truncated".into(),
                })?;
                let before = values.len();
                for v in row.split_whitespace() {
                    values.push(v.parse::<f64>().map_err(|_| CheckpointError::Syntax {
                        line: j + 1,
                        msg: format!("bad number `{v}`"),
                    })?);
                }
                if values.len() - before != cols {
                    return Err(CheckpointError::Syntax {
                        line: j + 1,
                        msg: format!("expected {cols} values"),
                    });
                }
            }
            let m = Array2::from_shape_vec((rows, cols), values).expect("counted");
            tensors.insert(name, m);
        }

        let graph = tensors
            .remove("graph")
            .map(|norm| Graph { norm });
        let mut model = Model::new(config, graph, 0)?;
        for (name, layer) in model.layers_mut() {
            let w = tensors
                .remove(&format!("{name}.weight"))
                .ok_or_else(|| CheckpointError::Tensor {
                    name: name.to_string(),
                    msg: "missing weight".into(),
                })?;
            let b = tensors
                .remove(&format!("{name}.bias"))
                .ok_or_else(|| CheckpointError::Tensor {
                    name: name.to_string(),
                    msg: "missing bias".into(),
                })?;
            if w.dim() != layer.weight.dim() || b.dim() != (1, layer.bias.len()) {
                return Err(CheckpointError::Tensor {
                    name: name.to_string(),
                    msg: format!(
                        "shape {:?}/{:?} does not match config {:?}/{}",
                        w.dim(),
                        b.dim(),
                        layer.weight.dim(),
                        layer.bias.len()
                    ),
                });
            }
            layer.weight = w;
            layer.bias = Array1::from_iter(b.iter().copied());
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Tensor {
                name: extra.clone(),
                msg: "not part of this model".into(),
            });
        }
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
