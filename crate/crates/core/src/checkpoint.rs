//! Textual checkpoint format for parameters and batchnorm state.
//!
//! Values are written as the hex of their `f64` bit pattern, so a round trip
//! is bit-exact regardless of printing precision, signed zeros or denormals.
//!
//! ```text
//! adrnet-checkpoint v1
//! section <name>
//! bnmeta <momentum-bits> <eps-bits>
//! param <pname> <ndim> <d0> <d1> ...
//! <entry bits, space separated>
//! bn <layer-index> <width>
//! <running-mean bits>
//! <running-var bits>
//! end-section
//! end
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BatchNormState, BnLayerState, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "adrnet-checkpoint v1";

#[derive(Clone, Debug)]
pub struct CheckpointSection {
    pub name: String,
    pub params: ParamStore,
    pub bn: BatchNormState,
}

fn write_bits_line(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let line: Vec<String> = data.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
    writeln!(w, "{}", line.join(" "))
}

fn parse_bits_line(line: &str, expect: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|tok| {
            u64::from_str_radix(tok, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::CheckpointFormat(format!("bad hex value {tok:?}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expect {
        return Err(Error::CheckpointFormat(format!(
            "expected {expect} values, got {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn write_checkpoint(
    mut w: impl Write,
    sections: &[(&str, &ParamStore, &BatchNormState)],
) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (name, params, bn) in sections {
        writeln!(w, "section {name}")?;
        writeln!(
            w,
            "bnmeta {:016x} {:016x}",
            bn.momentum.to_bits(),
            bn.eps.to_bits()
        )?;
        for (pname, tensor) in params.iter() {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "param {pname} {} {}", tensor.shape().len(), dims.join(" "))?;
            write_bits_line(&mut w, tensor.data())?;
        }
        for (idx, layer) in bn.iter() {
            writeln!(w, "bn {idx} {}", layer.running_mean.numel())?;
            write_bits_line(&mut w, layer.running_mean.data())?;
            write_bits_line(&mut w, layer.running_var.data())?;
        }
        writeln!(w, "end-section")?;
    }
    writeln!(w, "end")
}

pub fn read_checkpoint(r: impl BufRead) -> Result<Vec<CheckpointSection>> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat("unexpected end of file".into()))?
            .map_err(Error::Io)
    };

    if next()? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic line".into()));
    }

    let mut sections = Vec::new();
    loop {
        let line = next()?;
        if line == "end" {
            return Ok(sections);
        }
        let name = line
            .strip_prefix("section ")
            .ok_or_else(|| Error::CheckpointFormat(format!("expected section, got {line:?}")))?
            .to_string();

        let meta = next()?;
        let meta = meta
            .strip_prefix("bnmeta ")
            .ok_or_else(|| Error::CheckpointFormat("expected bnmeta".into()))?;
        let meta = parse_bits_line(meta, 2)?;
        let mut bn = BatchNormState::empty();
        bn.momentum = meta[0];
        bn.eps = meta[1];

        let mut params = ParamStore::new();
        loop {
            let line = next()?;
            if line == "end-section" {
                break;
            }
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("param") => {
                    let pname = tokens
                        .next()
                        .ok_or_else(|| Error::CheckpointFormat("param missing name".into()))?
                        .to_string();
                    let ndim: usize = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::CheckpointFormat("param missing ndim".into()))?;
                    let shape: Vec<usize> = tokens
                        .map(|t| {
                            t.parse()
                                .map_err(|_| Error::CheckpointFormat(format!("bad dim {t:?}")))
                        })
                        .collect::<Result<_>>()?;
                    if shape.len() != ndim {
                        return Err(Error::CheckpointFormat("dim count mismatch".into()));
                    }
                    let numel = shape.iter().product();
                    let data = parse_bits_line(&next()?, numel)?;
                    let tensor = Tensor::from_vec(shape, data)
                        .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
                    params.insert(pname, tensor)?;
                }
                Some("bn") => {
                    let idx: usize = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::CheckpointFormat("bn missing index".into()))?;
                    let width: usize = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::CheckpointFormat("bn missing width".into()))?;
                    let mean = parse_bits_line(&next()?, width)?;
                    let var = parse_bits_line(&next()?, width)?;
                    bn.insert_raw(
                        idx,
                        BnLayerState {
                            running_mean: Tensor::from_vec(vec![width], mean)
                                .map_err(|e| Error::CheckpointFormat(e.to_string()))?,
                            running_var: Tensor::from_vec(vec![width], var)
                                .map_err(|e| Error::CheckpointFormat(e.to_string()))?,
                        },
                    );
                }
                other => {
                    return Err(Error::CheckpointFormat(format!(
                        "unexpected line in section: {other:?}"
                    )));
                }
            }
        }
        sections.push(CheckpointSection { name, params, bn });
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    sections: &[(&str, &ParamStore, &BatchNormState)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), sections)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointSection>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
