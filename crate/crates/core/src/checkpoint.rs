//! Checkpoint files: `magic | version u32 | header length u64 | JSON header |
//! named tensor blobs`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    step: u64,
    names: Vec<String>,
    adam_t: Option<u64>,
}

pub struct Checkpoint {
    pub run: RunConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<(RunConfig, TrainState)> {
        let adam = self
            .adam
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        Ok((
            self.run,
            TrainState {
                params: self.params,
                adam,
                step: self.step,
            },
        ))
    }
}

fn write_named(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    t.write_to(w)
}

fn read_named(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
    Ok((name, Tensor::read_from(r)?))
}

/// Writes atomically: a partial file never replaces a good checkpoint.
pub fn save(path: &Path, run: &RunConfig, params: &ModelParams<f32>, adam: Option<&Adam<f32>>, step: u64) -> Result<()> {
    let header = Header {
        run: run.clone(),
        step,
        names: params.names().to_vec(),
        adam_t: adam.map(|a| a.t),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, t) in params.iter() {
            write_named(&mut w, name, t)?;
        }
        if let Some(a) = adam {
            for (name, (m, v)) in params.names().iter().zip(a.m.iter().zip(&a.v)) {
                write_named(&mut w, &format!("adam.m.{name}"), m)?;
                write_named(&mut w, &format!("adam.v.{name}"), v)?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_state(path: &Path, run: &RunConfig, state: &TrainState) -> Result<()> {
    save(path, run, &state.params, Some(&state.adam), state.step)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Version(format!("{} is not a checkpoint", path.display())));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Version(format!(
            "{}: checkpoint version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Version(format!("{}: unreadable header: {e}", path.display())))?;

    let mut named = Vec::with_capacity(header.names.len());
    for expected in &header.names {
        let (name, t) = read_named(&mut r)?;
        if &name != expected {
            return Err(Error::Version(format!("tensor `{name}` where `{expected}` was expected")));
        }
        named.push((name, t));
    }
    let params = ModelParams::from_tensors(header.run.model.clone(), named)?;
    let adam = match header.adam_t {
        None => None,
        Some(t) => {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for name in &header.names {
                for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                    let (got, tensor) = read_named(&mut r)?;
                    if got != format!("{prefix}{name}") {
                        return Err(Error::Version(format!("unexpected optimizer tensor `{got}`")));
                    }
                    dst.push(tensor);
                }
            }
            let o = &header.run.optim;
            Some(Adam {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                t,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        run: header.run,
        step: header.step,
        params,
        adam,
    })
}
