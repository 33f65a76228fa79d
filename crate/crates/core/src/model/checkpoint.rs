//! Self-describing checkpoint container: a version tag, a section name
//! identifying which model the parameters belong to, a JSON echo of the
//! configuration, and named f64 tensors in little-endian byte order.

use super::ModelError;
use crate::nn::Module;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub version: u32,
    pub section: String,
    pub config_json: String,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(format!("invalid utf-8 in header: {e}")))
}

/// Serialize every persistent tensor of `model` under `section`.
pub fn save(
    path: &Path,
    section: &str,
    config_json: &str,
    model: &mut dyn Module,
) -> Result<(), ModelError> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.for_each_state("", &mut |name, slot| {
        entries.push((name, slot.shape.clone(), slot.data.to_vec()));
    });
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_str(&mut w, section)?;
    write_str(&mut w, config_json)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, shape, data) in &entries {
        write_str(&mut w, name)?;
        write_u32(&mut w, shape.len() as u32)?;
        for d in shape {
            write_u32(&mut w, *d as u32)?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint file into memory.
pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let section = read_str(&mut r)?;
    let config_json = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.insert(name, (shape, data));
    }
    Ok(Checkpoint {
        version,
        section,
        config_json,
        tensors,
    })
}

impl Checkpoint {
    /// Copy the stored tensors into `model`. Every model tensor must be
    /// present with a matching shape, and no stored tensor may be left over.
    pub fn apply_to(&self, model: &mut dyn Module) -> Result<(), ModelError> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        model.for_each_state("", &mut |name, slot| match self.tensors.get(&name) {
            Some((shape, data)) if *shape == slot.shape => {
                slot.data.copy_from_slice(data);
                used += 1;
            }
            Some((shape, _)) => missing.push(format!("{name}: shape {:?} != stored {:?}", slot.shape, shape)),
            None => missing.push(format!("{name}: absent from checkpoint")),
        });
        if !missing.is_empty() {
            return Err(ModelError::Checkpoint(missing.join("; ")));
        }
        if used != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} tensors but the model consumed {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Section guard for loaders that expect a specific model kind.
    pub fn expect_section(&self, section: &str) -> Result<(), ModelError> {
        if self.section != section {
            return Err(ModelError::Checkpoint(format!(
                "expected a '{section}' checkpoint, found '{}'",
                self.section
            )));
        }
        Ok(())
    }
}
