//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SRLP"
//! version u32                 (currently 1)
//! hlen    u64                 header byte length
//! header  JSON                spec, mode, surviving unit ids, tensor index
//! data    f32[] per tensor    in header order
//! ```
//!
//! The header's unit list is what lets a pruned model round-trip: the loader
//! regenerates the original block layout from the spec and keeps only the
//! listed ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blocks::{Block, Stem};
use super::layout::unit_layouts;
use super::{ModelState, Mode, NetworkSpec, Unit, UnitId};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SRLP";

#[derive(Serialize, Deserialize)]
struct UnitEntry {
    id: UnitId,
    stage_id: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    mode: Mode,
    units: Vec<UnitEntry>,
    tensors: Vec<TensorEntry>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
        expected_version: CHECKPOINT_VERSION,
    }
}

/// Serializes the model (spec, mode, unit list, every named tensor).
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    model.visit(&mut |name, _, view| {
        tensors.push(TensorEntry { name: name.to_string(), shape: view.shape().to_vec() });
        for v in view.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        spec: model.spec().clone(),
        mode: model.mode(),
        units: model
            .units()
            .iter()
            .map(|u| UnitEntry { id: u.id, stage_id: u.stage_id })
            .collect(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::argument(format!("cannot encode checkpoint header: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&data)?;
    w.flush()?;
    Ok(())
}

/// Restores a model saved by [`save_checkpoint`], including eval/train mode.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| format_err(path, format!("cannot open: {e}")))?,
    );

    let mut magic = [0u8; 4];
    read_all(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic; not a checkpoint file"));
    }
    let mut v4 = [0u8; 4];
    read_all(&mut r, &mut v4, path)?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("found format version {version}")));
    }
    let mut l8 = [0u8; 8];
    read_all(&mut r, &mut l8, path)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbytes = vec![0u8; hlen];
    read_all(&mut r, &mut hbytes, path)?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    header.spec.validate().map_err(|e| format_err(path, format!("bad spec: {e}")))?;

    // Tensor payloads, in header order.
    let mut payloads: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; len * 4];
        read_all(&mut r, &mut buf, path)?;
        let vals: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if payloads.insert(entry.name.clone(), (entry.shape.clone(), vals)).is_some() {
            return Err(format_err(path, format!("duplicate tensor {}", entry.name)));
        }
    }

    // Rebuild the skeleton: original layout filtered to surviving ids.
    let survivors: Vec<UnitId> = header.units.iter().map(|u| u.id).collect();
    let mut rng = stream_rng(0, Stream::Init);
    let stem = Stem::build(&header.spec, &mut rng);
    let mut units = Vec::with_capacity(survivors.len());
    for lay in unit_layouts(&header.spec) {
        if survivors.contains(&lay.id) {
            let block = Block::build(&lay, &header.spec, &mut rng);
            units.push(Unit { id: lay.id, stage_id: lay.stage_id, block });
        }
    }
    if units.len() != survivors.len() {
        return Err(format_err(path, "unit list does not match the spec layout"));
    }
    let feat = units
        .last()
        .map(|u| u.block.out_channels())
        .unwrap_or_else(|| stem.out_channels());
    let classifier = Linear::zeros(header.spec.num_classes, feat);
    let mut model =
        ModelState::from_parts(header.spec.clone(), stem, units, classifier, header.mode);

    // Fill parameters by name.
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_mut(&mut |name, _, mut view| {
        match payloads.remove(name) {
            Some((shape, vals)) => {
                if shape != view.shape() {
                    shape_err.get_or_insert_with(|| {
                        format!("tensor {name}: shape {shape:?} != expected {:?}", view.shape())
                    });
                    return;
                }
                for (dst, src) in view.iter_mut().zip(vals.iter()) {
                    *dst = *src;
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(format_err(path, msg));
    }
    if !missing.is_empty() {
        return Err(format_err(path, format!("missing tensors: {}", missing.join(", "))));
    }
    if !payloads.is_empty() {
        let extra: Vec<String> = payloads.keys().cloned().collect();
        return Err(format_err(path, format!("unexpected tensors: {}", extra.join(", "))));
    }
    Ok(model)
}

fn read_all(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| format_err(path, format!("truncated or unreadable: {e}")))
}
