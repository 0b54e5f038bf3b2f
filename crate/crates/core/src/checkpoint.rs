//! Flat binary container for named float64 arrays.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON index
//! describing every entry, then the raw data section with each array stored
//! as consecutive little-endian f64 words. Values survive a save/load cycle
//! bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PCGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, counted in f64 words.
    offset: u64,
    numel: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    entries: Vec<IndexEntry>,
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut index = Index {
        entries: Vec::with_capacity(entries.len()),
    };
    let mut offset = 0u64;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::invalid(format!(
                "checkpoint entry {}: shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        index.entries.push(IndexEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
            numel: numel as u64,
        });
        offset += numel as u64;
    }
    let header = serde_json::to_vec(&index).expect("index serializes");
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for e in entries {
        for v in &e.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::invalid(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(io)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let index: Index = serde_json::from_slice(&header)
        .map_err(|e| Error::invalid(format!("{}: corrupt index: {e}", path.display())))?;
    let mut entries = Vec::with_capacity(index.entries.len());
    let mut expected_offset = 0u64;
    for ie in index.entries {
        if ie.offset != expected_offset {
            return Err(Error::invalid(format!(
                "{}: entry {} at offset {} but data section is at {}",
                path.display(),
                ie.name,
                ie.offset,
                expected_offset
            )));
        }
        expected_offset += ie.numel;
        let mut data = Vec::with_capacity(ie.numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..ie.numel {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(Entry {
            name: ie.name,
            shape: ie.shape,
            data,
        });
    }
    Ok(entries)
}
