//! `RCKP` parameter checkpoints: little-endian header followed by row-major
//! f32 tables (user, item, user views 1-2 when flagged, item views 1-2 when flagged).

use std::path::Path;

use crate::backbone::{ParameterSet, Table};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RCKP";
const VERSION: u32 = 1;
const FLAG_USER_VIEWS: u32 = 1;
const FLAG_ITEM_VIEWS: u32 = 2;

fn tables_for(flags: u32) -> Vec<Table> {
    let mut tables = vec![Table::UserEmb, Table::ItemEmb];
    if flags & FLAG_USER_VIEWS != 0 {
        tables.extend([Table::UserView1, Table::UserView2]);
    }
    if flags & FLAG_ITEM_VIEWS != 0 {
        tables.extend([Table::ItemView1, Table::ItemView2]);
    }
    tables
}

pub fn to_bytes(params: &ParameterSet) -> Vec<u8> {
    let flags = u32::from(params.has_views[0]) * FLAG_USER_VIEWS + u32::from(params.has_views[1]) * FLAG_ITEM_VIEWS;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.num_users() as u64).to_le_bytes());
    out.extend_from_slice(&(params.num_items() as u64).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for t in tables_for(flags) {
        for v in params.table(t).as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let header = 4 + 4 + 4 + 8 + 8 + 4;
    if bytes.len() < header {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected RCKP".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", u32_at(4))));
    }
    let dim = u32_at(8) as usize;
    let users = u64_at(12) as usize;
    let items = u64_at(20) as usize;
    let flags = u32_at(28);
    let mut params = ParameterSet::zeros(users, items, dim);
    params.has_views = [flags & FLAG_USER_VIEWS != 0, flags & FLAG_ITEM_VIEWS != 0];
    let mut offset = header;
    for t in tables_for(flags) {
        let n = params.table(t).as_slice().len();
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(Error::Format("checkpoint table truncated".into()));
        }
        for (dst, src) in params
            .table_mut(t)
            .as_mut_slice()
            .iter_mut()
            .zip(bytes[offset..end].chunks_exact(4))
        {
            *dst = f64::from(f32::from_le_bytes(src.try_into().unwrap()));
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tables".into()));
    }
    Ok(params)
}

pub fn save(params: &ParameterSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
