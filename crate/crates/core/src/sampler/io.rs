//! Draw storage.
//!
//! Two formats are supported:
//!
//! * `draws.csv`, long format with header `chain,iter,param,value`;
//! * a compact binary log. Layout, all integers and floats little-endian:
//!   the 9-byte magic `BSTEPDRW1`, then `u32` chain count, `u32` draws per
//!   chain, `u32` parameter count, then for every parameter a `u32` byte
//!   length followed by its UTF-8 name, then for every chain the `u64`
//!   iteration numbers of its draws followed by the draws as `f64` values in
//!   `draw * n_params + param` order.
//!
//! Block acceptance rates are not stored; draws read back carry none.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChainDraws, PosteriorDraws};
use crate::csvio;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"BSTEPDRW1";

#[derive(Serialize, Deserialize)]
struct DrawRow {
    chain: usize,
    iter: usize,
    param: String,
    value: f64,
}

pub fn write_csv(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let d = draws.dim();
    for (ci, chain) in draws.chains.iter().enumerate() {
        for (k, row) in chain.values.chunks_exact(d).enumerate() {
            for (p, &value) in row.iter().enumerate() {
                w.serialize(DrawRow {
                    chain: ci,
                    iter: chain.iterations[k],
                    param: draws.names[p].clone(),
                    value,
                })
                .map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<PosteriorDraws> {
    let rows: Vec<DrawRow> = csvio::read_rows(path)?;
    let mut names: Vec<String> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for r in &rows {
        if !index.contains_key(&r.param) {
            index.insert(r.param.clone(), names.len());
            names.push(r.param.clone());
        }
    }
    let d = names.len();
    let n_chains = rows.iter().map(|r| r.chain + 1).max().unwrap_or(0);
    let mut chains: Vec<ChainDraws> = (0..n_chains)
        .map(|_| ChainDraws {
            values: Vec::new(),
            iterations: Vec::new(),
            accept_rate: Vec::new(),
            steps_at_burn_in_end: Vec::new(),
            steps_final: Vec::new(),
        })
        .collect();
    for r in &rows {
        let chain = &mut chains[r.chain];
        let p = index[&r.param];
        if p == 0 {
            chain.iterations.push(r.iter);
            chain.values.extend(std::iter::repeat_n(f64::NAN, d));
        }
        let k = chain.iterations.len();
        if k == 0 || chain.iterations[k - 1] != r.iter {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("draw rows out of order at chain {} iter {}", r.chain, r.iter),
            });
        }
        chain.values[(k - 1) * d + p] = r.value;
    }
    Ok(PosteriorDraws {
        names,
        block_names: Vec::new(),
        param_block: vec![None; d],
        chains,
    })
}

pub fn write_binary(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    let n = draws.draws_per_chain();
    for v in [draws.n_chains(), n, draws.dim()] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for name in &draws.names {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
    }
    for chain in &draws.chains {
        for &it in &chain.iterations {
            w.write_all(&(it as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in &chain.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_binary(path: &Path) -> Result<PosteriorDraws> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic header"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<usize> {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        Ok(u32::from_le_bytes(u32buf) as usize)
    };
    let n_chains = read_u32(&mut r)?;
    let n = read_u32(&mut r)?;
    let d = read_u32(&mut r)?;
    let mut names = Vec::with_capacity(d);
    for _ in 0..d {
        let len = read_u32(&mut r)?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad("truncated name"))?;
        names.push(String::from_utf8(buf).map_err(|_| bad("name is not UTF-8"))?);
    }
    let mut chains = Vec::with_capacity(n_chains);
    let mut b8 = [0u8; 8];
    for _ in 0..n_chains {
        let mut iterations = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8).map_err(|_| bad("truncated draws"))?;
            iterations.push(u64::from_le_bytes(b8) as usize);
        }
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            r.read_exact(&mut b8).map_err(|_| bad("truncated draws"))?;
            values.push(f64::from_le_bytes(b8));
        }
        chains.push(ChainDraws {
            values,
            iterations,
            accept_rate: Vec::new(),
            steps_at_burn_in_end: Vec::new(),
            steps_final: Vec::new(),
        });
    }
    Ok(PosteriorDraws {
        names,
        block_names: Vec::new(),
        param_block: vec![None; d],
        chains,
    })
}

#[derive(Serialize)]
struct DiagnosticRow<'a> {
    param: &'a str,
    rhat: f64,
    ess: f64,
    accept_rate: Option<f64>,
}

/// Writes `param,rhat,ess,accept_rate`; the rate is empty when unknown.
pub fn write_diagnostics(path: &Path, diags: &[super::ParamDiagnostics]) -> Result<()> {
    let rows: Vec<DiagnosticRow> = diags
        .iter()
        .map(|d| DiagnosticRow {
            param: &d.param,
            rhat: d.rhat,
            ess: d.ess,
            accept_rate: d.accept_rate,
        })
        .collect();
    csvio::write_rows(path, &rows)
}

/// Reads either format, choosing by the magic header.
pub fn read_any(path: &Path) -> Result<PosteriorDraws> {
    let mut head = [0u8; 9];
    let is_binary = File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_exact(&mut head)
        .is_ok()
        && &head == MAGIC;
    if is_binary {
        read_binary(path)
    } else {
        read_csv(path)
    }
}
