//! Versioned binary snapshot of a [`TrainerState`].
//!
//! All integers are little-endian `u64`, all reals little-endian `f64`,
//! matrices row-major:
//!
//! ```text
//! magic    8 bytes  "MDMTCKPT"
//! version  u32      currently 1
//! trunk    n_layers, then per layer: out, in, weight[out*in], bias[out]
//! heads    n_heads,  then per head:  task_id, d, classes, weight[d*classes], bias[classes]
//! memory   quota, n_entries, then per entry:
//!          task_id, label, input_len, input[..], rep_len, representation[..]
//! matrix   T, a[T*T]
//! curve    rows, cols, a_tb[rows*cols]
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::loss::TaskHead;
use crate::memory::{MemoryEntry, MemoryStore};
use crate::metrics::AccuracyMatrix;
use crate::nn::{DenseLayer, Network};
use crate::trainer::TrainerState;

pub const MAGIC: &[u8; 8] = b"MDMTCKPT";
pub const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.write_u64::<LittleEndian>(v as u64).expect("writing to a Vec");
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for &v in values {
        out.write_f64::<LittleEndian>(v).expect("writing to a Vec");
    }
}

pub fn to_bytes(state: &TrainerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("writing to a Vec");

    put_u64(&mut out, state.net.layers().len());
    for layer in state.net.layers() {
        put_u64(&mut out, layer.out_dim());
        put_u64(&mut out, layer.in_dim());
        put_f64s(&mut out, layer.weight().iter());
        put_f64s(&mut out, layer.bias().iter());
    }

    put_u64(&mut out, state.heads.len());
    for head in &state.heads {
        put_u64(&mut out, head.task_id());
        put_u64(&mut out, head.feature_dim());
        put_u64(&mut out, head.num_classes());
        put_f64s(&mut out, head.weight().iter());
        put_f64s(&mut out, head.bias().iter());
    }

    put_u64(&mut out, state.memory.quota());
    put_u64(&mut out, state.memory.len());
    for e in state.memory.iter() {
        put_u64(&mut out, e.task_id);
        put_u64(&mut out, e.label);
        put_u64(&mut out, e.input.len());
        put_f64s(&mut out, e.input.iter());
        put_u64(&mut out, e.representation.len());
        put_f64s(&mut out, e.representation.iter());
    }

    let t = state.matrix.size();
    put_u64(&mut out, t);
    for row in state.matrix.rows() {
        put_f64s(&mut out, row);
    }

    let cols = state.curve_rows.first().map_or(0, Vec::len);
    put_u64(&mut out, state.curve_rows.len());
    put_u64(&mut out, cols);
    for row in &state.curve_rows {
        put_f64s(&mut out, row);
    }
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self
            .cur
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in memory")))
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|bytes| bytes > self.remaining()) {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let mut v = vec![0.0; n];
        self.cur
            .read_f64_into::<LittleEndian>(&mut v)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("{what} size overflows")))?;
        let v = self.reals(n, what)?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn invalid(e: Error) -> Error {
    Error::Checkpoint(format!("inconsistent contents: {e}"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainerState> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let mut magic = [0u8; 8];
    r.cur
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r
        .cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    let n_layers = r.count("layer count")?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let out = r.count("layer rows")?;
        let inp = r.count("layer cols")?;
        let w = r.matrix(out, inp, "layer weight")?;
        let b = Array1::from(r.reals(out, "layer bias")?);
        layers.push(DenseLayer::from_parts(w, b).map_err(invalid)?);
    }
    let net = Network::from_layers(layers).map_err(invalid)?;

    let n_heads = r.count("head count")?;
    let mut heads = Vec::new();
    for _ in 0..n_heads {
        let id = r.count("head id")?;
        let d = r.count("head rows")?;
        let c = r.count("head cols")?;
        let w = r.matrix(d, c, "head weight")?;
        let b = Array1::from(r.reals(c, "head bias")?);
        heads.push(TaskHead::new(id, w, b).map_err(invalid)?);
    }

    let quota = r.count("memory quota")?;
    let n_entries = r.count("memory size")?;
    let mut entries = Vec::new();
    for _ in 0..n_entries {
        let task_id = r.count("entry task")?;
        let label = r.count("entry label")?;
        let n_in = r.count("entry input length")?;
        let input = Array1::from(r.reals(n_in, "entry input")?);
        let n_rep = r.count("entry representation length")?;
        let representation = Array1::from(r.reals(n_rep, "entry representation")?);
        entries.push(MemoryEntry {
            input,
            label,
            task_id,
            representation,
        });
    }
    let memory = MemoryStore::from_entries(quota, entries).map_err(invalid)?;

    let t = r.count("matrix size")?;
    let a = r.matrix(t, t, "accuracy matrix")?;
    let matrix = AccuracyMatrix::from_rows(a.outer_iter().map(|row| row.to_vec()).collect()).map_err(invalid)?;

    let rows = r.count("curve rows")?;
    let cols = r.count("curve cols")?;
    let c = r.matrix(rows, cols, "curve")?;
    let curve_rows = c.outer_iter().map(|row| row.to_vec()).collect();

    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(TrainerState {
        net,
        heads,
        memory,
        matrix,
        curve_rows,
    })
}

pub fn save(state: &TrainerState, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainerState> {
    from_bytes(&fs::read(path)?)
}
