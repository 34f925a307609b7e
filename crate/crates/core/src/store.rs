//! The pre-encoded chunk pool: full-resolution normalized encoder states for
//! generation, mean-pooled rows for scoring, 8-bit quantization and the binary
//! pool file.

use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{check_unique_ids, Chunk};
use crate::error::{IntraError, Result};
use crate::io_util::{read_f32_vec, read_u32, read_u64, read_u8, write_atomic};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;

pub const POOL_MAGIC: &[u8; 8] = b"INTRAPL1";
pub const POOL_VERSION: u32 = 1;

/// Per-chunk normalized encoder states, stored back to back.
///
/// Values are rounded through `f32`, so the pool file holds them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPool {
    d: usize,
    ids: Vec<u64>,
    starts: Vec<usize>,
    rows: Matrix,
    lookup: HashMap<u64, usize>,
}

impl ChunkPool {
    fn from_parts(d: usize, ids: Vec<u64>, lens: &[usize], rows: Matrix) -> Result<Self> {
        let mut starts = Vec::with_capacity(ids.len() + 1);
        let mut acc = 0;
        starts.push(0);
        for &l in lens {
            acc += l;
            starts.push(acc);
        }
        if acc != rows.rows() || rows.cols() != d {
            return Err(IntraError::Shape(format!(
                "pool has {} rows of width {}, directory expects {acc} of width {d}",
                rows.rows(),
                rows.cols()
            )));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if lookup.insert(id, i).is_some() {
                return Err(IntraError::DuplicateChunk(id));
            }
        }
        Ok(Self {
            d,
            ids,
            starts,
            rows,
            lookup,
        })
    }

    /// Chunk count `M`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Total stored token rows `N`.
    pub fn n_tokens(&self) -> usize {
        self.rows.rows()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> u64 {
        self.ids[index]
    }

    pub fn index_of(&self, chunk_id: u64) -> Result<usize> {
        self.lookup
            .get(&chunk_id)
            .copied()
            .ok_or(IntraError::UnknownChunk(chunk_id))
    }

    pub fn chunk_len(&self, index: usize) -> usize {
        self.starts[index + 1] - self.starts[index]
    }

    /// Rows of chunk `index` as one contiguous `L_c × d` slice.
    pub fn chunk_rows(&self, index: usize) -> &[f64] {
        &self.rows.as_slice()[self.starts[index] * self.d..self.starts[index + 1] * self.d]
    }

    pub fn all_rows(&self) -> &Matrix {
        &self.rows
    }

    /// Rows of the given chunks concatenated in the given order.
    pub fn context_rows(&self, indices: &[usize]) -> Matrix {
        let n: usize = indices.iter().map(|&i| self.chunk_len(i)).sum();
        let mut data = Vec::with_capacity(n * self.d);
        for &i in indices {
            data.extend_from_slice(self.chunk_rows(i));
        }
        Matrix::from_vec(n, self.d, data).expect("row widths match")
    }
}

/// Encode every chunk once and keep its RMS-normalized states.
pub fn build_pool(chunks: &[Chunk], model: &Model) -> Result<ChunkPool> {
    check_unique_ids(chunks)?;
    let eps = model.config().rmsnorm_eps;
    let encoded: Vec<Matrix> = chunks
        .par_iter()
        .map(|c| {
            if c.tokens.is_empty() {
                return Err(IntraError::EmptyInput(format!("chunk {}", c.chunk_id)));
            }
            let mut k = model.encode(&c.tokens)?.normalized(eps)?;
            k.round_to_f32();
            Ok(k)
        })
        .collect::<Result<_>>()?;
    let d = model.config().d;
    let lens: Vec<usize> = encoded.iter().map(Matrix::rows).collect();
    let mut rows = Matrix::empty(d);
    for k in &encoded {
        rows.append(k);
    }
    ChunkPool::from_parts(d, chunks.iter().map(|c| c.chunk_id).collect(), &lens, rows)
}

/// Sizes of the contiguous segments used by [`mean_pool`]; earlier segments take the remainder.
pub fn segment_sizes(l_c: usize, l_p: usize) -> Vec<usize> {
    let parts = l_p.min(l_c).max(1);
    let base = l_c / parts;
    let extra = l_c % parts;
    (0..parts).map(|j| base + usize::from(j < extra)).collect()
}

/// Mean-pool `L_c × d` rows into `min(L_p, L_c)` rows.
pub fn mean_pool(rows: &[f64], d: usize, l_p: usize) -> Matrix {
    let l_c = rows.len() / d;
    let sizes = segment_sizes(l_c, l_p);
    let mut out = Matrix::zeros(sizes.len(), d);
    let mut start = 0;
    for (j, &size) in sizes.iter().enumerate() {
        let dst = out.row_mut(j);
        for r in start..start + size {
            for (o, v) in dst.iter_mut().zip(&rows[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = size as f64;
        dst.iter_mut().for_each(|v| *v /= inv);
        start += size;
    }
    out
}

/// Mean-pooled scoring rows `k̂_i` for every chunk of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledIndex {
    l_p: usize,
    d: usize,
    starts: Vec<usize>,
    rows: Matrix,
}

impl PooledIndex {
    pub fn build(pool: &ChunkPool, l_p: usize) -> Result<Self> {
        if l_p == 0 {
            return Err(IntraError::InvalidArgument(
                "pooled length must be at least 1".into(),
            ));
        }
        let d = pool.d();
        let mut rows = Matrix::empty(d);
        let mut starts = vec![0];
        for i in 0..pool.len() {
            let mut p = mean_pool(pool.chunk_rows(i), d, l_p);
            p.round_to_f32();
            rows.append(&p);
            starts.push(rows.rows());
        }
        Ok(Self {
            l_p,
            d,
            starts,
            rows,
        })
    }

    fn from_parts(l_p: usize, d: usize, lens: &[usize], rows: Matrix) -> Self {
        let mut starts = vec![0];
        for &l in lens {
            starts.push(starts.last().unwrap() + l);
        }
        Self {
            l_p,
            d,
            starts,
            rows,
        }
    }

    pub fn l_p(&self) -> usize {
        self.l_p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_rows(&self, index: usize) -> usize {
        self.starts[index + 1] - self.starts[index]
    }

    /// Pooled rows of chunk `index` as one contiguous `L_p' × d` slice.
    pub fn rows(&self, index: usize) -> &[f64] {
        &self.rows.as_slice()[self.starts[index] * self.d..self.starts[index + 1] * self.d]
    }

    /// Mean of a chunk's pooled rows.
    pub fn mean_vector(&self, index: usize) -> Vec<f64> {
        let rows = self.rows(index);
        let n = self.n_rows(index) as f64;
        let mut m = vec![0.0; self.d];
        for r in rows.chunks_exact(self.d) {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Copy with every pooled row multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.rows.scale(c);
        out
    }
}

/// Storage precision of a pool file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    Int8,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::Int8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::Int8),
            other => Err(IntraError::Malformed(format!("unknown pool dtype {other}"))),
        }
    }

    /// Bytes per stored row of width `d`, including the int8 row scale.
    pub fn row_bytes(self, d: usize) -> usize {
        match self {
            Precision::F32 => 4 * d,
            Precision::Int8 => 4 + d,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "int8" => Ok(Precision::Int8),
            other => Err(IntraError::InvalidArgument(format!(
                "unknown precision {other:?}"
            ))),
        }
    }
}

/// Symmetric per-row 8-bit quantization: `scale = max|x| / 127` (1 for a zero
/// row), values rounded half to even.
pub fn quantize_row(row: &[f32]) -> (f32, Vec<i8>) {
    let max_abs = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let q = row
        .iter()
        .map(|&v| (v / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    (scale, q)
}

pub fn dequantize_row(scale: f32, q: &[i8]) -> Vec<f32> {
    q.iter().map(|&v| scale * v as f32).collect()
}

fn push_rows(buf: &mut Vec<u8>, rows: &[f64], d: usize, precision: Precision) {
    for row in rows.chunks_exact(d) {
        let r32: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        match precision {
            Precision::F32 => r32
                .iter()
                .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Precision::Int8 => {
                let (scale, q) = quantize_row(&r32);
                buf.extend_from_slice(&scale.to_le_bytes());
                buf.extend(q.iter().map(|&v| v as u8));
            }
        }
    }
}

/// Serialize a pool and its pooled index.
pub fn pool_to_bytes(
    pool: &ChunkPool,
    pooled: &PooledIndex,
    precision: Precision,
) -> Result<Vec<u8>> {
    if pooled.len() != pool.len() || pooled.d() != pool.d() {
        return Err(IntraError::Shape(
            "pooled index does not belong to this pool".into(),
        ));
    }
    let d = pool.d();
    let row_bytes = precision.row_bytes(d) as u64;
    let mut buf = Vec::new();
    buf.extend_from_slice(POOL_MAGIC);
    buf.extend_from_slice(&POOL_VERSION.to_le_bytes());
    buf.push(precision.code());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(pooled.l_p() as u32).to_le_bytes());
    buf.extend_from_slice(&(pool.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(pool.n_tokens() as u64).to_le_bytes());
    // directory: id, token length, byte offsets of full and pooled rows within the payload
    let pooled_base = pool.n_tokens() as u64 * row_bytes;
    for i in 0..pool.len() {
        buf.extend_from_slice(&pool.id(i).to_le_bytes());
        buf.extend_from_slice(&(pool.chunk_len(i) as u32).to_le_bytes());
        buf.extend_from_slice(&(pool.starts[i] as u64 * row_bytes).to_le_bytes());
        buf.extend_from_slice(&(pooled_base + pooled.starts[i] as u64 * row_bytes).to_le_bytes());
    }
    push_rows(&mut buf, pool.all_rows().as_slice(), d, precision);
    push_rows(&mut buf, pooled.rows.as_slice(), d, precision);
    Ok(buf)
}

pub fn save_pool(
    pool: &ChunkPool,
    pooled: &PooledIndex,
    path: &Path,
    precision: Precision,
) -> Result<()> {
    write_atomic(path, &pool_to_bytes(pool, pooled, precision)?)
}

fn read_rows(r: &mut impl Read, n: usize, d: usize, precision: Precision) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n * d);
    match precision {
        Precision::F32 => {
            out.extend(
                read_f32_vec(r, n * d, "pool rows")?
                    .into_iter()
                    .map(f64::from),
            );
        }
        Precision::Int8 => {
            let mut q = vec![0u8; d];
            for _ in 0..n {
                let scale = read_f32_vec(r, 1, "row scale")?[0];
                r.read_exact(&mut q)
                    .map_err(|_| IntraError::Truncated("int8 pool rows".into()))?;
                let qi: Vec<i8> = q.iter().map(|&b| b as i8).collect();
                out.extend(dequantize_row(scale, &qi).into_iter().map(f64::from));
            }
        }
    }
    Ok(out)
}

/// A pool read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPool {
    pub pool: ChunkPool,
    pub pooled: PooledIndex,
    pub precision: Precision,
}

pub fn pool_from_bytes(bytes: &[u8]) -> Result<LoadedPool> {
    if bytes.len() < 8 || &bytes[..8] != POOL_MAGIC {
        return Err(IntraError::BadMagic {
            expected: "INTRAPL1",
        });
    }
    let mut r = Cursor::new(&bytes[8..]);
    let version = read_u32(&mut r, "pool header")?;
    if version != POOL_VERSION {
        return Err(IntraError::BadVersion(version));
    }
    let precision = Precision::from_code(read_u8(&mut r, "pool header")?)?;
    let d = read_u32(&mut r, "pool header")? as usize;
    let l_p = read_u32(&mut r, "pool header")? as usize;
    let m = read_u64(&mut r, "pool header")? as usize;
    let n = read_u64(&mut r, "pool header")? as usize;
    if d == 0 || l_p == 0 {
        return Err(IntraError::Malformed(format!(
            "pool header has d={d}, L_p={l_p}"
        )));
    }
    let row_bytes = precision.row_bytes(d) as u64;
    let dir_bytes = m
        .checked_mul(28)
        .ok_or_else(|| IntraError::Malformed("chunk count overflows".into()))?;
    if bytes.len() < 8 + 29 + dir_bytes {
        return Err(IntraError::Truncated("chunk directory".into()));
    }
    let mut ids = Vec::with_capacity(m);
    let mut lens = Vec::with_capacity(m);
    let mut pooled_lens = Vec::with_capacity(m);
    let (mut full_at, mut pooled_at) = (0u64, n as u64 * row_bytes);
    for _ in 0..m {
        ids.push(read_u64(&mut r, "chunk directory")?);
        let len = read_u32(&mut r, "chunk directory")? as usize;
        let full_off = read_u64(&mut r, "chunk directory")?;
        let pooled_off = read_u64(&mut r, "chunk directory")?;
        if len == 0 || full_off != full_at || pooled_off != pooled_at {
            return Err(IntraError::Malformed(
                "chunk directory offsets are inconsistent".into(),
            ));
        }
        let plen = len.min(l_p);
        full_at += len as u64 * row_bytes;
        pooled_at += plen as u64 * row_bytes;
        lens.push(len);
        pooled_lens.push(plen);
    }
    if full_at != n as u64 * row_bytes {
        return Err(IntraError::Malformed(
            "token lengths do not sum to N".into(),
        ));
    }
    let payload = bytes.len() as u64 - r.position() - 8;
    if payload < pooled_at {
        return Err(IntraError::Truncated("pool payload".into()));
    }
    if payload > pooled_at {
        return Err(IntraError::Malformed(
            "trailing bytes after pool payload".into(),
        ));
    }
    let full = read_rows(&mut r, n, d, precision)?;
    let total_pooled: usize = pooled_lens.iter().sum();
    let pooled_rows = read_rows(&mut r, total_pooled, d, precision)?;
    let pool = ChunkPool::from_parts(d, ids, &lens, Matrix::from_vec(n, d, full)?)?;
    let pooled = PooledIndex::from_parts(
        l_p,
        d,
        &pooled_lens,
        Matrix::from_vec(total_pooled, d, pooled_rows)?,
    );
    Ok(LoadedPool {
        pool,
        pooled,
        precision,
    })
}

pub fn load_pool(path: &Path) -> Result<LoadedPool> {
    pool_from_bytes(&std::fs::read(path)?)
}

/// Storage and KV-cache comparison figures for a pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolStats {
    pub n_chunks: usize,
    pub n_tokens: usize,
    pub d: usize,
    pub bytes_f32: u64,
    pub bytes_int8: u64,
    /// Int8 bytes including the per-row `f32` scale.
    pub bytes_int8_with_scales: u64,
    pub kv_cache_bytes_f32: u64,
    pub compression_ratio: f64,
}

/// `N · d · bytes_per_element`.
pub fn storage_bytes(n_tokens: u64, d: u64, bytes_per_element: u64) -> u64 {
    n_tokens * d * bytes_per_element
}

/// Per-token size of a per-layer key/value cache relative to one shared row of width `d`.
pub fn kv_compression_ratio(layers: usize, n_kv: usize, d_h: usize, d: usize) -> f64 {
    (2 * layers * n_kv * d_h) as f64 / d as f64
}

pub fn pool_stats(pool: &ChunkPool, config: &ModelConfig) -> PoolStats {
    let n = pool.n_tokens() as u64;
    let d = pool.d() as u64;
    PoolStats {
        n_chunks: pool.len(),
        n_tokens: pool.n_tokens(),
        d: pool.d(),
        bytes_f32: storage_bytes(n, d, 4),
        bytes_int8: storage_bytes(n, d, 1),
        bytes_int8_with_scales: storage_bytes(n, d, 1) + 4 * n,
        kv_cache_bytes_f32: n * (2 * config.dec_layers * config.kv_dim()) as u64 * 4,
        compression_ratio: kv_compression_ratio(
            config.dec_layers,
            config.n_kv,
            config.d_h,
            config.d,
        ),
    }
}
