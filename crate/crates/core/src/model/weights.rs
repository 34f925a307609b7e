//! Frozen transformer parameters, seeded initialization and the binary checkpoint.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic    "INTRAWT1"
//! header   11 × u64: d, d_h, n_h, n_kv, enc_layers, dec_layers, vocab_size,
//!                    max_positions, ffn_dim, rmsnorm_eps (f64 bits), rope_theta (f64 bits)
//! count    u32 number of tensors
//! tensor   u32 name length, name bytes, u32 rank, rank × u64 shape, f32 data
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{IntraError, Result};
use crate::io_util::{read_f32_vec, read_u32, read_u64, write_atomic};
use crate::tensor::Matrix;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"INTRAWT1";

/// Projections of a self-attention block (row-vector convention: `y = x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionWeights {
    /// `d × n_h·d_h`
    pub wq: Matrix,
    /// `d × n_kv·d_h`
    pub wk: Matrix,
    /// `d × n_kv·d_h`
    pub wv: Matrix,
    /// `n_h·d_h × d`
    pub wo: Matrix,
}

/// Cross-attention parameters in the factored form used by reverse query-key projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    /// `d × n_h·d_h`
    pub wq: Matrix,
    /// One `d × d_h` key block per KV group.
    pub wk_blocks: Vec<Matrix>,
    /// Key scale, shared by all KV groups.
    pub gamma_k: Vec<f64>,
    /// `d × n_kv·d_h`
    pub wv: Matrix,
    /// `n_h·d_h × d`
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    /// `d × ffn_dim`
    pub w1: Matrix,
    /// `ffn_dim × d`
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights {
    pub attn_norm: Vec<f64>,
    pub attn: SelfAttentionWeights,
    pub ffn_norm: Vec<f64>,
    pub ffn: FeedForwardWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights {
    pub self_norm: Vec<f64>,
    pub self_attn: SelfAttentionWeights,
    pub cross_norm: Vec<f64>,
    pub cross: CrossAttentionWeights,
    pub ffn_norm: Vec<f64>,
    pub ffn: FeedForwardWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab_size × d`
    pub embed: Matrix,
    pub encoder: Vec<EncoderLayerWeights>,
    pub enc_final_norm: Vec<f64>,
    pub decoder: Vec<DecoderLayerWeights>,
    pub dec_final_norm: Vec<f64>,
    /// `d × vocab_size`
    pub lm_head: Matrix,
}

/// Seeded initialization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightInit {
    pub seed: u64,
    /// Standard deviation of every projection matrix.
    pub projection_std: f64,
    /// Standard deviation of the token embedding table.
    pub embedding_std: f64,
    /// Norm scales are `1 + U(-jitter, jitter)`; zero gives all-ones scales.
    pub norm_jitter: f64,
}

impl Default for WeightInit {
    fn default() -> Self {
        Self {
            seed: 0,
            projection_std: 0.02,
            embedding_std: 1.0,
            norm_jitter: 0.0,
        }
    }
}

impl WeightInit {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    /// Values are rounded through f32 so checkpoints reproduce them exactly.
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols)
            .map(|_| normal.sample(&mut self.rng) as f32 as f64)
            .collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    }

    fn scales(&mut self, n: usize, jitter: f64) -> Vec<f64> {
        if jitter == 0.0 {
            return vec![1.0; n];
        }
        use rand::Rng;
        (0..n)
            .map(|_| (1.0 + self.rng.random_range(-jitter..jitter)) as f32 as f64)
            .collect()
    }
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, init: &WeightInit) -> Result<Self> {
        config.validate()?;
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(init.seed),
        };
        let (d, p, j) = (config.d, init.projection_std, init.norm_jitter);
        let embed = s.matrix(config.vocab_size, d, init.embedding_std);
        let self_attn = |s: &mut Sampler| SelfAttentionWeights {
            wq: s.matrix(d, config.q_dim(), p),
            wk: s.matrix(d, config.kv_dim(), p),
            wv: s.matrix(d, config.kv_dim(), p),
            wo: s.matrix(config.q_dim(), d, p),
        };
        let ffn = |s: &mut Sampler| FeedForwardWeights {
            w1: s.matrix(d, config.ffn_dim, p),
            w2: s.matrix(config.ffn_dim, d, p),
        };
        let encoder = (0..config.enc_layers)
            .map(|_| EncoderLayerWeights {
                attn_norm: s.scales(d, j),
                attn: self_attn(&mut s),
                ffn_norm: s.scales(d, j),
                ffn: ffn(&mut s),
            })
            .collect();
        let enc_final_norm = s.scales(d, j);
        let decoder = (0..config.dec_layers)
            .map(|_| DecoderLayerWeights {
                self_norm: s.scales(d, j),
                self_attn: self_attn(&mut s),
                cross_norm: s.scales(d, j),
                cross: CrossAttentionWeights {
                    wq: s.matrix(d, config.q_dim(), p),
                    wk_blocks: (0..config.n_kv)
                        .map(|_| s.matrix(d, config.d_h, p))
                        .collect(),
                    gamma_k: s.scales(config.d_h, j),
                    wv: s.matrix(d, config.kv_dim(), p),
                    wo: s.matrix(config.q_dim(), d, p),
                },
                ffn_norm: s.scales(d, j),
                ffn: ffn(&mut s),
            })
            .collect();
        let dec_final_norm = s.scales(d, j);
        let lm_head = s.matrix(d, config.vocab_size, p);
        Ok(Self {
            embed,
            encoder,
            enc_final_norm,
            decoder,
            dec_final_norm,
            lm_head,
        })
    }

    /// Zero-filled weights with the shapes implied by `config`.
    fn zeros(config: &ModelConfig) -> Self {
        let d = config.d;
        let self_attn = || SelfAttentionWeights {
            wq: Matrix::zeros(d, config.q_dim()),
            wk: Matrix::zeros(d, config.kv_dim()),
            wv: Matrix::zeros(d, config.kv_dim()),
            wo: Matrix::zeros(config.q_dim(), d),
        };
        let ffn = || FeedForwardWeights {
            w1: Matrix::zeros(d, config.ffn_dim),
            w2: Matrix::zeros(config.ffn_dim, d),
        };
        Self {
            embed: Matrix::zeros(config.vocab_size, d),
            encoder: (0..config.enc_layers)
                .map(|_| EncoderLayerWeights {
                    attn_norm: vec![0.0; d],
                    attn: self_attn(),
                    ffn_norm: vec![0.0; d],
                    ffn: ffn(),
                })
                .collect(),
            enc_final_norm: vec![0.0; d],
            decoder: (0..config.dec_layers)
                .map(|_| DecoderLayerWeights {
                    self_norm: vec![0.0; d],
                    self_attn: self_attn(),
                    cross_norm: vec![0.0; d],
                    cross: CrossAttentionWeights {
                        wq: Matrix::zeros(d, config.q_dim()),
                        wk_blocks: (0..config.n_kv)
                            .map(|_| Matrix::zeros(d, config.d_h))
                            .collect(),
                        gamma_k: vec![0.0; config.d_h],
                        wv: Matrix::zeros(d, config.kv_dim()),
                        wo: Matrix::zeros(config.q_dim(), d),
                    },
                    ffn_norm: vec![0.0; d],
                    ffn: ffn(),
                })
                .collect(),
            dec_final_norm: vec![0.0; d],
            lm_head: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Every parameter tensor with its canonical name and shape, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        out.push(("embed".into(), mat(&self.embed), self.embed.as_slice()));
        for (l, layer) in self.encoder.iter().enumerate() {
            let p = format!("enc.{l}");
            out.push((
                format!("{p}.attn_norm"),
                vec![layer.attn_norm.len()],
                &layer.attn_norm,
            ));
            push_self_attn(&mut out, &format!("{p}.attn"), &layer.attn);
            out.push((
                format!("{p}.ffn_norm"),
                vec![layer.ffn_norm.len()],
                &layer.ffn_norm,
            ));
            out.push((
                format!("{p}.ffn.w1"),
                mat(&layer.ffn.w1),
                layer.ffn.w1.as_slice(),
            ));
            out.push((
                format!("{p}.ffn.w2"),
                mat(&layer.ffn.w2),
                layer.ffn.w2.as_slice(),
            ));
        }
        out.push((
            "enc.final_norm".into(),
            vec![self.enc_final_norm.len()],
            &self.enc_final_norm,
        ));
        for (l, layer) in self.decoder.iter().enumerate() {
            let p = format!("dec.{l}");
            out.push((
                format!("{p}.self_norm"),
                vec![layer.self_norm.len()],
                &layer.self_norm,
            ));
            push_self_attn(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            out.push((
                format!("{p}.cross_norm"),
                vec![layer.cross_norm.len()],
                &layer.cross_norm,
            ));
            let c = &layer.cross;
            out.push((format!("{p}.cross.wq"), mat(&c.wq), c.wq.as_slice()));
            for (g, b) in c.wk_blocks.iter().enumerate() {
                out.push((format!("{p}.cross.wk.{g}"), mat(b), b.as_slice()));
            }
            out.push((
                format!("{p}.cross.gamma_k"),
                vec![c.gamma_k.len()],
                &c.gamma_k,
            ));
            out.push((format!("{p}.cross.wv"), mat(&c.wv), c.wv.as_slice()));
            out.push((format!("{p}.cross.wo"), mat(&c.wo), c.wo.as_slice()));
            out.push((
                format!("{p}.ffn_norm"),
                vec![layer.ffn_norm.len()],
                &layer.ffn_norm,
            ));
            out.push((
                format!("{p}.ffn.w1"),
                mat(&layer.ffn.w1),
                layer.ffn.w1.as_slice(),
            ));
            out.push((
                format!("{p}.ffn.w2"),
                mat(&layer.ffn.w2),
                layer.ffn.w2.as_slice(),
            ));
        }
        out.push((
            "dec.final_norm".into(),
            vec![self.dec_final_norm.len()],
            &self.dec_final_norm,
        ));
        out.push((
            "lm_head".into(),
            mat(&self.lm_head),
            self.lm_head.as_slice(),
        ));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("embed".into(), self.embed.as_mut_slice()));
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            let p = format!("enc.{l}");
            out.push((format!("{p}.attn_norm"), &mut layer.attn_norm));
            push_self_attn_mut(&mut out, &format!("{p}.attn"), &mut layer.attn);
            out.push((format!("{p}.ffn_norm"), &mut layer.ffn_norm));
            out.push((format!("{p}.ffn.w1"), layer.ffn.w1.as_mut_slice()));
            out.push((format!("{p}.ffn.w2"), layer.ffn.w2.as_mut_slice()));
        }
        out.push(("enc.final_norm".into(), &mut self.enc_final_norm));
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            let p = format!("dec.{l}");
            out.push((format!("{p}.self_norm"), &mut layer.self_norm));
            push_self_attn_mut(&mut out, &format!("{p}.self_attn"), &mut layer.self_attn);
            out.push((format!("{p}.cross_norm"), &mut layer.cross_norm));
            let c = &mut layer.cross;
            out.push((format!("{p}.cross.wq"), c.wq.as_mut_slice()));
            for (g, b) in c.wk_blocks.iter_mut().enumerate() {
                out.push((format!("{p}.cross.wk.{g}"), b.as_mut_slice()));
            }
            out.push((format!("{p}.cross.gamma_k"), &mut c.gamma_k));
            out.push((format!("{p}.cross.wv"), c.wv.as_mut_slice()));
            out.push((format!("{p}.cross.wo"), c.wo.as_mut_slice()));
            out.push((format!("{p}.ffn_norm"), &mut layer.ffn_norm));
            out.push((format!("{p}.ffn.w1"), layer.ffn.w1.as_mut_slice()));
            out.push((format!("{p}.ffn.w2"), layer.ffn.w2.as_mut_slice()));
        }
        out.push(("dec.final_norm".into(), &mut self.dec_final_norm));
        out.push(("lm_head".into(), self.lm_head.as_mut_slice()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over every tensor's name and exact bit pattern.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, _, data) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::zeros(config);
        let expected = reference.named_tensors();
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(IntraError::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es, _), (an, ashape, _)) in expected.iter().zip(&actual) {
            if en != an || es != ashape {
                return Err(IntraError::Shape(format!(
                    "tensor {an} has shape {ashape:?}, expected {en} {es:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        for v in config_header(config) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = self.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for s in shape {
                buf.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| IntraError::Truncated("weights magic".into()))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(IntraError::BadMagic {
                expected: "INTRAWT1",
            });
        }
        let mut header = [0u64; 11];
        for h in header.iter_mut() {
            *h = read_u64(&mut r, "weights header")?;
        }
        let config = ModelConfig {
            d: header[0] as usize,
            d_h: header[1] as usize,
            n_h: header[2] as usize,
            n_kv: header[3] as usize,
            enc_layers: header[4] as usize,
            dec_layers: header[5] as usize,
            vocab_size: header[6] as usize,
            max_positions: header[7] as usize,
            ffn_dim: header[8] as usize,
            rmsnorm_eps: f64::from_bits(header[9]),
            rope_theta: f64::from_bits(header[10]),
        };
        config.validate()?;
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut loaded: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| IntraError::Truncated("tensor name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| IntraError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r, "tensor shape").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = read_f32_vec(&mut r, n, &name)?;
            loaded.insert(name, (shape, data));
        }
        let mut weights = ModelWeights::zeros(&config);
        let shapes: HashMap<String, Vec<usize>> = weights
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for (name, slot) in weights.tensors_mut() {
            let (shape, data) = loaded
                .remove(&name)
                .ok_or_else(|| IntraError::Malformed(format!("missing tensor {name}")))?;
            if shape != shapes[&name] {
                return Err(IntraError::Shape(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    shapes[&name]
                )));
            }
            for (dst, src) in slot.iter_mut().zip(&data) {
                *dst = *src as f64;
            }
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(IntraError::Malformed(format!("unexpected tensor {extra}")));
        }
        if !weights.is_finite() {
            return Err(IntraError::Malformed(
                "checkpoint contains non-finite weights".into(),
            ));
        }
        Ok((config, weights))
    }
}

fn push_self_attn<'a>(
    out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
    prefix: &str,
    a: &'a SelfAttentionWeights,
) {
    for (n, m) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
        out.push((
            format!("{prefix}.{n}"),
            vec![m.rows(), m.cols()],
            m.as_slice(),
        ));
    }
}

fn push_self_attn_mut<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    prefix: &str,
    a: &'a mut SelfAttentionWeights,
) {
    out.push((format!("{prefix}.wq"), a.wq.as_mut_slice()));
    out.push((format!("{prefix}.wk"), a.wk.as_mut_slice()));
    out.push((format!("{prefix}.wv"), a.wv.as_mut_slice()));
    out.push((format!("{prefix}.wo"), a.wo.as_mut_slice()));
}

fn config_header(c: &ModelConfig) -> [u64; 11] {
    [
        c.d as u64,
        c.d_h as u64,
        c.n_h as u64,
        c.n_kv as u64,
        c.enc_layers as u64,
        c.dec_layers as u64,
        c.vocab_size as u64,
        c.max_positions as u64,
        c.ffn_dim as u64,
        c.rmsnorm_eps.to_bits(),
        c.rope_theta.to_bits(),
    ]
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            max_positions: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let c = small();
        let a = ModelWeights::init(&c, &WeightInit::with_seed(3)).unwrap();
        let b = ModelWeights::init(&c, &WeightInit::with_seed(3)).unwrap();
        let other = ModelWeights::init(&c, &WeightInit::with_seed(4)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), other.checksum());
        for (_, _, data) in a.named_tensors() {
            assert!(data.iter().all(|v| (*v as f32) as f64 == *v));
        }
        assert!(a.decoder[0].cross.gamma_k.iter().all(|&g| g == 1.0));
        a.check_shapes(&c).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let c = small();
        let init = WeightInit {
            norm_jitter: 0.2,
            ..WeightInit::with_seed(9)
        };
        let w = ModelWeights::init(&c, &init).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        w.save(&c, &path).unwrap();
        let (c2, w2) = ModelWeights::load(&path).unwrap();
        assert_eq!(c, c2);
        assert_eq!(w, w2);
        assert_eq!(w.checksum(), w2.checksum());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let c = small();
        let w = ModelWeights::init(&c, &WeightInit::with_seed(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        w.save(&c, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            ModelWeights::from_bytes(truncated),
            Err(IntraError::Truncated(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(IntraError::BadMagic { .. })
        ));
    }
}
