//! Trainable retrieval state: retrieval-token embeddings `ρ` and layer-head weights `α`.

use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{IntraError, Result};
use crate::io_util::{read_f64, read_u32, write_atomic};
use crate::model::ModelConfig;
use crate::tensor::Matrix;

pub const PARAMS_MAGIC: &[u8; 8] = b"INTRARP1";

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalParams {
    /// `R × d` retrieval-token embeddings.
    pub rho: Matrix,
    /// `L_dec × n_h` aggregation weights.
    pub alpha: Matrix,
}

impl RetrievalParams {
    /// Seeded `ρ ~ N(0, rho_std²)` and uniform `α = 1 / (L_dec · n_h)`.
    pub fn init(config: &ModelConfig, r: usize, seed: u64, rho_std: f64) -> Result<Self> {
        if r == 0 {
            return Err(IntraError::InvalidArgument(
                "at least one retrieval token is required".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, rho_std)
            .map_err(|e| IntraError::InvalidArgument(format!("retrieval token std: {e}")))?;
        let rho = Matrix::from_vec(
            r,
            config.d,
            (0..r * config.d).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let cells = config.dec_layers * config.n_h;
        let alpha = Matrix::from_vec(
            config.dec_layers,
            config.n_h,
            vec![1.0 / cells as f64; cells],
        )?;
        Ok(Self { rho, alpha })
    }

    pub fn r(&self) -> usize {
        self.rho.rows()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.rho.rows() == 0 {
            return Err(IntraError::InvalidArgument(
                "retrieval params have no retrieval tokens".into(),
            ));
        }
        if self.rho.cols() != config.d
            || self.alpha.rows() != config.dec_layers
            || self.alpha.cols() != config.n_h
        {
            return Err(IntraError::Shape(format!(
                "retrieval params ρ {}x{}, α {}x{} do not fit d={}, L_dec={}, n_h={}",
                self.rho.rows(),
                self.rho.cols(),
                self.alpha.rows(),
                self.alpha.cols(),
                config.d,
                config.dec_layers,
                config.n_h
            )));
        }
        if !self.rho.is_finite() || !self.alpha.is_finite() {
            return Err(IntraError::NonFinite("retrieval params".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf =
            Vec::with_capacity(24 + 8 * (self.rho.as_slice().len() + self.alpha.as_slice().len()));
        buf.extend_from_slice(PARAMS_MAGIC);
        for v in [
            self.rho.rows(),
            self.rho.cols(),
            self.alpha.rows(),
            self.alpha.cols(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.rho.as_slice().iter().chain(self.alpha.as_slice()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| IntraError::Truncated("params magic".into()))?;
        if &magic != PARAMS_MAGIC {
            return Err(IntraError::BadMagic {
                expected: "INTRARP1",
            });
        }
        let mut dims = [0usize; 4];
        for v in dims.iter_mut() {
            *v = read_u32(&mut r, "params header")? as usize;
        }
        let [rr, d, l, h] = dims;
        let expect = 24 + 8 * (rr * d + l * h);
        if bytes.len() < expect {
            return Err(IntraError::Truncated("params payload".into()));
        }
        if bytes.len() > expect {
            return Err(IntraError::Malformed(
                "trailing bytes after params payload".into(),
            ));
        }
        let mut read = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| read_f64(&mut r, "params payload")).collect()
        };
        let rho = Matrix::from_vec(rr, d, read(rr * d)?)?;
        let alpha = Matrix::from_vec(l, h, read(l * h)?)?;
        Ok(Self { rho, alpha })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Short content hash recorded next to scores produced with these params.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        crate::model::weights::hex(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_uniform_alpha() {
        let config = ModelConfig::default();
        let p = RetrievalParams::init(&config, 8, 1, 1.0).unwrap();
        assert_eq!((p.rho.rows(), p.rho.cols()), (8, 32));
        assert_eq!((p.alpha.rows(), p.alpha.cols()), (2, 4));
        assert!(p.alpha.as_slice().iter().all(|&a| a == 0.125));
        assert_eq!(p, RetrievalParams::init(&config, 8, 1, 1.0).unwrap());
        assert!(RetrievalParams::init(&config, 0, 1, 1.0).is_err());
        p.check(&config).unwrap();
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let config = ModelConfig::default();
        let p = RetrievalParams::init(&config, 3, 2, 0.7).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], b"INTRARP1");
        assert_eq!(RetrievalParams::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(
            RetrievalParams::from_bytes(&bytes[..bytes.len() - 1]),
            Err(IntraError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[7] = b'0';
        assert!(matches!(
            RetrievalParams::from_bytes(&bad),
            Err(IntraError::BadMagic { .. })
        ));
        assert_eq!(p.hash().len(), 16);
    }
}
