//! Abstract operation counts for full-context, standard RAG and pooled-state prefill.

use std::fmt;
use std::str::FromStr;

use intra_core::{IntraError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Full,
    Rag,
    Intra,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Full, BenchMode::Rag, BenchMode::Intra];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Full => "full",
            BenchMode::Rag => "rag",
            BenchMode::Intra => "intra",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = IntraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "full-context" => Ok(BenchMode::Full),
            "rag" => Ok(BenchMode::Rag),
            "intra" => Ok(BenchMode::Intra),
            other => Err(IntraError::InvalidArgument(format!(
                "unknown bench mode {other:?} (expected full, rag or intra)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Pool size in chunks.
    pub m: u64,
    pub l_c: u64,
    pub l_q: u64,
    /// Retrieved chunks.
    pub k: u64,
    /// Generated tokens.
    pub l_g: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("M", self.m),
            ("L_c", self.l_c),
            ("L_q", self.l_q),
            ("L_g", self.l_g),
        ] {
            if v == 0 {
                return Err(IntraError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Corpus tokens `N = M · L_c`.
    pub fn n(&self) -> u64 {
        self.m * self.l_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub pre_query: f64,
    pub retrieval: f64,
    pub prefill: f64,
    pub generation: f64,
}

/// Unit counts per phase; retrieval scales as `√M · L_q · L_c`.
pub fn cost_model(p: &CostParams, mode: BenchMode) -> Result<Cost> {
    p.validate()?;
    let (m, l_c, l_q, k, l_g) = (
        p.m as f64,
        p.l_c as f64,
        p.l_q as f64,
        p.k as f64,
        p.l_g as f64,
    );
    let evidence = l_q + k * l_c;
    let corpus = l_q + m * l_c;
    Ok(match mode {
        BenchMode::Full => Cost {
            pre_query: 0.0,
            retrieval: 0.0,
            prefill: corpus * corpus,
            generation: l_g * (corpus + l_g),
        },
        BenchMode::Rag => Cost {
            pre_query: m * l_c * l_c,
            retrieval: m.sqrt() * l_q * l_c,
            prefill: evidence * evidence,
            generation: l_g * (evidence + l_g),
        },
        BenchMode::Intra => Cost {
            pre_query: m * l_c * l_c,
            retrieval: m.sqrt() * l_q * l_c,
            prefill: l_q * evidence,
            generation: l_g * (evidence + l_g),
        },
    })
}
