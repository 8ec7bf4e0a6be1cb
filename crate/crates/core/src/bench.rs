//! Wall-clock scaling of flow attention against quadratic softmax attention.
//! Only the attention call is timed; inputs are generated beforehand.

use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_attention, softmax_attention, FlowConfig};
use crate::params::{normal, Rng};

/// Score matrices above this many bytes are not attempted.
pub const DEFAULT_QUADRATIC_LIMIT_BYTES: usize = 2 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Flow,
    Softmax,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub d_v: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    pub quadratic_limit_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096],
            d: 64,
            d_v: 64,
            trials: 3,
            warmup: 1,
            seed: 0,
            quadratic_limit_bytes: DEFAULT_QUADRATIC_LIMIT_BYTES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Human-readable notes about skipped measurements.
    pub notices: Vec<String>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,n,mean_ms,std_ms\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.mechanism.as_str(), r.n, r.mean_ms, r.std_ms));
        }
        out
    }

    pub fn mean_ms(&self, mechanism: Mechanism, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mechanism == mechanism && r.n == n)
            .map(|r| r.mean_ms)
    }

    /// `time(last) / time(first)` over the lengths measured for `mechanism`.
    pub fn growth(&self, mechanism: Mechanism) -> Option<f64> {
        let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.mechanism == mechanism).collect();
        match (rows.first(), rows.last()) {
            (Some(a), Some(b)) if rows.len() >= 2 => Some(b.mean_ms / a.mean_ms),
            _ => None,
        }
    }
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times both mechanisms at `n = m` for every length, sequentially.
pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.trials == 0 {
        return Err(Error::contract("bench needs at least one trial"));
    }
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) || cfg.d == 0 || cfg.d_v == 0 {
        return Err(Error::contract("bench lengths and widths must be positive"));
    }
    if cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("bench lengths must be strictly ascending"));
    }
    let flow_cfg = FlowConfig::default();
    let mut report = BenchReport::default();
    let mut rng = Rng::seed_from_u64(cfg.seed);
    for &n in &cfg.lengths {
        let q = normal(&mut rng, &[n, cfg.d], 1.0);
        let k = normal(&mut rng, &[n, cfg.d], 1.0);
        let v = normal(&mut rng, &[n, cfg.d_v], 1.0);
        for mech in [Mechanism::Flow, Mechanism::Softmax] {
            if mech == Mechanism::Softmax && n.saturating_mul(n).saturating_mul(8) > cfg.quadratic_limit_bytes {
                report.notices.push(format!(
                    "skipping softmax at n={n}: the {n}x{n} score matrix exceeds the memory limit"
                ));
                continue;
            }
            let call = || match mech {
                Mechanism::Flow => flow_attention(&q, &k, &v, &flow_cfg),
                Mechanism::Softmax => softmax_attention(&q, &k, &v),
            };
            for _ in 0..cfg.warmup {
                std::hint::black_box(call()?);
            }
            let mut samples = Vec::with_capacity(cfg.trials);
            for _ in 0..cfg.trials {
                let start = Instant::now();
                std::hint::black_box(call()?);
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let (mean_ms, std_ms) = stats(&samples);
            report.rows.push(BenchRow {
                mechanism: mech,
                n,
                mean_ms,
                std_ms,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_rejected() {
        let cfg = BenchConfig {
            trials: 0,
            ..BenchConfig::default()
        };
        assert!(matches!(run(&cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn single_length_one_row_each() {
        let cfg = BenchConfig {
            lengths: vec![8],
            d: 4,
            d_v: 4,
            trials: 2,
            ..BenchConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.to_csv().starts_with("mechanism,n,mean_ms,std_ms\nflow,8,"));
    }

    #[test]
    fn huge_quadratic_is_skipped() {
        let cfg = BenchConfig {
            lengths: vec![16],
            d: 2,
            d_v: 2,
            trials: 1,
            quadratic_limit_bytes: 100,
            ..BenchConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.notices.len(), 1);
    }
}
