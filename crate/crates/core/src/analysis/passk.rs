use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Unbiased pass@k estimate: the probability that a uniformly drawn
/// k-subset of `n` samples, `c` of them correct, contains a correct one.
///
/// Evaluates `1 - C(n-c, k) / C(n, k)` as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`,
/// which never forms large binomials.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, AnalysisError> {
    if c > n || k == 0 || k > n {
        return Err(AnalysisError::Domain { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: u64,
    pub pass_at_k: f64,
}

/// pass@k for one problem (an abstraction), treating each implementation as a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub abstraction_id: String,
    pub samples: u64,
    pub correct: u64,
    pub correct_ids: Vec<String>,
    pub results: Vec<PassAtK>,
}

impl BenchmarkReport {
    /// Builds the report for every requested `k` that does not exceed the sample count.
    pub fn new(abstraction_id: &str, correct_ids: Vec<String>, samples: u64, ks: &[u64]) -> Result<Self, AnalysisError> {
        let correct = correct_ids.len() as u64;
        let mut results = Vec::new();
        for &k in ks.iter().filter(|&&k| k <= samples) {
            results.push(PassAtK {
                k,
                pass_at_k: pass_at_k(samples, correct, k)?,
            });
        }
        Ok(BenchmarkReport {
            abstraction_id: abstraction_id.to_string(),
            samples,
            correct,
            correct_ids,
            results,
        })
    }
}
