//! Aggregation across seeds and the paired comparison test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GppError, Result};
use crate::harness::episode::EpisodeResult;

/// Mean and standard error (sample deviation over `√k`; 0 for one value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub mean_total_reward: f64,
    pub se_total_reward: f64,
    pub mean_max_reward: f64,
    pub se_max_reward: f64,
    pub mean_tree_nodes: f64,
    pub se_tree_nodes: f64,
}

/// Per-step statistics of cumulative reward, running maximum reward and
/// cumulative tree size.
pub fn aggregate(results: &[EpisodeResult]) -> Result<Vec<StepSummary>> {
    let first = results
        .first()
        .ok_or_else(|| GppError::InvalidParam("nothing to aggregate".into()))?;
    let steps = first.steps.len();
    if results.iter().any(|r| r.steps.len() != steps) {
        return Err(GppError::InvalidParam("episodes differ in length".into()));
    }
    Ok((0..steps)
        .map(|t| {
            let col = |f: &dyn Fn(&EpisodeResult) -> f64| -> (f64, f64) {
                mean_se(&results.iter().map(f).collect::<Vec<_>>())
            };
            let (mean_total_reward, se_total_reward) = col(&|r| r.steps[t].cum_reward);
            let (mean_max_reward, se_max_reward) = col(&|r| r.steps[t].max_reward);
            let (mean_tree_nodes, se_tree_nodes) = col(&|r| r.steps[t].cum_tree_nodes as f64);
            StepSummary {
                step: t + 1,
                mean_total_reward,
                se_total_reward,
                mean_max_reward,
                se_max_reward,
                mean_tree_nodes,
                se_tree_nodes,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_value: f64,
}

pub fn paired_one_sided_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(GppError::InvalidParam(
            "paired test needs two equal-length samples of size >= 2".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, se) = mean_se(&diffs);
    let df = (diffs.len() - 1) as f64;
    let (t, p) = if se == 0.0 {
        let t = if mean > 0.0 {
            f64::INFINITY
        } else if mean < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        (t, if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| GppError::Numeric(e.to_string()))?;
        (t, dist.sf(t))
    };
    Ok(PairedTest {
        mean_difference: mean,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_against_hand_values() {
        // values 1..=5: mean 3, sample variance 2.5, se = sqrt(0.5)
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((se - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[4.0]), (4.0, 0.0));
        assert_eq!(mean_se(&[1.0, 3.0]).0, 2.0);
    }

    #[test]
    fn t_test_reference_value() {
        // diffs 1, 2, 3: mean 2, se 1/√3, t = 2√3, df = 2; one-sided p for
        // t = 3.4641016 with 2 dof is 0.0370...
        let r = paired_one_sided_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t_statistic - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let t = r.t_statistic;
        let exact = 0.5 * (1.0 - t / (2.0 + t * t).sqrt());
        assert!((r.p_value - exact).abs() < 1e-12, "{} vs {exact}", r.p_value);
        assert!(paired_one_sided_t_test(&[1.0], &[0.0]).is_err());
        assert_eq!(paired_one_sided_t_test(&[2.0, 2.0], &[1.0, 1.0]).unwrap().p_value, 0.0);
    }
}
