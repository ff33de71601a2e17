//! Rank correlation for trend reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, OrderStatistics, RankTieBreaker, Statistics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// Spearman rank correlation.
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    Data::new(v.to_vec()).ranks(RankTieBreaker::Average)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (sx, sy) = (x.std_dev(), y.std_dev());
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    x.covariance(y) / (sx * sy)
}

/// `None` with fewer than three pairs or mismatched lengths.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<Trend> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let rho = pearson(&ranks(x), &ranks(y)).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Some(Trend { rho, p_value, n })
}
