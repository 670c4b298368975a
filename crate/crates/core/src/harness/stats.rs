use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Why a test result did not come from the t distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// All differences equal and nonzero.
    ZeroVariance,
    /// All differences zero.
    NoDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// `±∞` or `0` when degenerate.
    pub t: f64,
    pub df: usize,
    /// Upper-tail probability of `t` (evidence that `a > b`).
    pub p: f64,
    pub degenerate: Option<Degeneracy>,
}

/// One-tailed paired t-test of `mean(a − b) > 0`.
pub fn paired_one_tailed_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "ttest",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::config("seeds", "the paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let largest = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if largest == 0.0 {
        return Ok(TTest {
            t: 0.0,
            df,
            p: 0.5,
            degenerate: Some(Degeneracy::NoDifference),
        });
    }
    // differences equal up to rounding count as constant
    if var.sqrt() <= 1e-12 * largest {
        return Ok(TTest {
            t: f64::INFINITY.copysign(mean),
            df,
            p: if mean > 0.0 { 0.0 } else { 1.0 },
            degenerate: Some(Degeneracy::ZeroVariance),
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p: dist.sf(t),
        degenerate: None,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Student t with 2 degrees of freedom has the closed-form upper tail
    /// `½(1 − t/√(t²+2))`.
    fn df2_tail(t: f64) -> f64 {
        0.5 * (1.0 - t / (t * t + 2.0).sqrt())
    }

    #[test]
    fn worked_example() {
        let r = paired_one_tailed_ttest(&[0.02, 0.01, 0.03], &[0.0; 3]).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-9);
        assert_eq!(r.df, 2);
        assert!((r.p - df2_tail(r.t)).abs() < 1e-9);
        assert!((r.p - 0.0371).abs() < 5e-4, "{}", r.p);
        assert_eq!(r.degenerate, None);
    }

    #[test]
    fn degenerate_inputs() {
        let r = paired_one_tailed_ttest(&[0.5, 0.7, 0.1], &[0.5, 0.7, 0.1]).unwrap();
        assert_eq!((r.p, r.degenerate), (0.5, Some(Degeneracy::NoDifference)));
        let r = paired_one_tailed_ttest(&[0.6, 0.8, 0.2], &[0.5, 0.7, 0.1]).unwrap();
        assert_eq!((r.p, r.degenerate), (0.0, Some(Degeneracy::ZeroVariance)));
        let r = paired_one_tailed_ttest(&[0.5, 0.7, 0.1], &[0.6, 0.8, 0.2]).unwrap();
        assert_eq!((r.p, r.degenerate), (1.0, Some(Degeneracy::ZeroVariance)));
        assert!(paired_one_tailed_ttest(&[1.0], &[0.0]).is_err());
        assert!(paired_one_tailed_ttest(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
