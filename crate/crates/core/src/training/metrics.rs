use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets at or below this magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mse,
    Mae,
    Rrse,
    Mape,
    Nll,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mse, Metric::Mae, Metric::Rrse, Metric::Mape, Metric::Nll];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::Rrse => "rrse",
            Metric::Mape => "mape",
            Metric::Nll => "nll",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown metric `{s}` (expected mse, mae, rrse, mape or nll)")))
    }
}

/// One metric over the observed cells of equally sized slices.
pub fn compute_metric(metric: Metric, mean: &[f64], std: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    let n = target.len();
    if mean.len() != n || std.len() != n || mask.len() != n {
        return Err(Error::dims("compute_metric", &[mean.len(), std.len()], &[target.len(), mask.len()]));
    }
    let cells: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if cells.is_empty() {
        return Err(Error::Numeric("every target cell is masked".into()));
    }
    let count = cells.len() as f64;
    let err = |i: usize| mean[i] - target[i];
    Ok(match metric {
        Metric::Mse => cells.iter().map(|&i| err(i).powi(2)).sum::<f64>() / count,
        Metric::Mae => cells.iter().map(|&i| err(i).abs()).sum::<f64>() / count,
        Metric::Rrse => {
            let y_bar = cells.iter().map(|&i| target[i]).sum::<f64>() / count;
            let spread: f64 = cells.iter().map(|&i| (target[i] - y_bar).powi(2)).sum();
            if spread == 0.0 {
                return Err(Error::Numeric("RRSE undefined: observed targets are constant".into()));
            }
            (cells.iter().map(|&i| err(i).powi(2)).sum::<f64>() / spread).sqrt()
        }
        Metric::Mape => {
            let valid: Vec<usize> = cells.iter().copied().filter(|&i| target[i].abs() > MAPE_FLOOR).collect();
            if valid.is_empty() {
                return Err(Error::Numeric("MAPE undefined: every observed target is zero".into()));
            }
            100.0 * valid.iter().map(|&i| (err(i) / target[i]).abs()).sum::<f64>() / valid.len() as f64
        }
        Metric::Nll => {
            let ln_2pi = (2.0 * std::f64::consts::PI).ln();
            cells
                .iter()
                .map(|&i| {
                    let var = std[i] * std[i];
                    0.5 * (ln_2pi + var.ln()) + err(i).powi(2) / (2.0 * var)
                })
                .sum::<f64>()
                / count
        }
    })
}

/// All five metrics in data units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub rrse: f64,
    pub mape: f64,
    pub nll: f64,
}

impl MetricReport {
    pub fn compute(mean: &[f64], std: &[f64], target: &[f64], mask: &[bool]) -> Result<Self> {
        let m = |metric| compute_metric(metric, mean, std, target, mask);
        Ok(Self {
            mse: m(Metric::Mse)?,
            mae: m(Metric::Mae)?,
            rrse: m(Metric::Rrse)?,
            mape: m(Metric::Mape)?,
            nll: m(Metric::Nll)?,
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Mse => self.mse,
            Metric::Mae => self.mae,
            Metric::Rrse => self.rrse,
            Metric::Mape => self.mape,
            Metric::Nll => self.nll,
        }
    }

    /// `name=value` lines in metric order.
    pub fn to_key_values(&self) -> String {
        Metric::ALL.iter().map(|&m| format!("{}={}\n", m.name(), self.get(m))).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_fit_scores_zero() {
        let y = [1.0, -2.0, 3.0];
        let r = MetricReport::compute(&y, &[1.0; 3], &y, &[true; 3]).unwrap();
        assert_eq!((r.mse, r.mae, r.rrse, r.mape), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn mean_predictor_has_unit_rrse() {
        let y = [1.0, 2.0, 6.0];
        let r = compute_metric(Metric::Rrse, &[3.0; 3], &[1.0; 3], &y, &[true; 3]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nll_at_unit_scale_is_half_log_two_pi() {
        let y = [0.3, -1.0];
        let r = compute_metric(Metric::Nll, &y, &[1.0; 2], &y, &[true; 2]).unwrap();
        assert!((r - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn mape_single_cell() {
        let r = compute_metric(Metric::Mape, &[110.0], &[1.0], &[100.0], &[true]).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn mape_skips_zero_targets() {
        let r = compute_metric(Metric::Mape, &[5.0, 110.0], &[1.0; 2], &[0.0, 100.0], &[true; 2]).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(compute_metric(Metric::Mse, &[1.0], &[1.0], &[1.0], &[false]).is_err());
        let e = compute_metric(Metric::Rrse, &[1.0, 2.0], &[1.0; 2], &[4.0, 4.0], &[true; 2]).unwrap_err();
        assert!(e.to_string().contains("constant"));
    }

    proptest! {
        #[test]
        fn masked_cells_are_ignored(
            cells in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..3.0, any::<bool>()), 2..30),
            junk in -100.0f64..100.0,
        ) {
            let mean: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let target: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let std: Vec<f64> = cells.iter().map(|c| c.2).collect();
            let mut mask: Vec<bool> = cells.iter().map(|c| c.3).collect();
            mask[0] = true;
            mask[1] = true;
            let mut target2 = target.clone();
            let mut mean2 = mean.clone();
            for i in 0..mask.len() {
                if !mask[i] {
                    target2[i] = junk;
                    mean2[i] = -junk;
                }
            }
            for m in [Metric::Mse, Metric::Mae, Metric::Nll] {
                prop_assert_eq!(
                    compute_metric(m, &mean, &std, &target, &mask).unwrap(),
                    compute_metric(m, &mean2, &std, &target2, &mask).unwrap()
                );
            }
        }

        #[test]
        fn mae_scales_with_a_shared_std(
            cells in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..20),
            mu in -10.0f64..10.0,
            sigma in 0.1f64..10.0,
        ) {
            let mean: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let target: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let ones = vec![1.0; mean.len()];
            let mask = vec![true; mean.len()];
            let raw = |v: &[f64]| v.iter().map(|x| x * sigma + mu).collect::<Vec<_>>();
            let standardized = compute_metric(Metric::Mae, &mean, &ones, &target, &mask).unwrap();
            let destandardized = compute_metric(Metric::Mae, &raw(&mean), &ones, &raw(&target), &mask).unwrap();
            prop_assert!((standardized * sigma - destandardized).abs() <= 1e-9 * destandardized.max(1.0));
        }
    }
}
