use serde::{Deserialize, Serialize};

use crate::archive::Module;
use crate::error::{Error, Result};

/// Labels closer to zero than this are left out of the percentage error.
pub const MAPE_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    pub r_squared: f64,
    pub mape_percent: f64,
    /// Labels excluded from the percentage error for being (near) zero.
    pub mape_excluded: usize,
}

/// MSE, MAE, R^2 and MAPE of `preds` against `labels`.
///
/// R^2 uses the sample mean of the labels; when the labels have no spread it
/// is 1 for a perfect fit and 0 otherwise. MAPE divides by `|y|`.
pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "regression_metrics",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("regression_metrics"));
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let (mut sse, mut sae, mut sst, mut ape) = (0.0, 0.0, 0.0, 0.0);
    let mut excluded = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        let e = y - p;
        sse += e * e;
        sae += e.abs();
        sst += (y - mean) * (y - mean);
        if y.abs() < MAPE_EPSILON {
            excluded += 1;
        } else {
            ape += e.abs() / y.abs();
        }
    }
    let r_squared = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    let kept = labels.len() - excluded;
    if excluded > 0 {
        log::warn!("{excluded} near-zero labels left out of MAPE");
    }
    Ok(RegressionMetrics {
        count: labels.len(),
        mse: sse / n,
        mae: sae / n,
        r_squared,
        mape_percent: if kept > 0 { 100.0 * ape / kept as f64 } else { 0.0 },
        mape_excluded: excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigMetrics {
    pub config: usize,
    #[serde(flatten)]
    pub metrics: RegressionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub module: Module,
    #[serde(flatten)]
    pub overall: RegressionMetrics,
    pub per_config: Vec<ConfigMetrics>,
}

impl RegressionReport {
    /// Overall and per-config metrics from `(config, prediction, label)` rows.
    pub fn from_rows(module: Module, rows: &[(usize, f64, f64)]) -> Result<Self> {
        let split = |sel: &dyn Fn(usize) -> bool| -> (Vec<f64>, Vec<f64>) {
            rows.iter().filter(|r| sel(r.0)).map(|r| (r.1, r.2)).unzip()
        };
        let (p, y) = split(&|_| true);
        let overall = regression_metrics(&p, &y)?;
        let mut configs: Vec<usize> = rows.iter().map(|r| r.0).collect();
        configs.sort_unstable();
        configs.dedup();
        let per_config = configs
            .into_iter()
            .map(|c| {
                let (p, y) = split(&|x| x == c);
                Ok(ConfigMetrics {
                    config: c,
                    metrics: regression_metrics(&p, &y)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegressionReport {
            module,
            overall,
            per_config,
        })
    }
}
