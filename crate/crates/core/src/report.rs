//! Multi-seed aggregation and long-format figure data.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named scalar metrics from one seed's analysis.
pub type MetricMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SeedAggregate {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let metric = metric.into();
        if values.is_empty() {
            return Err(Error::contract(format!("metric {metric} has no values")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "metric {metric} has non-finite value {v}"
            )));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding can push the mean a hair outside [min, max]
        let mean = (values.iter().sum::<f64>() / values.len() as f64).clamp(min, max);
        Ok(Self {
            metric,
            values,
            mean,
            min,
            max,
        })
    }
}

/// Per-metric mean, min and max across seeds. Every report must carry the
/// same metric keys.
///
/// ```
/// use factprobe::report::{aggregate_seeds, MetricMap};
/// let reports: Vec<MetricMap> = [0.2, 0.3, 0.4]
///     .iter()
///     .map(|v| [("reliability".to_string(), *v)].into())
///     .collect();
/// let agg = aggregate_seeds(&reports).unwrap();
/// assert!((agg[0].mean - 0.3).abs() < 1e-12);
/// assert_eq!((agg[0].min, agg[0].max), (0.2, 0.4));
/// ```
pub fn aggregate_seeds(reports: &[MetricMap]) -> Result<Vec<SeedAggregate>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("no seed reports to aggregate"))?;
    for (i, r) in reports.iter().enumerate().skip(1) {
        if !r.keys().eq(first.keys()) {
            let missing: Vec<&String> = first.keys().filter(|k| !r.contains_key(*k)).collect();
            let extra: Vec<&String> = r.keys().filter(|k| !first.contains_key(*k)).collect();
            return Err(Error::contract(format!(
                "report {i} metric keys differ from report 0: missing {missing:?}, extra {extra:?}"
            )));
        }
    }
    first
        .keys()
        .map(|k| SeedAggregate::from_values(k.clone(), reports.iter().map(|r| r[k]).collect()))
        .collect()
}

/// Aggregates for one configuration at one x-axis position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigurePoint {
    pub config: String,
    pub x: String,
    pub aggregates: Vec<SeedAggregate>,
}

/// Writes `config,x,metric,mean,min,max` rows, one per point and requested
/// metric. An empty `metrics` slice selects every metric of each point.
pub fn emit_figure_data<W: Write>(points: &[FigurePoint], metrics: &[&str], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config", "x", "metric", "mean", "min", "max"])?;
    for p in points {
        let chosen: Vec<&SeedAggregate> = if metrics.is_empty() {
            p.aggregates.iter().collect()
        } else {
            metrics
                .iter()
                .map(|m| {
                    p.aggregates.iter().find(|a| a.metric == *m).ok_or_else(|| {
                        Error::contract(format!("point {}@{} has no metric {m}", p.config, p.x))
                    })
                })
                .collect::<Result<_>>()?
        };
        for a in chosen {
            w.write_record([
                p.config.as_str(),
                p.x.as_str(),
                a.metric.as_str(),
                &a.mean.to_string(),
                &a.min.to_string(),
                &a.max.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn metrics(pairs: &[(&str, f64)]) -> MetricMap {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn single_seed_collapses() {
        let agg = aggregate_seeds(&[metrics(&[("a", 0.7)])]).unwrap();
        assert_eq!((agg[0].mean, agg[0].min, agg[0].max), (0.7, 0.7, 0.7));
    }

    #[test]
    fn key_mismatch_is_contract_error() {
        let err = aggregate_seeds(&[metrics(&[("a", 1.0)]), metrics(&[("b", 1.0)])]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn three_reports_hand_computed() {
        let reports = vec![
            metrics(&[("neg", 0.10), ("rel", 1.0)]),
            metrics(&[("neg", 0.25), ("rel", 0.5)]),
            metrics(&[("neg", 0.40), ("rel", 0.75)]),
        ];
        let agg = aggregate_seeds(&reports).unwrap();
        assert_eq!(agg[0].metric, "neg");
        assert!((agg[0].mean - 0.25).abs() < 1e-12);
        assert_eq!(agg[1].values, vec![1.0, 0.5, 0.75]);
        assert_eq!((agg[1].mean, agg[1].min, agg[1].max), (0.75, 0.5, 1.0));
    }

    #[test]
    fn empty_is_header_only() {
        let mut buf = Vec::new();
        emit_figure_data(&[], &["reliability"], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "config,x,metric,mean,min,max\n"
        );
    }

    #[test]
    fn six_configs_by_x() {
        let xs = ["1", "10", "50", "100", "500"];
        let mut points = Vec::new();
        for c in ["1UK", "P1", "P10", "HK1", "HK10", "X"] {
            for x in xs {
                let agg =
                    aggregate_seeds(&[metrics(&[("reliability", 1.0), ("other", 0.0)])]).unwrap();
                points.push(FigurePoint {
                    config: c.into(),
                    x: x.into(),
                    aggregates: agg,
                });
            }
        }
        let mut buf = Vec::new();
        emit_figure_data(&points, &["reliability"], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + 6 * xs.len()
        );
        assert!(emit_figure_data(&points, &["missing"], Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn mean_between_min_and_max(values in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let a = SeedAggregate::from_values("m", values).unwrap();
            prop_assert!(a.min <= a.mean && a.mean <= a.max);
        }
    }
}
