//! Depth error metrics and the frame-averaging baseline.

use std::fmt;

use thiserror::Error;

use crate::depth_io::{DepthKind, DepthMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("no pixel is valid in both prediction and ground truth")]
    NoOverlap,
    #[error("no reports to aggregate")]
    Empty,
}

/// Errors over pixels valid in both maps. Depth errors are in millimeters,
/// inverse-depth errors in 1/km.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub valid_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "rmse_mm,mae_mm,irmse_per_km,imae_per_km,valid_count";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.rmse, self.mae, self.irmse, self.imae, self.valid_count
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.rmse, self.mae, self.irmse, self.imae].iter().all(|v| v.is_finite())
    }

    /// Per-sample mean of each metric; `valid_count` is summed.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            rmse: avg(|r| r.rmse),
            mae: avg(|r| r.mae),
            irmse: avg(|r| r.irmse),
            imae: avg(|r| r.imae),
            valid_count: reports.iter().map(|r| r.valid_count).sum(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>14}", "metric", "value")?;
        writeln!(f, "{:<14}{:>14.3}", "RMSE [mm]", self.rmse)?;
        writeln!(f, "{:<14}{:>14.3}", "MAE [mm]", self.mae)?;
        writeln!(f, "{:<14}{:>14.3}", "iRMSE [1/km]", self.irmse)?;
        writeln!(f, "{:<14}{:>14.3}", "iMAE [1/km]", self.imae)?;
        write!(f, "{:<14}{:>14}", "pixels", self.valid_count)
    }
}

pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport, EvalError> {
    let dims = (pred.width(), pred.height());
    if dims != (gt.width(), gt.height()) {
        return Err(EvalError::ShapeMismatch {
            pred: dims,
            gt: (gt.width(), gt.height()),
        });
    }
    let (mut se, mut ae, mut ise, mut iae) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for y in 0..dims.1 {
        for x in 0..dims.0 {
            if let (Some(p), Some(g)) = (pred.get(x, y), gt.get(x, y)) {
                let d = (p - g) * 1000.0;
                let inv = (1.0 / p - 1.0 / g) * 1000.0;
                se += d * d;
                ae += d.abs();
                ise += inv * inv;
                iae += inv.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(EvalError::NoOverlap);
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse: (se / nf).sqrt(),
        mae: ae / nf,
        irmse: (ise / nf).sqrt(),
        imae: iae / nf,
        valid_count: n,
    })
}

/// Averages the two neighboring frames pixel by pixel, ignoring motion.
/// Where only one frame is valid its value is used.
pub fn traditional_interpolate(d_prev: &DepthMap, d_next: &DepthMap) -> Result<DepthMap, EvalError> {
    let dims = (d_prev.width(), d_prev.height());
    if dims != (d_next.width(), d_next.height()) {
        return Err(EvalError::ShapeMismatch {
            pred: dims,
            gt: (d_next.width(), d_next.height()),
        });
    }
    let kind = if d_prev.kind() == DepthKind::Dense && d_next.kind() == DepthKind::Dense {
        DepthKind::Dense
    } else {
        DepthKind::Sparse
    };
    let out = DepthMap::from_fn(dims.0, dims.1, kind, |x, y| match (d_prev.get(x, y), d_next.get(x, y)) {
        (Some(a), Some(b)) => Some(0.5 * a + 0.5 * b),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    });
    Ok(out.expect("mean of valid depths is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[Option<f64>]) -> DepthMap {
        DepthMap::from_fn(values.len(), 1, DepthKind::Sparse, |x, _| values[x]).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let d = row(&[Some(2.0), None, Some(7.0)]);
        let r = evaluate(&d, &d).unwrap();
        assert_eq!((r.rmse, r.mae, r.irmse, r.imae, r.valid_count), (0.0, 0.0, 0.0, 0.0, 2));
    }

    #[test]
    fn hand_computed_report() {
        let gt = row(&[Some(2.0), Some(4.0)]);
        let pred = row(&[Some(3.0), Some(4.0)]);
        let r = evaluate(&pred, &gt).unwrap();
        // One pixel off by 1 m; its inverse depths differ by 1/6 1/m.
        let inv = 1000.0 / 6.0;
        assert!((r.mae - 500.0).abs() < 1e-9);
        assert!((r.rmse - (1e6f64 / 2.0).sqrt()).abs() < 1e-9);
        assert!((r.imae - inv / 2.0).abs() < 1e-9);
        assert!((r.irmse - (inv * inv / 2.0).sqrt()).abs() < 1e-9);
        assert!((r.rmse - 707.106).abs() < 1e-3 && (r.irmse - 117.851).abs() < 1e-3);
    }

    #[test]
    fn only_jointly_valid_pixels_count() {
        let gt = row(&[Some(2.0), None, Some(5.0)]);
        let pred = row(&[None, Some(1.0), Some(6.0)]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.valid_count, 1);
        assert!((r.mae - 1000.0).abs() < 1e-9);
        assert_eq!(evaluate(&row(&[None]), &row(&[Some(1.0)])), Err(EvalError::NoOverlap));
    }

    #[test]
    fn averaging_baseline() {
        let a = row(&[Some(4.0), Some(1.0), None, None]);
        let b = row(&[Some(6.0), None, Some(3.0), None]);
        let m = traditional_interpolate(&a, &b).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 0), m.get(2, 0), m.get(3, 0)), (Some(5.0), Some(1.0), Some(3.0), None));
        assert_eq!(traditional_interpolate(&a, &a).unwrap(), a);
    }

    #[test]
    fn csv_and_table() {
        let r = MetricReport {
            rmse: 1.5,
            mae: 1.0,
            irmse: 0.25,
            imae: 0.125,
            valid_count: 7,
        };
        assert_eq!(r.csv_line(), "1.5,1,0.25,0.125,7");
        assert!(r.to_string().contains("RMSE [mm]"));
        let m = MetricReport::mean(&[r, MetricReport { rmse: 2.5, ..r }]).unwrap();
        assert_eq!((m.rmse, m.valid_count), (2.0, 14));
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..20).prop_flat_map(|n| (prop::collection::vec(1.0f64..50.0, n), prop::collection::vec(-0.9f64..0.9, n)))
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae((gt, err) in pair()) {
            let g = row(&gt.iter().map(|&v| Some(v)).collect::<Vec<_>>());
            let p = row(&gt.iter().zip(&err).map(|(&v, &e)| Some(v + e)).collect::<Vec<_>>());
            let r = evaluate(&p, &g).unwrap();
            prop_assert!(r.rmse >= r.mae * (1.0 - 1e-12));
            prop_assert!(r.irmse >= r.imae * (1.0 - 1e-12));
        }

        #[test]
        fn error_sign_does_not_matter((gt, err) in pair()) {
            let g = row(&gt.iter().map(|&v| Some(v)).collect::<Vec<_>>());
            let plus = row(&gt.iter().zip(&err).map(|(&v, &e)| Some(v + e)).collect::<Vec<_>>());
            let minus = row(&gt.iter().zip(&err).map(|(&v, &e)| Some(v - e)).collect::<Vec<_>>());
            let a = evaluate(&plus, &g).unwrap();
            let b = evaluate(&minus, &g).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() <= 1e-9 * a.rmse.max(1.0));
            prop_assert!((a.mae - b.mae).abs() <= 1e-9 * a.mae.max(1.0));
        }

        #[test]
        fn scaling_scales_metrics((gt, err) in pair(), alpha in 0.5f64..2.0) {
            let g = row(&gt.iter().map(|&v| Some(v)).collect::<Vec<_>>());
            let p = row(&gt.iter().zip(&err).map(|(&v, &e)| Some(v + e)).collect::<Vec<_>>());
            let gs = row(&gt.iter().map(|&v| Some(v * alpha)).collect::<Vec<_>>());
            let ps = row(&gt.iter().zip(&err).map(|(&v, &e)| Some((v + e) * alpha)).collect::<Vec<_>>());
            let a = evaluate(&p, &g).unwrap();
            let b = evaluate(&ps, &gs).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1e-6);
            prop_assert!(close(b.rmse, a.rmse * alpha) && close(b.mae, a.mae * alpha));
            prop_assert!(close(b.irmse, a.irmse / alpha) && close(b.imae, a.imae / alpha));
        }
    }
}
