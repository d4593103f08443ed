use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use super::{baseline_beam_decode, beam_decode, DecodeConfig};
use crate::model::{BaselineModel, InsertionModel, Model, Result};
use crate::trajectory::TokenId;

/// Mean decoding wall time of one model for one output length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub length_bin: usize,
    pub model: String,
    pub mean_ms: f64,
    pub n: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "length_bin,model,mean_ms,n";

    pub fn to_csv(&self) -> String {
        format!("{},{},{:.4},{}", self.length_bin, self.model, self.mean_ms, self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub insertion_slope: f64,
    pub baseline_slope: f64,
    pub slope_difference: f64,
    /// Half-width of a 95% interval on the slope difference.
    pub slope_difference_ci: f64,
    /// Mean over bins of insertion time divided by baseline time.
    pub mean_time_ratio: f64,
}

/// Least-squares slope of `ln y` on `ln x` and its standard error.
pub fn fit_log_log_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if points.len() < 3 {
        return (slope, f64::NAN);
    }
    let icept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icept - slope * x).powi(2)).sum();
    (slope, (rss / (n - 2.0) / sxx).sqrt())
}

/// Times forced-length beam decodes of both models: every source is decoded
/// once per length with exactly that many insertions.
pub fn bench_decode(
    insertion: &InsertionModel,
    baseline: &BaselineModel,
    sources: &[Vec<TokenId>],
    lengths: &[usize],
    beam: usize,
) -> Result<(Vec<BenchRow>, BenchSummary)> {
    for &len in lengths {
        crate::model::check_len("forced output", len + 1, insertion.config().max_len)?;
        crate::model::check_len("forced output", len + 1, baseline.config().max_len)?;
    }
    if let (Some(src), Some(&len)) = (sources.first(), lengths.first()) {
        // Untimed warm-up.
        let mut cfg = DecodeConfig::new(beam, len + 1);
        cfg.force_insertions = Some(len);
        beam_decode(insertion, src, &cfg)?;
        baseline_beam_decode(baseline, src, &cfg)?;
    }
    let mut rows = Vec::new();
    let mut times: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for &len in lengths {
        let mut cfg = DecodeConfig::new(beam, len + 1);
        cfg.force_insertions = Some(len);
        let mut total = (0.0, 0.0);
        for src in sources {
            let t = Instant::now();
            beam_decode(insertion, src, &cfg)?;
            total.0 += t.elapsed().as_secs_f64() * 1e3;
            let t = Instant::now();
            baseline_beam_decode(baseline, src, &cfg)?;
            total.1 += t.elapsed().as_secs_f64() * 1e3;
        }
        let n = sources.len();
        let mean = (total.0 / n as f64, total.1 / n as f64);
        for (name, ms) in [
            (crate::model::ModelKind::Insertion, mean.0),
            (crate::model::ModelKind::Baseline, mean.1),
        ] {
            rows.push(BenchRow {
                length_bin: len,
                model: name.name().to_string(),
                mean_ms: ms,
                n,
            });
        }
        times.insert(len, mean);
    }
    let ins: Vec<(f64, f64)> = times.iter().map(|(&l, t)| (l as f64, t.0)).collect();
    let base: Vec<(f64, f64)> = times.iter().map(|(&l, t)| (l as f64, t.1)).collect();
    let (si, ei) = fit_log_log_slope(&ins);
    let (sb, eb) = fit_log_log_slope(&base);
    let ratio = times.values().map(|t| t.0 / t.1).sum::<f64>() / times.len() as f64;
    Ok((
        rows,
        BenchSummary {
            insertion_slope: si,
            baseline_slope: sb,
            slope_difference: si - sb,
            slope_difference_ci: 1.96 * (ei * ei + eb * eb).sqrt(),
            mean_time_ratio: ratio,
        },
    ))
}
