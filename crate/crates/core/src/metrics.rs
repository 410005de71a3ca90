//! Evaluation metrics, weight-norm heatmaps, and CSV artifact export.
//!
//! All CSV files are comma-separated with a header row, UTF-8, LF line
//! endings. Floats are written with 17 significant digits so re-parsing
//! reproduces the exact values.

use std::fs;
use std::path::Path;

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::nn::{GradientSet, ModelParams};
use crate::wdr;

/// Matrix of final-layer row norms: one row per model, one column per class.
#[derive(Debug, Clone)]
pub struct NormHeatmap {
    pub matrix: Vec<Vec<f64>>,
    /// Name of the row dimension in exports ("client" or "model").
    pub row_header: String,
}

/// One row of a lambda sweep table.
#[derive(Debug, Clone)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub best_mean_accuracy: f64,
    pub best_round: usize,
    pub mean_final_omega: f64,
}

/// Highest mean test accuracy across the trace and the first trace position
/// attaining it.
pub fn best_mean_accuracy(trace: &[RoundReport]) -> Result<(f64, usize)> {
    if trace.is_empty() {
        return Err(Error::Argument("accuracy trace is empty".into()));
    }
    let mut best = trace[0].mean_accuracy;
    let mut at = 0;
    for (i, report) in trace.iter().enumerate().skip(1) {
        if report.mean_accuracy > best {
            best = report.mean_accuracy;
            at = i;
        }
    }
    Ok((best, at))
}

/// Final-layer row norms for a set of architecture-identical models.
pub fn norm_heatmap(models: &[ModelParams], row_header: &str) -> Result<NormHeatmap> {
    if models.is_empty() {
        return Err(Error::Argument("no models to map".into()));
    }
    if models.iter().any(|m| !m.same_architecture(&models[0])) {
        return Err(Error::Shape(
            "heatmap models must share one architecture".into(),
        ));
    }
    Ok(NormHeatmap {
        matrix: models
            .iter()
            .map(|m| wdr::final_layer_norms(m).norms)
            .collect(),
        row_header: row_header.to_string(),
    })
}

fn normalize_rows(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut flat = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::UndefinedCorrelation(format!("row {i} sums to zero")));
        }
        flat.extend(row.iter().map(|&v| v / sum));
    }
    Ok(flat)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 1e-24 || vy <= 1e-24 {
        return Err(Error::UndefinedCorrelation(
            "a matrix is constant after normalization".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// How closely the norm pattern tracks the data pattern: Pearson correlation
/// of the row-normalized matrices, flattened. Rows are normalized by their
/// sums so large clients do not dominate the comparison.
pub fn pattern_correlation(norms: &NormHeatmap, data_counts: &[Vec<usize>]) -> Result<f64> {
    if norms.matrix.len() != data_counts.len()
        || norms
            .matrix
            .iter()
            .zip(data_counts)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Shape(
            "norm and count matrices must have matching dimensions".into(),
        ));
    }
    let counts_f: Vec<Vec<f64>> = data_counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64).collect())
        .collect();
    let x = normalize_rows(&norms.matrix)?;
    let y = normalize_rows(&counts_f)?;
    pearson(&x, &y)
}

/// Log-ratio residuals between squared final-layer gradient-row norms and
/// squared class counts: `ln(|g_j|^2 / |g_k|^2) - ln(n_j^2 / n_k^2)`.
///
/// Entries are `None` when a count or gradient row is zero. This is a
/// logged diagnostic of an approximate relationship, never asserted.
pub fn gradient_norm_ratio_diagnostic(
    grads: &GradientSet,
    counts: &[usize],
) -> Result<Vec<Vec<Option<f64>>>> {
    let layer = grads
        .layers
        .last()
        .ok_or_else(|| Error::Shape("empty gradient set".into()))?;
    let k = layer.out_dim;
    if counts.len() != k {
        return Err(Error::Shape(format!(
            "{} counts for {k} gradient rows",
            counts.len()
        )));
    }
    let row_norms: Vec<f64> = (0..k)
        .map(|j| layer.row(j).iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect();
    let mut residuals = vec![vec![None; k]; k];
    for j in 0..k {
        for l in 0..k {
            if j == l {
                residuals[j][l] = Some(0.0);
                continue;
            }
            if counts[j] == 0 || counts[l] == 0 || row_norms[j] == 0.0 || row_norms[l] == 0.0 {
                continue;
            }
            let grad_term = 2.0 * (row_norms[j].ln() - row_norms[l].ln());
            let count_term = 2.0 * ((counts[j] as f64).ln() - (counts[l] as f64).ln());
            residuals[j][l] = Some(grad_term - count_term);
        }
    }
    Ok(residuals)
}

/// Formats a float with 17 significant digits; parsing the result recovers
/// the exact value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content.as_bytes())?;
    Ok(())
}

/// `accuracy_trace.csv`: round, one column per client, mean.
pub fn write_accuracy_trace(path: &Path, trace: &[RoundReport]) -> Result<()> {
    write_per_round_trace(path, trace, |r| (&r.accuracy, r.mean_accuracy))
}

/// `omega_trace.csv`: round, one column per client, mean.
pub fn write_omega_trace(path: &Path, trace: &[RoundReport]) -> Result<()> {
    write_per_round_trace(path, trace, |r| (&r.omega, r.mean_omega))
}

fn write_per_round_trace(
    path: &Path,
    trace: &[RoundReport],
    select: impl Fn(&RoundReport) -> (&Vec<f64>, f64),
) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Argument("trace is empty".into()));
    }
    let clients = select(&trace[0]).0.len();
    let mut out = String::from("round");
    for i in 0..clients {
        out.push_str(&format!(",client_{i}"));
    }
    out.push_str(",mean\n");
    for report in trace {
        let (values, mean) = select(report);
        out.push_str(&report.round.to_string());
        for v in values {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_f64(mean));
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// `norm_heatmap_*.csv`: one row per model, one column per class.
pub fn write_norm_heatmap(path: &Path, heatmap: &NormHeatmap) -> Result<()> {
    let cols = heatmap.matrix.first().map_or(0, Vec::len);
    let mut out = heatmap.row_header.clone();
    for j in 0..cols {
        out.push_str(&format!(",class_{j}"));
    }
    out.push('\n');
    for (i, row) in heatmap.matrix.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// `data_distribution.csv`: long-form partition manifest, one row per
/// (client, class) pair.
pub fn write_data_distribution(path: &Path, clients: &[ClientDataset]) -> Result<()> {
    let mut out = String::from("client_id,class_id,train_count,test_count\n");
    for client in clients {
        let test_counts = client.test.class_counts();
        for (class_id, (&train, &test)) in client.class_counts.iter().zip(&test_counts).enumerate()
        {
            out.push_str(&format!("{},{class_id},{train},{test}\n", client.client_id));
        }
    }
    write_atomic(path, &out)
}

/// `lambda_sweep.csv`: one row per penalty weight, sorted by lambda.
pub fn write_lambda_sweep(path: &Path, rows: &[LambdaSweepRow]) -> Result<()> {
    let mut out = String::from("lambda,best_mean_accuracy,best_round,mean_final_omega\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(row.lambda),
            fmt_f64(row.best_mean_accuracy),
            row.best_round,
            fmt_f64(row.mean_final_omega)
        ));
    }
    write_atomic(path, &out)
}

/// `omega_batch_trace.csv`: per-mini-batch WDR distances recorded during
/// round 1, one row per (client, batch).
pub fn write_batch_omega(path: &Path, per_client: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut out = String::from("client_id,batch,omega\n");
    for (client, omegas) in per_client {
        for (b, omega) in omegas.iter().enumerate() {
            out.push_str(&format!("{client},{b},{}\n", fmt_f64(*omega)));
        }
    }
    write_atomic(path, &out)
}

/// Parses a CSV written by this module back into header and string cells.
pub fn parse_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            field: "csv".into(),
            reason: "empty file".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::federation::RoundReport;
    use crate::nn::init_params;

    fn report(round: usize, accs: Vec<f64>) -> RoundReport {
        let mean_accuracy = accs.iter().sum::<f64>() / accs.len() as f64;
        RoundReport {
            round,
            omega: accs.iter().map(|a| 1.0 - a).collect(),
            mean_omega: 1.0 - mean_accuracy,
            accuracy: accs,
            mean_accuracy,
            wall_secs: 0.0,
            uploaded_params: 0,
            downloaded_params: 0,
            warnings: Vec::new(),
            batch_omega: Vec::new(),
        }
    }

    #[test]
    fn best_mean_accuracy_examples() {
        let trace = vec![
            report(1, vec![0.5, 0.5]),
            report(2, vec![0.9, 0.9]),
            report(3, vec![0.8, 0.8]),
        ];
        let (best, at) = best_mean_accuracy(&trace).unwrap();
        assert!((best - 0.9).abs() < 1e-15);
        assert_eq!(at, 1);

        let constant = vec![report(1, vec![0.7]), report(2, vec![0.7])];
        let (best, at) = best_mean_accuracy(&constant).unwrap();
        assert!((best - 0.7).abs() < 1e-15);
        assert_eq!(at, 0);

        assert!(matches!(best_mean_accuracy(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn best_matches_naive_max_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let trace: Vec<RoundReport> = (0..rng.random_range(1..30))
                .map(|r| report(r + 1, vec![rng.random()]))
                .collect();
            let (best, at) = best_mean_accuracy(&trace).unwrap();
            let naive = trace
                .iter()
                .map(|r| r.mean_accuracy)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(best, naive);
            assert!(trace[..at].iter().all(|r| r.mean_accuracy < best));
        }
    }

    #[test]
    fn heatmap_rows_are_final_layer_norms() {
        let mut zero = init_params(&[3, 4, 2], 0).unwrap();
        zero.final_layer_mut()
            .weights
            .iter_mut()
            .for_each(|w| *w = 0.0);
        let mut known = init_params(&[3, 4, 2], 0).unwrap();
        known
            .final_layer_mut()
            .row_mut(0)
            .copy_from_slice(&[3.0, 0.0, 0.0, 0.0]);
        known
            .final_layer_mut()
            .row_mut(1)
            .copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);

        let map = norm_heatmap(&[zero, known.clone()], "client").unwrap();
        assert_eq!(map.matrix[0], vec![0.0, 0.0]);
        assert!((map.matrix[1][0] - 3.0).abs() < 1e-12);
        assert!((map.matrix[1][1] - 1.0).abs() < 1e-12);

        // independent recomputation
        let layer = known.final_layer();
        for (j, &v) in map.matrix[1].iter().enumerate() {
            let direct = layer.row(j).iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_of_proportional_matrices_is_one() {
        let counts = vec![vec![30usize, 10, 0], vec![0, 5, 15]];
        let norms = NormHeatmap {
            // each row proportional to the count row
            matrix: vec![vec![6.0, 2.0, 0.0], vec![0.0, 1.0, 3.0]],
            row_header: "client".into(),
        };
        let r = pattern_correlation(&norms, &counts).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_undefined_for_constant_rows() {
        let counts = vec![vec![30usize, 10], vec![5, 15]];
        let norms = NormHeatmap {
            matrix: vec![vec![2.0, 2.0], vec![3.0, 3.0]],
            row_header: "client".into(),
        };
        assert!(matches!(
            pattern_correlation(&norms, &counts),
            Err(Error::UndefinedCorrelation(_))
        ));
        let mismatched = NormHeatmap {
            matrix: vec![vec![1.0]],
            row_header: "client".into(),
        };
        assert!(matches!(
            pattern_correlation(&mismatched, &counts),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ratio_diagnostic_is_antisymmetric_with_zero_diagonal() {
        let params = init_params(&[3, 4, 3], 5).unwrap();
        let mut grads = crate::nn::GradientSet::zeros_like(&params);
        let last = grads.layers.last_mut().unwrap();
        last.row_mut(0).copy_from_slice(&[1.0, 2.0, 0.5, 0.1]);
        last.row_mut(1).copy_from_slice(&[0.2, 0.4, 0.1, 0.3]);
        // row 2 stays zero
        let counts = vec![20, 10, 0];
        let residuals = gradient_norm_ratio_diagnostic(&grads, &counts).unwrap();
        for j in 0..3 {
            assert_eq!(residuals[j][j], Some(0.0));
        }
        let r01 = residuals[0][1].unwrap();
        let r10 = residuals[1][0].unwrap();
        assert!((r01 + r10).abs() < 1e-12);
        assert!(residuals[0][2].is_none());
        assert!(residuals[2][0].is_none());
    }

    #[test]
    fn csv_floats_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let awkward = vec![
            1.0 / 3.0,
            0.1,
            f64::MIN_POSITIVE,
            f64::MAX,
            -2.2250738585072014e-308,
            123_456_789.123_456_79,
            0.0,
        ];
        let trace = vec![report(1, awkward.clone())];
        let path = dir.path().join("accuracy_trace.csv");
        write_accuracy_trace(&path, &trace).unwrap();
        let (header, rows) = parse_csv(&path).unwrap();
        assert_eq!(header[0], "round");
        assert_eq!(header.last().unwrap(), "mean");
        for (cell, original) in rows[0][1..=awkward.len()].iter().zip(&awkward) {
            let parsed: f64 = cell.parse().unwrap();
            assert_eq!(parsed.to_bits(), original.to_bits(), "cell {cell}");
        }
    }

    #[test]
    fn csv_files_use_lf_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lambda_sweep.csv");
        let rows = vec![LambdaSweepRow {
            lambda: 0.1,
            best_mean_accuracy: 0.9,
            best_round: 3,
            mean_final_omega: 0.2,
        }];
        write_lambda_sweep(&path, &rows).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(!bytes.contains(&b'\r'));
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("lambda,best_mean_accuracy,best_round,mean_final_omega\n"));
    }
}
