//! Evaluation: accuracy, confusion matrices, and embedding export.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::layers::global_avg_pool;
use crate::nn::IsgfanModel;
use crate::pseudo::softmax_probs;
use crate::signal::SegmentedDataset;

/// Fraction of exact matches between predictions and labels.
pub fn accuracy(predictions: &[u16], labels: &[u16]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let matches = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(matches as f64 / predictions.len() as f64)
}

/// Counts with rows indexed by true class and columns by predicted class.
pub fn confusion_matrix(predictions: &[u16], labels: &[u16], num_classes: usize) -> Result<Array2<u64>> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&p, &l) in predictions.iter().zip(labels) {
        if usize::from(p) >= num_classes || usize::from(l) >= num_classes {
            return Err(Error::InvalidConfig(format!(
                "class out of range: predicted {p}, true {l}, C = {num_classes}"
            )));
        }
        m[(usize::from(l), usize::from(p))] += 1;
    }
    Ok(m)
}

/// Writes a confusion matrix as comma-separated counts, one row per true
/// class.
pub fn write_confusion(path: &Path, matrix: &Array2<u64>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes feature vectors for external visualization; one row per sample:
/// `domain,label,f0,...,f{F-1}`.
pub fn export_embeddings(
    path: &Path,
    features: &Array2<f64>,
    labels: &[u16],
    domains: &[&str],
) -> Result<()> {
    if features.nrows() != labels.len() || labels.len() != domains.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features, {} labels, {} domains",
            features.nrows(),
            labels.len(),
            domains.len()
        )));
    }
    let mut file = std::fs::File::create(path)?;
    let header: Vec<String> = std::iter::once("domain".to_string())
        .chain(std::iter::once("label".to_string()))
        .chain((0..features.ncols()).map(|i| format!("f{i}")))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for i in 0..features.nrows() {
        let mut cols = Vec::with_capacity(features.ncols() + 2);
        cols.push(domains[i].to_string());
        cols.push(labels[i].to_string());
        for v in features.row(i) {
            cols.push(format!("{v:.9e}"));
        }
        writeln!(file, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Model outputs over one dataset: predictions and pooled features.
pub struct Inference {
    pub predictions: Vec<u16>,
    pub features: Array2<f64>,
}

/// Runs the classification branch over a dataset in evaluation batches.
pub fn infer(model: &IsgfanModel, data: &SegmentedDataset, batch: usize) -> Result<Inference> {
    let n = data.len();
    let len = data.segment_len();
    let feature_dim = model.arch.feature_dim();
    let mut predictions = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, feature_dim));
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let rows = end - start;
        let mut x = Array3::zeros((rows, 1, len));
        for (bi, i) in (start..end).enumerate() {
            x.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), 0)
                .assign(&data.samples.row(i));
        }
        let (map, _) = model.frfe.forward(&x)?;
        let pooled = global_avg_pool(&map);
        let (logits, _) = model.lc.forward(&pooled)?;
        let probs = softmax_probs(&logits);
        for bi in 0..rows {
            let row = probs.row(bi);
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for (k, &p) in row.iter().enumerate() {
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            predictions.push(best as u16);
            features.row_mut(start + bi).assign(&pooled.row(bi));
        }
        start = end;
    }
    Ok(Inference {
        predictions,
        features,
    })
}

/// Accuracy of the model on a labeled dataset.
pub fn evaluate_accuracy(model: &IsgfanModel, data: &SegmentedDataset, batch: usize) -> Result<f64> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingData("dataset has no labels".into()))?;
    let inference = infer(model, data, batch)?;
    accuracy(&inference.predictions, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_reference_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_reference_cases() {
        let m = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(m[(0, 0)], 1);
        assert_eq!(m[(1, 1)], 1);
        assert_eq!(m[(0, 1)] + m[(1, 0)], 0);

        let m = confusion_matrix(&[1, 1], &[0, 1], 2).unwrap();
        assert_eq!(m, ndarray::array![[0u64, 1], [0, 1]]);

        assert!(confusion_matrix(&[5], &[0], 2).is_err());
    }

    #[test]
    fn trace_over_n_equals_accuracy() {
        let mut rng = crate::seed::rng(5);
        use rand::Rng;
        for _ in 0..20 {
            let n = 50;
            let c = 4;
            let preds: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
            let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
            let m = confusion_matrix(&preds, &labels, c).unwrap();
            let trace: u64 = (0..c).map(|i| m[(i, i)]).sum();
            let acc = accuracy(&preds, &labels).unwrap();
            assert!((trace as f64 / n as f64 - acc).abs() < 1e-12);
            let total: u64 = m.iter().sum();
            assert_eq!(total as usize, n);
        }
    }

    #[test]
    fn confusion_is_permutation_invariant() {
        let preds = [0u16, 1, 2, 1, 0];
        let labels = [0u16, 1, 1, 1, 2];
        let a = confusion_matrix(&preds, &labels, 3).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let p2: Vec<u16> = perm.iter().map(|&i| preds[i]).collect();
        let l2: Vec<u16> = perm.iter().map(|&i| labels[i]).collect();
        let b = confusion_matrix(&p2, &l2, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");

        // Empty export still writes the header.
        export_embeddings(&path, &Array2::zeros((0, 5)), &[], &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);

        let features =
            Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.125 - 0.7);
        let labels = [0u16, 2, 1];
        let domains = ["source", "target", "target"];
        export_embeddings(&path, &features, &labels, &domains).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 6);
        for (i, line) in lines[1..].iter().enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], domains[i]);
            assert_eq!(cols[1], labels[i].to_string());
            for (j, c) in cols[2..].iter().enumerate() {
                let v: f64 = c.parse().unwrap();
                assert!((v - features[(i, j)]).abs() < 1e-6);
            }
        }
    }
}
