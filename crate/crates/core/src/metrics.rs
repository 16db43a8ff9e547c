//! Evaluation metrics.

use std::collections::BTreeMap;

use crate::clusterstore::euclidean;
use crate::error::{Error, Result};

/// Per-class F1 for every class present in `truths`, with its support.
pub fn per_class_f1<S: AsRef<str>>(predictions: &[S], truths: &[S]) -> Result<BTreeMap<String, (f64, usize)>> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension { expected: truths.len(), got: predictions.len() });
    }
    // class -> (tp, fp, fn, support)
    let mut counts: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for (p, t) in predictions.iter().zip(truths) {
        let (p, t) = (p.as_ref(), t.as_ref());
        counts.entry(t).or_default().3 += 1;
        if p == t {
            counts.get_mut(t).unwrap().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.get_mut(t).unwrap().2 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .filter(|(_, c)| c.3 > 0)
        .map(|(k, (tp, fp, fnn, support))| {
            let denom = 2 * tp + fp + fnn;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            (k.to_string(), (f1, support))
        })
        .collect())
}

/// Support-weighted mean of per-class F1 over the classes in `truths`.
pub fn weighted_f1<S: AsRef<str>>(predictions: &[S], truths: &[S]) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Data("weighted F1 of an empty label sequence".into()));
    }
    let per = per_class_f1(predictions, truths)?;
    let total = truths.len() as f64;
    Ok(per.values().map(|(f1, s)| f1 * *s as f64).sum::<f64>() / total)
}

/// Queries over active-learning stream length; 0 for an empty stream.
pub fn al_rate(queries: usize, al_stream_len: usize) -> Result<f64> {
    if queries > al_stream_len {
        return Err(Error::Data(format!("{queries} queries exceed {al_stream_len} active-learning samples")));
    }
    Ok(if al_stream_len == 0 { 0.0 } else { queries as f64 / al_stream_len as f64 })
}

/// Mean silhouette coefficient (Euclidean). Points alone in their class
/// score 0. Needs at least two classes.
pub fn silhouette<P: AsRef<[f64]>, S: AsRef<str>>(points: &[P], labels: &[S]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Dimension { expected: points.len(), got: labels.len() });
    }
    let classes: Vec<&str> = {
        let mut c: Vec<&str> = labels.iter().map(|l| l.as_ref()).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Data("silhouette needs at least two classes".into()));
    }
    let idx: Vec<usize> = labels.iter().map(|l| classes.binary_search(&l.as_ref()).unwrap()).collect();
    let size: Vec<usize> = (0..classes.len()).map(|c| idx.iter().filter(|&&i| i == c).count()).collect();
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![0.0; classes.len()];
        for j in 0..points.len() {
            if i != j {
                sums[idx[j]] += euclidean(points[i].as_ref(), points[j].as_ref());
            }
        }
        let own = idx[i];
        if size[own] < 2 {
            continue;
        }
        let a = sums[own] / (size[own] - 1) as f64;
        let b = (0..classes.len()).filter(|&c| c != own).map(|c| sums[c] / size[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
