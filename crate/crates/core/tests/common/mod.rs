//! Independent reference implementations and reusable checks shared by the
//! integration suites and the acceptance runner.
//!
//! Every check returns `Ok(detail)` or `Err(reason)` so callers can either
//! assert on it or print a verdict.

#![allow(dead_code)]

use std::collections::BTreeMap;

use harpipe::clusterstore::{dbscan, ClusterStore, DbscanParams};
use harpipe::encoder::Embedding;
use harpipe::finetune::FineTuneHead;
use harpipe::nn::{cross_entropy, nt_xent, Conv1d, Dense};
use harpipe::reduction::ReducerModel;
use harpipe::seed;
use harpipe::session::{Session, StepEvent};
use rand::Rng as _;

pub type Check = Result<String, String>;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- clusters

pub fn brute_centroid(members: &[Vec<f64>]) -> Vec<f64> {
    let dim = members[0].len();
    (0..dim).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64).collect()
}

pub fn brute_pair_sum(members: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            s += dist(&members[i], &members[j]);
        }
    }
    s
}

pub fn brute_avg(members: &[Vec<f64>]) -> f64 {
    let n = members.len();
    if n < 2 {
        0.0
    } else {
        brute_pair_sum(members) / (n * (n - 1) / 2) as f64
    }
}

/// Build a one-cluster store from `points[..initial]`, insert the rest one
/// by one and compare the running statistics with full recomputation.
pub fn check_incremental_stats(points: &[Vec<f64>], initial: usize) -> Check {
    let initial = initial.clamp(1, points.len());
    let labels = vec![Some(0); initial];
    let mut store = ClusterStore::build(&points[..initial], &labels).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for n in initial..=points.len() {
        if n > initial {
            store.insert(0, points[n - 1].clone()).map_err(|e| e.to_string())?;
        }
        let c = &store.clusters[0];
        let members = &points[..n];
        let errs = [
            (c.pair_dist_sum - brute_pair_sum(members)).abs(),
            (c.t_c() - brute_avg(members)).abs(),
            dist(&c.centroid, &brute_centroid(members)),
        ];
        let e = errs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(e);
        if e > 1e-6 || c.t_c() < 0.0 {
            return Err(format!("after {n} points: errors {errs:?}"));
        }
    }
    Ok(format!("max error {worst:.2e}"))
}

/// Random insertion sequence: up to `max_n` points in 1 to 4 dimensions.
pub fn random_points(seed: u64, max_n: usize) -> (Vec<Vec<f64>>, usize) {
    let mut rng = seed::rng(seed);
    let n = rng.random_range(2..=max_n);
    let dim = rng.random_range(1..=4);
    let scale = 10f64.powf(rng.random_range(-1.0..2.0));
    let pts = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect();
    let initial = rng.random_range(1..=n);
    (pts, initial)
}

// ------------------------------------------------------------------ dbscan

/// Textbook DBSCAN with linear-scan region queries.
pub fn naive_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let region = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist(&points[i], &points[j]) <= eps).collect() };
    let mut label = vec![None; n];
    let mut visited = vec![false; n];
    let mut cluster = 0;
    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let mut seeds = region(p);
        if seeds.len() < min_pts {
            continue;
        }
        label[p] = Some(cluster);
        let mut k = 0;
        while k < seeds.len() {
            let q = seeds[k];
            k += 1;
            if !visited[q] {
                visited[q] = true;
                let nq = region(q);
                if nq.len() >= min_pts {
                    seeds.extend(nq);
                }
            }
            if label[q].is_none() {
                label[q] = Some(cluster);
            }
        }
        cluster += 1;
    }
    label
}

pub fn core_points(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<bool> {
    (0..points.len())
        .map(|i| points.iter().filter(|q| dist(&points[i], q) <= eps).count() >= min_pts)
        .collect()
}

/// Same noise set and a bijection between cluster ids.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Random 2-D instance made of a few blobs plus uniform background.
pub fn random_instance(seed: u64, max_n: usize) -> (Vec<Vec<f64>>, f64, usize) {
    let mut rng = seed::rng(seed);
    let n = rng.random_range(1..=max_n);
    let blobs: Vec<[f64; 3]> =
        (0..rng.random_range(1..=5)).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.2..2.0)]).collect();
    let pts = (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                vec![rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)]
            } else {
                let b = blobs[rng.random_range(0..blobs.len())];
                vec![b[0] + b[2] * rng.random_range(-1.0..1.0), b[1] + b[2] * rng.random_range(-1.0..1.0)]
            }
        })
        .collect();
    (pts, rng.random_range(0.1..2.0), rng.random_range(1..=8))
}

pub fn check_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Check {
    let got = dbscan(points, DbscanParams { eps, min_pts }).map_err(|e| e.to_string())?;
    let want = naive_dbscan(points, eps, min_pts);
    if !same_partition(&got, &want) {
        return Err(format!("n={} eps={eps} min_pts={min_pts}: {got:?} vs reference {want:?}", points.len()));
    }
    Ok(format!("{} clusters", got.iter().flatten().max().map_or(0, |m| m + 1)))
}

/// Core set and the core-point partition survive a permutation of the input.
pub fn check_dbscan_permutation(points: &[Vec<f64>], eps: f64, min_pts: usize, perm: &[usize]) -> Check {
    let a = dbscan(points, DbscanParams { eps, min_pts }).map_err(|e| e.to_string())?;
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| points[i].clone()).collect();
    let b = dbscan(&permuted, DbscanParams { eps, min_pts }).map_err(|e| e.to_string())?;
    let core = core_points(points, eps, min_pts);
    let core_b = core_points(&permuted, eps, min_pts);
    if perm.iter().enumerate().any(|(k, &i)| core[i] != core_b[k]) {
        return Err("core set changed under permutation".into());
    }
    let idx: Vec<usize> = perm.iter().enumerate().filter(|(_, &i)| core[i]).map(|(k, _)| k).collect();
    let la: Vec<Option<usize>> = idx.iter().map(|&k| a[perm[k]]).collect();
    let lb: Vec<Option<usize>> = idx.iter().map(|&k| b[k]).collect();
    if !same_partition(&la, &lb) {
        return Err("core partition changed under permutation".into());
    }
    Ok(String::new())
}

// -------------------------------------------------------------- weighted F1

/// Weighted F1 from an explicit confusion matrix with precision and recall.
pub fn confusion_f1(pred: &[String], truth: &[String]) -> f64 {
    let mut classes: Vec<&String> = pred.iter().chain(truth).collect();
    classes.sort();
    classes.dedup();
    let k = classes.len();
    let at = |s: &String| classes.iter().position(|c| *c == s).unwrap();
    let mut m = vec![vec![0usize; k]; k];
    for (p, t) in pred.iter().zip(truth) {
        m[at(t)][at(p)] += 1;
    }
    let mut total = 0.0;
    for c in 0..k {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        let predicted: usize = (0..k).map(|r| m[r][c]).sum();
        let tp = m[c][c] as f64;
        let recall = tp / support as f64;
        let f1 = if predicted == 0 {
            0.0
        } else {
            let precision = tp / predicted as f64;
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
        };
        total += f1 * support as f64;
    }
    total / truth.len() as f64
}

pub fn random_labels(seed: u64, max_n: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = seed::rng(seed);
    let n = rng.random_range(1..=max_n);
    let k = rng.random_range(1..=6);
    let acc = rng.random_range(0.0..1.0);
    let truth: Vec<String> = (0..n).map(|_| format!("c{}", rng.random_range(0..k))).collect();
    let pred = truth
        .iter()
        .map(|t| if rng.random_bool(acc) { t.clone() } else { format!("c{}", rng.random_range(0..k + 1)) })
        .collect();
    (pred, truth)
}

pub fn check_weighted_f1(pred: &[String], truth: &[String]) -> Check {
    let got = harpipe::metrics::weighted_f1(pred, truth).map_err(|e| e.to_string())?;
    let want = confusion_f1(pred, truth);
    if (got - want).abs() > 1e-9 || !(0.0..=1.0).contains(&got) {
        return Err(format!("weighted_f1 {got} vs confusion-matrix oracle {want}"));
    }
    Ok(format!("{got:.4}"))
}

// --------------------------------------------------------------------- PCA

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues
/// (descending) and the matching eigenvectors as columns.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

pub fn covariance(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.len(), x[0].len());
    let mean = brute_centroid(x);
    let mut c = vec![vec![0.0; d]; d];
    for row in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    (mean, c)
}

/// Anisotropic random data: `n` rows of `d` features with spread scales
/// decaying geometrically, then mixed by a random rotation-like matrix.
pub fn random_matrix(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|k| rng.random_range(-1.0..1.0) * 3.0 * 0.7f64.powi(k as i32)).collect();
            (0..d).map(|i| 5.0 + (0..d).map(|k| mix[i][k] * z[k]).sum::<f64>()).collect()
        })
        .collect()
}

/// PCA against the Jacobi oracle: variances, per-point reconstruction in
/// the top-`k` subspace, total reconstruction error and orthonormality.
pub fn check_pca(x: &[Vec<f64>], k: usize) -> Check {
    let embs: Vec<Embedding> = x.iter().map(|r| Embedding(r.clone())).collect();
    let model = ReducerModel::fit(&embs, k).map_err(|e| e.to_string())?;
    let (mean, cov) = covariance(x);
    let (values, vectors) = jacobi_eigen(&cov);
    let d = x[0].len();
    for j in 0..k {
        if (model.variances[j] - values[j]).abs() > 1e-6 * values[0].max(1.0) {
            return Err(format!("variance {j}: {} vs oracle {}", model.variances[j], values[j]));
        }
        for l in 0..k {
            let dot: f64 = harpipe::nn::layers::dot(&model.component(j), &model.component(l));
            if (dot - if j == l { 1.0 } else { 0.0 }).abs() > 1e-8 {
                return Err(format!("components {j},{l} not orthonormal ({dot})"));
            }
        }
    }
    let reduced: Vec<Vec<f64>> = x.iter().map(|r| model.transform(r).map(|e| e.0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for j in 0..k {
        let var = reduced.iter().map(|r| r[j] * r[j]).sum::<f64>() / (x.len() - 1) as f64;
        if (var - values[j]).abs() > 1e-6 * values[0].max(1.0) {
            return Err(format!("projected variance {j}: {var} vs oracle {}", values[j]));
        }
    }
    let mut err_model = 0.0;
    let mut worst: f64 = 0.0;
    for (row, red) in x.iter().zip(&reduced) {
        let back = model.inverse_transform(red).map_err(|e| e.to_string())?;
        let centred: Vec<f64> = (0..d).map(|i| row[i] - mean[i]).collect();
        let mut oracle = mean.clone();
        for v in &vectors[..k] {
            let c: f64 = harpipe::nn::layers::dot(v, &centred);
            for i in 0..d {
                oracle[i] += c * v[i];
            }
        }
        worst = worst.max(dist(&back, &oracle));
        err_model += dist(&back, row).powi(2);
    }
    if worst > 1e-6 {
        return Err(format!("reconstruction differs from the oracle subspace by {worst:.3e}"));
    }
    let err_oracle = (x.len() - 1) as f64 * values[k..].iter().sum::<f64>();
    if (err_model - err_oracle).abs() > 1e-6 * err_oracle.max(1.0) {
        return Err(format!("total reconstruction error {err_model} vs oracle {err_oracle}"));
    }
    Ok(format!("k={k} worst point error {worst:.2e}"))
}

// ------------------------------------------------------------ density rule

/// Exhaustive nearest-centroid scan; ties go to the smallest id.
pub fn brute_nearest(clusters: &BTreeMap<usize, Vec<Vec<f64>>>, p: &[f64]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (id, m) in clusters {
        let d = dist(&brute_centroid(m), p);
        if d < best.0 {
            best = (d, *id);
        }
    }
    best.1
}

/// Brute-force density rule: query iff the average pairwise distance with
/// `p` added is strictly lower than without it.
pub fn brute_query(members: &[Vec<f64>], p: &[f64]) -> bool {
    let mut with = members.to_vec();
    with.push(p.to_vec());
    brute_avg(&with) < brute_avg(members)
}

pub fn store_of(groups: &[Vec<Vec<f64>>]) -> ClusterStore {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (id, g) in groups.iter().enumerate() {
        for p in g {
            pts.push(p.clone());
            labels.push(Some(id));
        }
    }
    ClusterStore::build(&pts, &labels).unwrap()
}

/// The hand-worked instances of the query rule.
pub fn check_worked_instances() -> Check {
    let pair = store_of(&[vec![vec![0.0, 0.0], vec![2.0, 0.0]]]);
    let single = store_of(&[vec![vec![3.0, 4.0]]]);
    let cases: [(&ClusterStore, [f64; 2], bool, &str); 4] = [
        (&pair, [1.0, 0.0], true, "{(0,0),(2,0)} + (1,0)"),
        (&pair, [10.0, 0.0], false, "{(0,0),(2,0)} + (10,0)"),
        (&pair, [0.0, 0.0], true, "{(0,0),(2,0)} + (0,0)"),
        (&single, [3.5, 4.0], false, "{(3,4)} + (3.5,4)"),
    ];
    for (store, p, want, name) in cases {
        let got = store.active_learning_needed(0, &p).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("{name}: expected query={want}"));
        }
        if brute_query(&store.clusters[0].members, &p) != want {
            return Err(format!("{name}: brute-force oracle disagrees with the worked answer"));
        }
    }
    let mut s = pair.clone();
    let stats = s.insert(0, vec![1.0, 0.0]).map_err(|e| e.to_string())?;
    if (stats.pair_dist_sum - 4.0).abs() > 1e-12 || (stats.t_c - 4.0 / 3.0).abs() > 1e-12 {
        return Err(format!("insert (1,0): {stats:?}"));
    }
    Ok("4 instances".into())
}

/// Replay every post-threshold decision of a finished or running session
/// against brute-force recomputation from its accumulation clusters.
/// Returns the number of decisions replayed.
pub fn replay_session(session: &Session) -> Result<usize, String> {
    let mut clusters: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (p, l) in session.reduced_storage().iter().zip(session.accumulation_labels()) {
        if let Some(id) = l {
            clusters.entry(*id).or_default().push(p.0.clone());
        }
    }
    let decisions: Vec<(usize, usize, bool, Vec<f64>)> = session
        .trace()
        .iter()
        .filter_map(|r| {
            let (id, q) = match &r.event {
                StepEvent::Query { cluster_id, .. } => (*cluster_id, true),
                StepEvent::Silent { cluster_id } => (*cluster_id, false),
                _ => return None,
            };
            Some((r.seq, id, q, r.reduced.clone().unwrap_or_default()))
        })
        .collect();
    let n = replay_decisions(clusters, &decisions)?;
    let queries = decisions.iter().filter(|d| d.2).count();
    if queries != session.queries() || n != session.al_samples() {
        return Err(format!("trace counts ({queries}, {n}) differ from session counters ({}, {})", session.queries(), session.al_samples()));
    }
    Ok(n)
}

/// `decisions`: (seq, matched cluster, queried, reduced point).
pub fn replay_decisions(mut clusters: BTreeMap<usize, Vec<Vec<f64>>>, decisions: &[(usize, usize, bool, Vec<f64>)]) -> Result<usize, String> {
    for (seq, id, queried, p) in decisions {
        let nearest = brute_nearest(&clusters, p);
        if nearest != *id {
            return Err(format!("seq {seq}: matched cluster {id}, exhaustive scan gives {nearest}"));
        }
        let members = clusters.get_mut(id).ok_or_else(|| format!("seq {seq}: unknown cluster {id}"))?;
        if brute_query(members, p) != *queried {
            return Err(format!("seq {seq}: recorded query={queried}, brute-force oracle disagrees"));
        }
        members.push(p.clone());
    }
    Ok(decisions.len())
}

// --------------------------------------------------------------- gradients

/// Element-wise relative error with a small absolute floor for gradients
/// that are exactly zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central finite difference of `f` with respect to `x[i]`.
pub fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(*a, *n);
        if e >= 1e-4 {
            return Err(format!("{name}[{i}]: analytic {a} vs numeric {n}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn random_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn gradcheck_conv1d(seed: u64) -> Result<f64, String> {
    let mut rng = seed::rng(seed);
    let (cin, cout, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=5));
    let len = k + rng.random_range(0..=6);
    let conv = Conv1d::new(cin, cout, k, &mut rng);
    let x = random_vec(&mut rng, len * cin);
    let r = random_vec(&mut rng, (len - k + 1) * cout);
    let (mut gw, mut gb) = (vec![0.0; conv.weight.len()], vec![0.0; conv.bias.len()]);
    let gx = conv.backward(&x, len, &r, &mut gw, &mut gb);
    let loss = |c: &Conv1d, x: &[f64]| harpipe::nn::layers::dot(&c.forward(x, len), &r);
    let h = 1e-5;
    let nw: Vec<f64> = (0..gw.len())
        .map(|i| central(&conv.weight, i, h, |w| loss(&Conv1d { weight: w.to_vec(), ..conv.clone() }, &x)))
        .collect();
    let nb: Vec<f64> =
        (0..gb.len()).map(|i| central(&conv.bias, i, h, |b| loss(&Conv1d { bias: b.to_vec(), ..conv.clone() }, &x))).collect();
    let nx: Vec<f64> = (0..x.len()).map(|i| central(&x, i, h, |x| loss(&conv, x))).collect();
    Ok(compare("conv.w", &gw, &nw)?.max(compare("conv.b", &gb, &nb)?).max(compare("conv.x", &gx, &nx)?))
}

pub fn gradcheck_dense(seed: u64) -> Result<f64, String> {
    let mut rng = seed::rng(seed);
    let (din, dout) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let mut layer = Dense::new(din, dout, &mut rng);
    layer.bias = random_vec(&mut rng, dout);
    let x = random_vec(&mut rng, din);
    let r = random_vec(&mut rng, dout);
    let (mut gw, mut gb) = (vec![0.0; layer.weight.len()], vec![0.0; dout]);
    let gx = layer.backward(&x, &r, &mut gw, &mut gb);
    let loss = |l: &Dense, x: &[f64]| harpipe::nn::layers::dot(&l.forward(x), &r);
    let h = 1e-5;
    let nw: Vec<f64> =
        (0..gw.len()).map(|i| central(&layer.weight, i, h, |w| loss(&Dense { weight: w.to_vec(), ..layer.clone() }, &x))).collect();
    let nb: Vec<f64> = (0..dout).map(|i| central(&layer.bias, i, h, |b| loss(&Dense { bias: b.to_vec(), ..layer.clone() }, &x))).collect();
    let nx: Vec<f64> = (0..din).map(|i| central(&x, i, h, |x| loss(&layer, x))).collect();
    Ok(compare("dense.w", &gw, &nw)?.max(compare("dense.b", &gb, &nb)?).max(compare("dense.x", &gx, &nx)?))
}

pub fn gradcheck_nt_xent(seed: u64) -> Result<f64, String> {
    let mut rng = seed::rng(seed);
    let (n, d) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let tau = rng.random_range(0.1..1.0);
    let a: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, d)).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, d)).collect();
    let out = nt_xent(&a, &b, tau).map_err(|e| e.to_string())?;
    let flat: Vec<f64> = a.iter().chain(&b).flatten().copied().collect();
    let loss = |f: &[f64]| {
        let rows: Vec<Vec<f64>> = f.chunks(d).map(|c| c.to_vec()).collect();
        nt_xent(&rows[..n], &rows[n..], tau).unwrap().loss
    };
    let numeric: Vec<f64> = (0..flat.len()).map(|i| central(&flat, i, 1e-5, loss)).collect();
    let analytic: Vec<f64> = out.grad_a.iter().chain(&out.grad_b).flatten().copied().collect();
    compare("nt_xent", &analytic, &numeric)
}

pub fn gradcheck_cross_entropy(seed: u64) -> Result<f64, String> {
    let mut rng = seed::rng(seed);
    let k = rng.random_range(2..=7);
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = rng.random_range(0..k);
    let (_, g) = cross_entropy(&logits, target);
    let numeric: Vec<f64> = (0..k).map(|i| central(&logits, i, 1e-5, |l| cross_entropy(l, target).0)).collect();
    compare("cross_entropy", &g, &numeric)
}

/// Gradients of the fine-tuning head (standardise, dense, ReLU, dense,
/// softmax cross-entropy) with respect to every parameter.
pub fn gradcheck_finetune_head(seed: u64) -> Result<f64, String> {
    let mut rng = seed::rng(seed);
    let (dim, hidden, k) = (rng.random_range(2..=6), rng.random_range(2..=8), rng.random_range(2..=4));
    let labels: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
    let mut head = FineTuneHead::build(&labels, dim, hidden, &mut rng).map_err(|e| e.to_string())?;
    let samples: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, dim)).collect();
    head.fit_scaler(&samples);
    let emb = random_vec(&mut rng, dim);
    let target = rng.random_range(0..k);
    let (_, grads) = head.loss_and_grads(&emb, target);
    let mut worst: f64 = 0.0;
    let n_params = grads.len();
    for p in 0..n_params {
        let base = head.clone();
        let values = {
            let mut h = base.clone();
            h.params_mut()[p].clone()
        };
        let numeric: Vec<f64> = (0..values.len())
            .map(|i| {
                central(&values, i, 1e-6, |v| {
                    let mut h = base.clone();
                    *h.params_mut()[p] = v.to_vec();
                    h.loss_and_grads(&emb, target).0
                })
            })
            .collect();
        worst = worst.max(compare(&format!("head.param{p}"), &grads[p], &numeric)?);
    }
    Ok(worst)
}

// ------------------------------------------------------------- determinism

/// File contents of `dir` (recursively) minus the wall-clock parts:
/// `meta.generated_at` lines and `timing.csv`.
pub fn snapshot(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            if p.file_name().is_some_and(|n| n == "timing.csv") {
                continue;
            }
            let bytes = std::fs::read(&p).unwrap();
            let bytes = match String::from_utf8(bytes.clone()) {
                Ok(text) => text.lines().filter(|l| !l.starts_with("meta.generated_at")).collect::<Vec<_>>().join("\n").into_bytes(),
                Err(_) => bytes,
            };
            out.insert(p.strip_prefix(dir).unwrap().display().to_string(), bytes);
        }
    }
    out
}

/// Two consecutive LOSO runs of `cfg` must emit identical artifacts.
pub fn check_report_determinism(cfg: &harpipe::harness::ExperimentConfig) -> Check {
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let report = harpipe::harness::run_loso(cfg).map_err(|e| e.to_string())?;
        harpipe::harness::emit_report(&report, dir.path()).map_err(|e| e.to_string())?;
        snaps.push(snapshot(dir.path()));
    }
    if snaps[0].keys().ne(snaps[1].keys()) {
        return Err("different file sets".into());
    }
    for (name, a) in &snaps[0] {
        if snaps[1][name] != *a {
            return Err(format!("{name} differs between runs"));
        }
    }
    let traces = snaps[0].keys().filter(|k| k.starts_with("traces")).count();
    if traces == 0 {
        return Err("no traces emitted".into());
    }
    Ok(format!("{} files identical, {traces} traces", snaps[0].len()))
}
