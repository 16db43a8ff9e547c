//! DBSCAN over reduced embeddings plus per-cluster incremental statistics.
//!
//! Each [`Cluster`] keeps its members, a running centroid and the sum of all
//! pairwise member distances, so inserting a point costs O(n) in the cluster
//! size and the average pairwise distance (the cluster's density threshold)
//! is always available in O(1).

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    /// Neighbourhood size (including the point itself) that makes a core point.
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("dbscan eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 1 {
            return Err(Error::Config("dbscan min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Neighbour lists (including self) within `eps`, found by sweeping points
/// sorted on their first coordinate.
fn neighbourhoods<P: AsRef<[f64]>>(points: &[P], eps: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| points[i].as_ref().first().copied().unwrap_or(0.0);
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut nbrs = vec![Vec::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        nbrs[i].push(i);
        for &j in &order[pos + 1..] {
            if key(j) - key(i) > eps {
                break;
            }
            if euclidean(points[i].as_ref(), points[j].as_ref()) <= eps {
                nbrs[i].push(j);
                nbrs[j].push(i);
            }
        }
    }
    for l in &mut nbrs {
        l.sort_unstable();
    }
    nbrs
}

/// DBSCAN with the Euclidean metric. Returns `Some(cluster)` or `None` (noise)
/// per point. Clusters are numbered in order of their lowest-index core
/// point; a border point joins the first cluster that reaches it.
pub fn dbscan<P: AsRef<[f64]>>(points: &[P], params: DbscanParams) -> Result<Vec<Option<usize>>> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::Data("dbscan needs at least one point".into()));
    }
    let nbrs = neighbourhoods(points, params.eps);
    let core: Vec<bool> = nbrs.iter().map(|l| l.len() >= params.min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut next = 0;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..points.len() {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &nbrs[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// Quantile over points of the distance to their `k`-th nearest other
/// point, linearly interpolated (`quantile = 0.5` is the median).
pub fn knn_eps<P: AsRef<[f64]>>(points: &[P], k: usize, quantile: f64) -> Result<f64> {
    if points.len() < 2 || k == 0 {
        return Err(Error::Data("eps heuristic needs at least two points and k >= 1".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config(format!("eps quantile {quantile} outside [0, 1]")));
    }
    let mut kth: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| euclidean(p.as_ref(), q.as_ref()))
                .collect();
            d.sort_by(f64::total_cmp);
            d[(k - 1).min(d.len() - 1)]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let pos = quantile * (kth.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let eps = kth[lo] + (pos - lo as f64) * (kth[hi] - kth[lo]);
    Ok(if eps > 0.0 { eps } else { 1e-12 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub members: Vec<Vec<f64>>,
    pub centroid: Vec<f64>,
    pub pair_dist_sum: f64,
}

impl Cluster {
    pub fn from_members(id: usize, members: Vec<Vec<f64>>) -> Self {
        let dim = members[0].len();
        let n = members.len() as f64;
        let mut centroid = vec![0.0; dim];
        for m in &members {
            for (c, v) in centroid.iter_mut().zip(m) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n);
        let mut pair_dist_sum = 0.0;
        for i in 0..members.len() {
            for j in 0..i {
                pair_dist_sum += euclidean(&members[i], &members[j]);
            }
        }
        Self { id, members, centroid, pair_dist_sum }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Average pairwise member distance; 0 with fewer than two members.
    pub fn t_c(&self) -> f64 {
        avg_pairwise(self.pair_dist_sum, self.len())
    }

    /// Sum of distances from `point` to every member.
    pub fn distance_sum(&self, point: &[f64]) -> f64 {
        self.members.iter().map(|m| euclidean(m, point)).sum()
    }

    /// Average pairwise distance the cluster would have with `point` added.
    pub fn t_c_with(&self, point: &[f64]) -> f64 {
        avg_pairwise(self.pair_dist_sum + self.distance_sum(point), self.len() + 1)
    }

    pub fn insert(&mut self, point: Vec<f64>) {
        self.pair_dist_sum += self.distance_sum(&point);
        let n = (self.len() + 1) as f64;
        for (c, v) in self.centroid.iter_mut().zip(&point) {
            *c += (v - *c) / n;
        }
        self.members.push(point);
    }
}

fn avg_pairwise(sum: f64, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        sum / (n * (n - 1) / 2) as f64
    }
}

/// Statistics of a cluster after an insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsertStats {
    pub size: usize,
    pub pair_dist_sum: f64,
    pub t_c: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterStore {
    /// Sorted by id.
    pub clusters: Vec<Cluster>,
    pub noise_count: usize,
}

impl ClusterStore {
    /// One cluster per non-noise label; noise points are only counted.
    pub fn build<P: AsRef<[f64]>>(points: &[P], labels: &[Option<usize>]) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Dimension { expected: points.len(), got: labels.len() });
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
        let mut noise_count = 0;
        for (p, l) in points.iter().zip(labels) {
            match l {
                Some(id) => groups.entry(*id).or_default().push(p.as_ref().to_vec()),
                None => noise_count += 1,
            }
        }
        let clusters = groups.into_iter().map(|(id, m)| Cluster::from_members(id, m)).collect();
        Ok(Self { clusters, noise_count })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Cluster> {
        self.clusters
            .binary_search_by_key(&id, |c| c.id)
            .map(|i| &self.clusters[i])
            .map_err(|_| Error::UnknownCluster(id))
    }

    fn get_mut(&mut self, id: usize) -> Result<&mut Cluster> {
        match self.clusters.binary_search_by_key(&id, |c| c.id) {
            Ok(i) => Ok(&mut self.clusters[i]),
            Err(_) => Err(Error::UnknownCluster(id)),
        }
    }

    /// Cluster with the closest centroid; ties go to the smallest id.
    pub fn nearest_cluster(&self, point: &[f64]) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for c in &self.clusters {
            let d = euclidean(&c.centroid, point);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c.id));
            }
        }
        best.map(|b| b.1).ok_or_else(|| Error::State("nearest_cluster on an empty store".into()))
    }

    pub fn insert(&mut self, id: usize, point: Vec<f64>) -> Result<InsertStats> {
        let c = self.get_mut(id)?;
        c.insert(point);
        Ok(InsertStats { size: c.len(), pair_dist_sum: c.pair_dist_sum, t_c: c.t_c() })
    }

    /// True when adding `point` would strictly lower the cluster's average
    /// pairwise distance. The store is not modified.
    pub fn active_learning_needed(&self, id: usize, point: &[f64]) -> Result<bool> {
        let c = self.get(id)?;
        Ok(c.t_c_with(point) < c.t_c())
    }

    /// `cluster_id,size,t_c,centroid` lines; the centroid is space-separated.
    pub fn dump(&self) -> String {
        let mut out = String::from("cluster_id,size,t_c,centroid\n");
        for c in &self.clusters {
            let centroid: Vec<String> = c.centroid.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", c.id, c.len(), c.t_c(), centroid.join(" "));
        }
        out
    }
}
