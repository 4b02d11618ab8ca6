//! Evaluation protocols: classification accuracy, segmentation mIoU,
//! unsupervised class-discovery accuracy via the optimal label permutation
//! (Hungarian algorithm), and embedding export.

use crate::error::{Error, Result};
use crate::model::{infer_embeddings, ModelState};
use crate::stream::{stream, Stream};
use ndarray::{Array2, Array3};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Per-step or per-epoch scalar metrics. Names are unique by construction;
/// the optional wall-clock field is kept out of deterministic runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

impl MetricRecord {
    pub fn new(step: u64) -> Self {
        MetricRecord { step, metrics: BTreeMap::new(), wall_ms: None }
    }

    pub fn set(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Hard cluster assignment: `assignments[i]` in `[0, clusters)`, i.e. a row
/// one-hot matrix in compact form.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub clusters: usize,
}

impl ClusterAssignment {
    pub fn new(assignments: Vec<usize>, clusters: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::Config("clusters must be >= 1".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= clusters) {
            return Err(Error::Data(format!("cluster index {bad} out of range {clusters}")));
        }
        Ok(ClusterAssignment { assignments, clusters })
    }
}

/// K x K 0/1 permutation: `map[cluster] = class`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationMatrix {
    pub map: Vec<usize>,
}

impl PermutationMatrix {
    pub fn is_valid(&self) -> bool {
        let k = self.map.len();
        let mut seen = vec![false; k];
        for &c in &self.map {
            if c >= k || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        true
    }

    /// Dense 0/1 matrix with `P[i, map[i]] = 1` (rows and columns each sum
    /// to one).
    pub fn to_matrix(&self) -> Array2<u8> {
        let k = self.map.len();
        let mut m = Array2::<u8>::zeros((k, k));
        for (i, &j) in self.map.iter().enumerate() {
            m[[i, j]] = 1;
        }
        m
    }
}

/// Fraction of exact matches.
pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {} vs labels {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("accuracy of empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean IoU over the classes present in the ground truth.
pub fn miou(pred: &Array3<u8>, gt: &Array3<u8>, classes: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt.iter()).find(|&&v| v as usize >= classes) {
        return Err(Error::Data(format!("mask value {bad} out of range {classes}")));
    }
    let mut inter = vec![0u64; classes];
    let mut pred_count = vec![0u64; classes];
    let mut gt_count = vec![0u64; classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if gt_count[c] == 0 {
            continue;
        }
        let union = pred_count[c] + gt_count[c] - inter[c];
        total += inter[c] as f64 / union as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::DegenerateInput("ground truth has no classes".into()));
    }
    Ok(total / present as f64)
}

/// Minimum-cost assignment on a square matrix (Kuhn-Munkres with potentials,
/// O(n^3)). Returns `row -> column`.
pub fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // col -> row, 1-based, 0 = unassigned
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

fn contingency(yc: &ClusterAssignment, labels: &[usize]) -> Result<Array2<f64>> {
    if yc.assignments.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "clusters {} vs labels {}",
            yc.assignments.len(),
            labels.len()
        )));
    }
    let k = yc.clusters;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range {k}")));
    }
    let mut c = Array2::<f64>::zeros((k, k));
    for (&a, &l) in yc.assignments.iter().zip(labels) {
        c[[a, l]] += 1.0;
    }
    Ok(c)
}

/// Permutation of cluster indices maximizing `tr(P^T Yc^T Y)`, solved by the
/// Hungarian algorithm on the negated contingency matrix.
pub fn optimal_permutation(yc: &ClusterAssignment, labels: &[usize]) -> Result<PermutationMatrix> {
    let c = contingency(yc, labels)?;
    let perm = PermutationMatrix { map: hungarian_min(&c.mapv(|v| -v)) };
    debug_assert!(perm.is_valid());
    Ok(perm)
}

/// Accuracy of the cluster assignment under its best label permutation.
pub fn cluster_accuracy(yc: &ClusterAssignment, labels: &[usize]) -> Result<f64> {
    let c = contingency(yc, labels)?;
    let perm = optimal_permutation(yc, labels)?;
    let matched: f64 = perm.map.iter().enumerate().map(|(cl, &cls)| c[[cl, cls]]).sum();
    Ok(matched / labels.len().max(1) as f64)
}

/// Lloyd k-means with greedy farthest-point seeding, 10 restarts and at most
/// 100 iterations, deterministic given the seed.
pub fn kmeans_cluster(embeddings: &Array2<f32>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    const RESTARTS: usize = 10;
    const MAX_ITERS: usize = 100;
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if k == 0 || n < k {
        return Err(Error::Config(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }
    let pts: Vec<Vec<f64>> = embeddings
        .outer_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut rng: Stream = stream(seed, "kmeans");
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        // greedy farthest-point seeding from a random start
        let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].clone()];
        let mut mind2: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
        while centers.len() < k {
            let mut far = 0usize;
            for i in 1..n {
                if mind2[i] > mind2[far] {
                    far = i;
                }
            }
            centers.push(pts[far].clone());
            for i in 0..n {
                let dd = dist2(&pts[i], centers.last().unwrap());
                if dd < mind2[i] {
                    mind2[i] = dd;
                }
            }
        }

        let mut assign = vec![0usize; n];
        for _ in 0..MAX_ITERS {
            let mut changed = false;
            for (i, p) in pts.iter().enumerate() {
                let mut bc = 0usize;
                let mut bd = dist2(p, &centers[0]);
                for (c, center) in centers.iter().enumerate().skip(1) {
                    let dd = dist2(p, center);
                    if dd < bd {
                        bd = dd;
                        bc = c;
                    }
                }
                if assign[i] != bc {
                    assign[i] = bc;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![vec![0.0f64; d]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in pts.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, &v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for s in sums[c].iter_mut() {
                        *s /= counts[c] as f64;
                    }
                    centers[c] = sums[c].clone();
                }
                // empty clusters keep their previous centroid
            }
        }
        let inertia: f64 = pts
            .iter()
            .enumerate()
            .map(|(i, p)| dist2(p, &centers[assign[i]]))
            .sum();
        if best.as_ref().map(|(b, _)| inertia < *b).unwrap_or(true) {
            best = Some((inertia, assign));
        }
    }
    ClusterAssignment::new(best.unwrap().1, k)
}

fn fmt_g9(v: f32) -> String {
    format!("{v:.8e}")
}

/// Write pooled encoder embeddings as delimited text with header
/// `id,label,e0,...,e{d-1}` (9 significant digits).
pub fn export_embeddings(
    state: &ModelState,
    images: &ndarray::Array4<f32>,
    labels: &[usize],
    path: &Path,
) -> Result<()> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("images {n} vs labels {}", labels.len())));
    }
    let emb = if n > 0 {
        infer_embeddings(state, images, 256)
    } else {
        Array2::<f32>::zeros((0, crate::model::EMBED_DIM))
    };
    let mut out = String::new();
    out.push_str("id,label");
    for e in 0..emb.ncols() {
        out.push_str(&format!(",e{e}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{i},{}", labels[i]));
        for e in 0..emb.ncols() {
            out.push(',');
            out.push_str(&fmt_g9(emb[[i, e]]));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream;
    use ndarray::Array3;

    #[test]
    fn accuracy_examples() {
        assert_eq!(classification_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(
            classification_accuracy(&[1, 1, 0, 2, 2], &[1, 1, 1, 2, 0]).unwrap(),
            0.6
        );
        assert!(classification_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = Array3::from_shape_fn((1, 4, 4), |(_, i, _)| u8::from(i >= 2));
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 1.0);
        let wrong = gt.mapv(|v| 1 - v);
        assert_eq!(miou(&wrong, &gt, 2).unwrap(), 0.0);
        // hand case: pred marks bottom 3 rows as class 1, gt bottom 2 rows
        let pred = Array3::from_shape_fn((1, 4, 4), |(_, i, _)| u8::from(i >= 1));
        // class 0: inter 4, union 8 -> 0.5 ; class 1: inter 8, union 12 -> 2/3
        let expect = (4.0 / 8.0 + 8.0 / 12.0) / 2.0;
        assert!((miou(&pred, &gt, 2).unwrap() - expect).abs() < 1e-12);
        let bad = Array3::from_elem((1, 4, 4), 7u8);
        assert!(miou(&bad, &gt, 2).is_err());
    }

    #[test]
    fn miou_skips_absent_classes() {
        let gt = Array3::<u8>::zeros((1, 3, 3));
        let pred = Array3::<u8>::zeros((1, 3, 3));
        // class 1 absent from gt: average over class 0 only
        assert_eq!(miou(&pred, &gt, 2).unwrap(), 1.0);
    }

    fn brute_force_best(c: &Array2<f64>) -> f64 {
        // max over all permutations of sum_i c[i, perm[i]]
        let k = c.nrows();
        let mut idx: Vec<usize> = (0..k).collect();
        let mut best = f64::NEG_INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            let s: f64 = (0..k).map(|i| c[[i, perm[i]]]).sum();
            if s > best {
                best = s;
            }
        });
        best
    }

    fn permute(idx: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
        if at == idx.len() {
            f(idx);
            return;
        }
        for i in at..idx.len() {
            idx.swap(at, i);
            permute(idx, at + 1, f);
            idx.swap(at, i);
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        use rand::RngExt;
        let mut rng = stream(5, "hung");
        for k in 2..=6usize {
            for _ in 0..200 {
                let c = Array2::from_shape_simple_fn((k, k), || rng.random_range(0.0..20.0f64));
                let perm = hungarian_min(&c.mapv(|v| -v));
                let got: f64 = (0..k).map(|i| c[[i, perm[i]]]).sum();
                let best = brute_force_best(&c);
                assert!((got - best).abs() < 1e-9, "k={k}: {got} vs {best}");
            }
        }
    }

    #[test]
    fn permutation_trivial_cases() {
        let yc = ClusterAssignment::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let p = optimal_permutation(&yc, &labels).unwrap();
        assert_eq!(p.map, vec![0, 1, 2]);
        assert!(p.is_valid());
        // swap classes 0 and 1 in the labels: permutation should swap back
        let swapped: Vec<usize> = labels.iter().map(|&l| [1, 0, 2][l]).collect();
        let p = optimal_permutation(&yc, &swapped).unwrap();
        assert_eq!(p.map, vec![1, 0, 2]);
        let m = p.to_matrix();
        for i in 0..3 {
            assert_eq!(m.row(i).iter().map(|&v| v as usize).sum::<usize>(), 1);
            assert_eq!(m.column(i).iter().map(|&v| v as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn cluster_accuracy_cases() {
        // perfect clustering under a relabeling
        let yc = ClusterAssignment::new(vec![2, 2, 0, 0, 1, 1], 3).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(cluster_accuracy(&yc, &labels).unwrap(), 1.0);
        // everything in one cluster, balanced labels -> 1/K
        let yc = ClusterAssignment::new(vec![0; 9], 3).unwrap();
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        assert!((cluster_accuracy(&yc, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // handmade 6-sample case vs brute force over relabelings
        let yc = ClusterAssignment::new(vec![0, 0, 1, 1, 2, 0], 3).unwrap();
        let labels = vec![1, 1, 0, 0, 2, 2];
        let c = contingency(&yc, &labels).unwrap();
        let best = brute_force_best(&c) / 6.0;
        assert!((cluster_accuracy(&yc, &labels).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn cluster_accuracy_invariant_to_cluster_relabeling() {
        use rand::RngExt;
        let mut rng = stream(6, "cluster-perm");
        let n = 40;
        let k = 4;
        let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let yc = ClusterAssignment::new(assignments.clone(), k).unwrap();
        let base = cluster_accuracy(&yc, &labels).unwrap();
        // identity-permutation accuracy never exceeds the optimal one
        let ident =
            assignments.iter().zip(&labels).filter(|(a, l)| a == l).count() as f64 / n as f64;
        assert!(base >= ident - 1e-12);
        let relabel = [2usize, 3, 1, 0];
        let yc2 =
            ClusterAssignment::new(assignments.iter().map(|&a| relabel[a]).collect(), k).unwrap();
        assert_eq!(base, cluster_accuracy(&yc2, &labels).unwrap());
    }

    #[test]
    fn kmeans_trivial_and_separated() {
        use rand::RngExt;
        let mut rng = stream(7, "kmeans-test");
        // K = 1: everything in one cluster
        let x = Array2::from_shape_simple_fn((10, 3), || rng.random_range(0.0..1.0f32));
        let a = kmeans_cluster(&x, 1, 0).unwrap();
        assert!(a.assignments.iter().all(|&c| c == 0));
        // two tight, far-apart clouds
        let x = Array2::from_shape_fn((40, 2), |(i, j)| {
            let center = if i < 20 { 0.0f32 } else { 100.0 };
            center + 0.01 * ((i * 7 + j * 3) % 11) as f32
        });
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let a = kmeans_cluster(&x, 2, 1).unwrap();
        assert_eq!(cluster_accuracy(&a, &labels).unwrap(), 1.0);
        // determinism
        let b = kmeans_cluster(&x, 2, 1).unwrap();
        assert_eq!(a, b);
        // n < k is a configuration error
        assert!(kmeans_cluster(&x, 41, 0).is_err());
    }

    #[test]
    fn export_embeddings_round_trip() {
        use crate::model::{infer_embeddings, ModelState};
        let state = ModelState::init(3, 11);
        let mut rng = stream(12, "export");
        use rand::RngExt;
        let images =
            ndarray::Array4::from_shape_simple_fn((4, 3, 32, 32), || rng.random_range(0.0..1.0f32));
        let labels = vec![0usize, 1, 2, 0];
        let dir = std::env::temp_dir().join(format!("tp-embed-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.csv");
        export_embeddings(&state, &images, &labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("id,label,e0,"));
        assert!(header.ends_with(&format!("e{}", crate::model::EMBED_DIM - 1)));
        let direct = infer_embeddings(&state, &images, 2);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(',');
            assert_eq!(parts.next().unwrap().parse::<usize>().unwrap(), i);
            assert_eq!(parts.next().unwrap().parse::<usize>().unwrap(), labels[i]);
            for (e, p) in parts.enumerate() {
                let v: f32 = p.parse().unwrap();
                assert!((v - direct[[i, e]]).abs() <= 1e-6_f32.max(direct[[i, e]].abs() * 1e-6));
            }
        }
        // empty subset: header only
        let empty = ndarray::Array4::<f32>::zeros((0, 3, 32, 32));
        let path2 = dir.join("empty.csv");
        export_embeddings(&state, &empty, &[], &path2).unwrap();
        let text = std::fs::read_to_string(&path2).unwrap();
        assert_eq!(text.lines().count(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }
}
