//! k-means pseudo-labelling, knee-point selection and cluster purity.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    /// `K x d`.
    pub centroids: Tensor,
    /// Inertia after each assignment pass.
    pub inertia_history: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&f64::NAN)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lower index.
fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_pp_init(points: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= K <= N, got K={k}, N={n}")));
    }
    let mut rng = stream_rng(seed, "kmeans-init", 0);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // floating-point leftovers could land on a zero-distance point
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&d| d > 0.0).unwrap();
            }
            pick
        } else {
            // all remaining points coincide with centres; take unused indices
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

pub fn kmeans_fit(points: &Tensor, k: usize, max_iter: usize, seed: u64) -> Result<KMeansModel> {
    let init = kmeans_pp_init(points, k, seed)?;
    lloyd(points, init, max_iter)
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or `max_iter` passes. Empty clusters are reseeded to the point
/// farthest from its centroid.
pub fn lloyd(points: &Tensor, init: Tensor, max_iter: usize) -> Result<KMeansModel> {
    let (n, d) = (points.rows(), points.cols());
    let k = init.rows();
    if init.cols() != d {
        return Err(Error::Input(format!(
            "centroids have {} columns, points {}",
            init.cols(),
            d
        )));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("k-means input is not finite".into()));
    }
    let mut centroids = init;
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = dd;
            inertia += dd;
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i];
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let row = centroids.row_mut(c);
                for (r, s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *r = s / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    if !centroids.is_finite() {
        return Err(Error::Numeric("k-means produced non-finite centroids".into()));
    }
    Ok(KMeansModel {
        centroids,
        inertia_history: history,
    })
}

pub fn kmeans_assign(model: &KMeansModel, points: &Tensor) -> Vec<usize> {
    (0..points.rows())
        .map(|i| nearest(points.row(i), &model.centroids).0)
        .collect()
}

/// Sum of squared distances to the assigned centroids.
pub fn inertia(model: &KMeansModel, points: &Tensor) -> f64 {
    (0..points.rows())
        .map(|i| nearest(points.row(i), &model.centroids).1)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub x: f64,
    pub index: usize,
    /// Height of the difference curve at the knee; 0 for a straight line.
    pub strength: f64,
    pub confident: bool,
}

/// Kneedle on a decreasing curve: both axes are rescaled to `[0, 1]` with
/// `y` flipped so it increases, and the knee is the maximum of `y' - x'`
/// (first maximum on ties).
pub fn knee_point(xs: &[f64], ys: &[f64]) -> Result<Knee> {
    let n = xs.len();
    if n < 4 || ys.len() != n {
        return Err(Error::Input(format!(
            "knee_point needs >= 4 paired points, got {} xs / {} ys",
            n,
            ys.len()
        )));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("knee_point xs must be strictly increasing".into()));
    }
    let y_scale = ys[0].abs().max(ys[n - 1].abs()).max(1e-300);
    if ys.windows(2).any(|w| w[1] > w[0] + 1e-12 * y_scale) || !ys.iter().all(|y| y.is_finite()) {
        return Err(Error::Input("knee_point ys must be non-increasing".into()));
    }
    let (x0, x1) = (xs[0], xs[n - 1]);
    let (ymax, ymin) = (ys[0], ys[n - 1]);
    let yr = ymax - ymin;
    let diff: Vec<f64> = (0..n)
        .map(|i| {
            let xn = (xs[i] - x0) / (x1 - x0);
            let yn = if yr > 0.0 { (ymax - ys[i]) / yr } else { xn };
            yn - xn
        })
        .collect();
    // near-ties (within rounding) resolve to the smaller x
    let mut best = 0;
    for i in 1..n {
        if diff[i] > diff[best] + 1e-12 {
            best = i;
        }
    }
    let strength = diff[best];
    if strength <= 1e-9 {
        let mid = (n - 1) / 2;
        return Ok(Knee {
            x: xs[mid],
            index: mid,
            strength: 0.0,
            confident: false,
        });
    }
    Ok(Knee {
        x: xs[best],
        index: best,
        strength,
        confident: strength >= 0.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub purity: f64,
    /// `(cluster, label, count)` triples, sorted.
    pub counts: Vec<(usize, usize, usize)>,
}

pub fn purity_report(labels: &[usize], truth: &[usize]) -> Result<PurityReport> {
    if labels.len() != truth.len() {
        return Err(Error::Input(format!(
            "purity: {} cluster ids vs {} truth ids",
            labels.len(),
            truth.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("purity of an empty assignment".into()));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    for (&c, &t) in labels.iter().zip(truth) {
        *table.entry((c, t)).or_insert(0) += 1;
    }
    let mut dominant: HashMap<usize, usize> = HashMap::new();
    for (&(c, _), &cnt) in &table {
        let e = dominant.entry(c).or_insert(0);
        *e = (*e).max(cnt);
    }
    let purity = dominant.values().sum::<usize>() as f64 / labels.len() as f64;
    let mut counts: Vec<(usize, usize, usize)> =
        table.into_iter().map(|((c, t), n)| (c, t, n)).collect();
    counts.sort_unstable();
    Ok(PurityReport { purity, counts })
}

pub fn purity(labels: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(purity_report(labels, truth)?.purity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_blobs() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
            vec![10.0, 10.1],
        ];
        let p = Tensor::from_rows(&rows).unwrap();
        let m = kmeans_fit(&p, 2, 50, 3).unwrap();
        let mut c = m.centroids.to_rows();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_abs_diff_eq!(c[0][0], 0.1 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(c[1][1], 10.0 + 0.1 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let p = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![7.0]]).unwrap();
        let m = kmeans_fit(&p, 4, 10, 0).unwrap();
        assert_eq!(m.inertia(), 0.0);
        assert!(kmeans_fit(&p, 5, 10, 0).is_err());
    }

    #[test]
    fn assignment_ties_go_low() {
        let m = KMeansModel {
            centroids: Tensor::from_rows(&[vec![-1.0], vec![1.0], vec![3.0], vec![4.0]]).unwrap(),
            inertia_history: vec![],
        };
        let p = Tensor::from_rows(&[vec![0.0], vec![3.0], vec![2.0]]).unwrap();
        assert_eq!(kmeans_assign(&m, &p), vec![0, 2, 1]);
    }

    #[test]
    fn knee_on_reciprocal_and_elbow() {
        let xs: Vec<f64> = (1..=20).map(|x| x as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
        let k = knee_point(&xs, &ys).unwrap();
        assert!(k.x <= 4.0);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| if x <= 6.0 { 100.0 - 10.0 * x } else { 40.0 - (x - 6.0) })
            .collect();
        assert_eq!(knee_point(&xs, &ys).unwrap().x, 6.0);
    }

    #[test]
    fn knee_on_line_is_low_confidence_midpoint() {
        let xs: Vec<f64> = (0..9).map(|x| x as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 8.0 - x).collect();
        let k = knee_point(&xs, &ys).unwrap();
        assert!(!k.confident);
        assert_eq!(k.x, 4.0);
        assert!(knee_point(&xs, &xs).is_err());
        assert!(knee_point(&xs[..3], &ys[..3]).is_err());
    }

    #[test]
    fn purity_basics() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[1, 2, 1, 2]).unwrap(), 0.5);
        assert!(purity(&[0], &[0, 1]).is_err());
    }
}
