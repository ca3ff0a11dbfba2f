//! Farthest-first and closest-first traversal over latent vectors.
//!
//! Both traversals start from an extreme pair and then repeatedly append the
//! remaining point whose minimum distance to the points already chosen is
//! largest (farthest-first) or smallest (closest-first). Ties go to the
//! lowest index; for the starting pair, to the lexicographically lowest
//! `(i, j)`. Minimum distances are maintained incrementally, so a traversal
//! costs one pass over all pairs for the start plus `O(n)` per appended point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::CoverageTrace;
use crate::vae::LatentVector;

/// Default corpus cap.
pub const DEFAULT_K: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub index: usize,
    /// Minimum distance to all earlier entries; `None` for the first.
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedSequence {
    pub entries: Vec<RankedEntry>,
}

impl RankedSequence {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `index,distance` rows; the first distance is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,distance\n");
        for e in &self.entries {
            match e.distance {
                Some(d) => out.push_str(&format!("{},{d}\n", e.index)),
                None => out.push_str(&format!("{},\n", e.index)),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    FarthestFirst,
    ClosestFirst,
}

impl Direction {
    /// True when `a` should replace the current best `b`.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::FarthestFirst => a > b,
            Direction::ClosestFirst => a < b,
        }
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_dims(points: &[LatentVector]) -> Result<()> {
    if let Some(first) = points.first() {
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.dim() != first.dim()) {
            return Err(Error::Shape(format!(
                "point {i} has dimension {}, point 0 has {}",
                p.dim(),
                first.dim()
            )));
        }
    }
    Ok(())
}

/// Full symmetric Euclidean distance matrix.
pub fn pairwise_distances(points: &[LatentVector]) -> Result<Vec<Vec<f64>>> {
    check_dims(points)?;
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&points[i].0, &points[j].0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Traversal of `n` items under `dist`, stopped after `limit` entries.
pub fn traverse(n: usize, dist: impl Fn(usize, usize) -> f64, dir: Direction, limit: usize) -> RankedSequence {
    let limit = limit.min(n);
    let mut entries = Vec::with_capacity(limit);
    if limit == 0 {
        return RankedSequence { entries };
    }
    if n == 1 {
        entries.push(RankedEntry { index: 0, distance: None });
        return RankedSequence { entries };
    }
    let (mut a, mut b, mut best) = (0, 1, dist(0, 1));
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(i, j);
            if dir.better(d, best) {
                (a, b, best) = (i, j, d);
            }
        }
    }
    entries.push(RankedEntry { index: a, distance: None });
    if limit == 1 {
        return RankedSequence { entries };
    }
    entries.push(RankedEntry { index: b, distance: Some(best) });
    let mut chosen = vec![false; n];
    chosen[a] = true;
    chosen[b] = true;
    let mut min_d: Vec<f64> = (0..n).map(|k| dist(a, k).min(dist(b, k))).collect();
    while entries.len() < limit {
        let mut pick: Option<usize> = None;
        for k in (0..n).filter(|&k| !chosen[k]) {
            if pick.is_none_or(|p| dir.better(min_d[k], min_d[p])) {
                pick = Some(k);
            }
        }
        let k = pick.expect("unchosen points remain below the limit");
        chosen[k] = true;
        entries.push(RankedEntry {
            index: k,
            distance: Some(min_d[k]),
        });
        for j in (0..n).filter(|&j| !chosen[j]) {
            min_d[j] = min_d[j].min(dist(k, j));
        }
    }
    RankedSequence { entries }
}

fn latent_order(points: &[LatentVector], dir: Direction, limit: usize) -> Result<RankedSequence> {
    check_dims(points)?;
    Ok(traverse(points.len(), |i, j| euclidean(&points[i].0, &points[j].0), dir, limit))
}

pub fn fft_order(points: &[LatentVector]) -> Result<RankedSequence> {
    latent_order(points, Direction::FarthestFirst, points.len())
}

pub fn cft_order(points: &[LatentVector]) -> Result<RankedSequence> {
    latent_order(points, Direction::ClosestFirst, points.len())
}

/// First `k` entries of [`fft_order`], without ordering the rest.
pub fn fft_prefix(points: &[LatentVector], k: usize) -> Result<RankedSequence> {
    latent_order(points, Direction::FarthestFirst, k)
}

/// First `k` entries of [`cft_order`].
pub fn cft_prefix(points: &[LatentVector], k: usize) -> Result<RankedSequence> {
    latent_order(points, Direction::ClosestFirst, k)
}

/// Farthest-first order of raw traces under Hamming distance.
pub fn fft_order_traces(traces: &[CoverageTrace]) -> RankedSequence {
    traverse(
        traces.len(),
        |i, j| traces[i].hamming(&traces[j]) as f64,
        Direction::FarthestFirst,
        traces.len(),
    )
}

/// Anything carrying a latent encoding.
pub trait Embedded {
    fn latent(&self) -> &LatentVector;
}

impl Embedded for LatentVector {
    fn latent(&self) -> &LatentVector {
        self
    }
}

/// Keeps the first `k` records of the farthest-first order (in that order);
/// collections of at most `k` records are returned unchanged.
pub fn cull<R: Embedded>(records: Vec<R>, k: usize) -> Result<Vec<R>> {
    if k < 2 {
        return Err(Error::config("k", format!("must be at least 2, got {k}")));
    }
    if records.len() <= k {
        return Ok(records);
    }
    let latents: Vec<LatentVector> = records.iter().map(|r| r.latent().clone()).collect();
    let order = fft_prefix(&latents, k)?;
    let mut slots: Vec<Option<R>> = records.into_iter().map(Some).collect();
    Ok(order
        .entries
        .iter()
        .map(|e| slots[e.index].take().expect("traversal visits each index once"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[&[f32]]) -> Vec<LatentVector> {
        v.iter().map(|p| LatentVector(p.to_vec())).collect()
    }

    /// Recomputes every minimum distance from scratch at each step.
    fn brute(points: &[LatentVector], dir: Direction) -> Vec<(usize, Option<f64>)> {
        let n = points.len();
        let d = |i: usize, j: usize| euclidean(&points[i].0, &points[j].0);
        if n < 2 {
            return (0..n).map(|i| (i, None)).collect();
        }
        let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        pairs.sort_by(|x, y| {
            let c = d(x.0, x.1).partial_cmp(&d(y.0, y.1)).unwrap();
            let c = if dir == Direction::FarthestFirst { c.reverse() } else { c };
            c.then(x.cmp(y))
        });
        let (a, b) = pairs[0];
        let mut out = vec![(a, None), (b, Some(d(a, b)))];
        while out.len() < n {
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|k| out.iter().all(|o| o.0 != *k))
                .map(|k| (out.iter().map(|o| d(o.0, k)).fold(f64::INFINITY, f64::min), k))
                .collect();
            cands.sort_by(|x, y| {
                let c = x.0.partial_cmp(&y.0).unwrap();
                let c = if dir == Direction::FarthestFirst { c.reverse() } else { c };
                c.then(x.1.cmp(&y.1))
            });
            out.push((cands[0].1, Some(cands[0].0)));
        }
        out
    }

    fn pairs(r: &RankedSequence) -> Vec<(usize, Option<f64>)> {
        r.entries.iter().map(|e| (e.index, e.distance)).collect()
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(pairwise_distances(&pts(&[&[1.0, 2.0]])).unwrap(), vec![vec![0.0]]);
        let d = pairwise_distances(&pts(&[&[0.0, 0.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[1][0], 5.0);
        assert!(pairwise_distances(&pts(&[&[0.0], &[3.0, 4.0]])).is_err());
    }

    #[test]
    fn fft_examples() {
        let r = fft_order(&pts(&[&[0.0], &[10.0], &[1.0]])).unwrap();
        assert_eq!(pairs(&r), vec![(0, None), (1, Some(10.0)), (2, Some(1.0))]);
        let r = fft_order(&pts(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(r.indices(), vec![0, 1]);
        // unit square corners: (0,0) (1,0) (0,1) (1,1)
        let sq = pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let r = fft_order(&sq).unwrap();
        assert_eq!(r.indices(), vec![0, 3, 1, 2]);
        assert_eq!(r.entries[2].distance, Some(1.0));
        assert!(fft_order(&[]).unwrap().is_empty());
        assert_eq!(pairs(&fft_order(&pts(&[&[4.0]])).unwrap()), vec![(0, None)]);
    }

    #[test]
    fn cft_examples() {
        let r = cft_order(&pts(&[&[0.0], &[10.0], &[1.0]])).unwrap();
        assert_eq!(r.indices(), vec![0, 2, 1]);
        assert_eq!(cft_order(&pts(&[&[0.0], &[2.0]])).unwrap().indices(), vec![0, 1]);
        let same = vec![LatentVector(vec![1.0, 1.0]); 5];
        let r = cft_order(&same).unwrap();
        assert_eq!(r.indices(), vec![0, 1, 2, 3, 4]);
        assert!(r.entries[1..].iter().all(|e| e.distance == Some(0.0)));
    }

    #[test]
    fn cft_distances_can_decrease() {
        // 0, 0.5, 1.2, 1.5: start (1.2, 1.5) at 0.3, then 0.5 at 0.7, then 0 at 0.5
        let r = cft_order(&pts(&[&[0.0], &[0.5], &[1.2], &[1.5]])).unwrap();
        assert_eq!(r.indices(), vec![2, 3, 1, 0]);
        let d: Vec<f64> = r.entries[1..].iter().map(|e| e.distance.unwrap()).collect();
        assert!(d[1] > d[2]);
    }

    #[test]
    fn duplicates_go_to_the_tail() {
        let p = pts(&[&[0.0], &[5.0], &[0.0], &[2.0], &[5.0]]);
        let r = fft_order(&p).unwrap();
        assert_eq!(r.indices(), vec![0, 1, 3, 2, 4]);
        assert_eq!(r.entries[3].distance, Some(0.0));
    }

    #[test]
    fn cull_examples() {
        let three = pts(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(cull(three.clone(), 5).unwrap(), three);
        assert!(matches!(cull(three, 1), Err(Error::Config { .. })));
        let ten: Vec<LatentVector> = [3.0, 9.0, 0.0, 4.5, 7.0, 1.0, 8.0, 2.5, 6.0, 5.5]
            .iter()
            .map(|&v| LatentVector(vec![v]))
            .collect();
        let kept = cull(ten.clone(), 5).unwrap();
        let want: Vec<LatentVector> = brute(&ten, Direction::FarthestFirst)[..5].iter().map(|e| ten[e.0].clone()).collect();
        assert_eq!(kept, want);
        assert_eq!(kept[0].0, vec![9.0]);
        assert_eq!(kept[1].0, vec![0.0]);
        assert_eq!(DEFAULT_K, 5000);
    }

    #[test]
    fn hamming_traversal() {
        let t = |v: &[u8]| CoverageTrace::from_classes(v.to_vec()).unwrap();
        let traces = vec![t(&[0, 0, 0, 0]), t(&[1, 0, 0, 0]), t(&[1, 1, 1, 1])];
        let r = fft_order_traces(&traces);
        assert_eq!(pairs(&r), vec![(0, None), (2, Some(4.0)), (1, Some(1.0))]);
    }

    #[test]
    fn csv_rows() {
        let r = fft_order(&pts(&[&[0.0], &[10.0], &[1.0]])).unwrap();
        assert_eq!(r.to_csv(), "index,distance\n0,\n1,10\n2,1\n");
    }

    fn cloud() -> impl Strategy<Value = Vec<LatentVector>> {
        (1usize..6).prop_flat_map(|dim| {
            proptest::collection::vec(
                proptest::collection::vec((-8i32..8).prop_map(|v| v as f32 * 0.5), dim).prop_map(LatentVector),
                0..40,
            )
        })
    }

    proptest! {
        #[test]
        fn traversals_match_brute_force(p in cloud()) {
            prop_assert_eq!(pairs(&fft_order(&p).unwrap()), brute(&p, Direction::FarthestFirst));
            prop_assert_eq!(pairs(&cft_order(&p).unwrap()), brute(&p, Direction::ClosestFirst));
        }

        #[test]
        fn traversal_properties(p in cloud(), k in 2usize..10) {
            let f = fft_order(&p).unwrap();
            let mut idx = f.indices();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..p.len()).collect::<Vec<_>>());
            let d: Vec<f64> = f.entries.iter().filter_map(|e| e.distance).collect();
            prop_assert!(d.windows(2).all(|w| w[0] >= w[1]));
            let c = cft_order(&p).unwrap();
            let cd: Vec<f64> = c.entries.iter().filter_map(|e| e.distance).collect();
            prop_assert!(cd.iter().all(|&x| x >= cd[0]));
            let once = cull(p.clone(), k).unwrap();
            prop_assert_eq!(cull(once.clone(), k).unwrap(), once.clone());
            prop_assert_eq!(once.len(), p.len().min(k));
            let prefix = fft_prefix(&p, k).unwrap();
            prop_assert_eq!(&prefix.entries[..], &f.entries[..p.len().min(k)]);
        }
    }
}
