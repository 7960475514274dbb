use super::{centroid, GeometryError, Point3, Result};

const LEAF_SIZE: usize = 8;

/// Static 3-d tree for exact nearest-neighbour queries.
pub(crate) struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

impl<'a> KdTree<'a> {
    pub(crate) fn new(points: &'a [Point3]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build(0, points.len(), 0);
        tree
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let axis = depth % 3;
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a].component(axis).total_cmp(&pts[b].component(axis))
        });
        let value = pts[self.order[mid]].component(axis);
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// Squared distance and index of the nearest point.
    pub(crate) fn nearest(&self, q: Point3) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: Point3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = q.distance_sq(self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let delta = q.component(axis) - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if delta * delta <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Index of the point in `points` closest to `q` (lowest index on ties).
pub fn nearest_index(points: &[Point3], q: Point3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = q.distance_sq(*p);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Nearest point of `points` for every query, via one k-d tree.
pub fn nearest_indices(points: &[Point3], queries: &[Point3]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let tree = KdTree::new(points);
    Ok(queries.iter().map(|&q| tree.nearest(q).1).collect())
}

/// Mean over `from` of the Euclidean distance to the nearest point of `to`.
pub fn directed_mean_distance(from: &[Point3], to: &[Point3]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let tree = KdTree::new(to);
    let sum: f64 = from.iter().map(|&p| tree.nearest(p).0.sqrt()).sum();
    Ok(sum / from.len() as f64)
}

/// Symmetric mean-distance Chamfer: the average of both directed means.
pub fn chamfer_distance(p: &[Point3], q: &[Point3]) -> Result<f64> {
    Ok(0.5 * (directed_mean_distance(p, q)? + directed_mean_distance(q, p)?))
}

/// Greedy farthest point sampling seeded with the point farthest from the
/// centroid. Ties always resolve to the lowest index.
pub fn farthest_point_sampling(points: &[Point3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(GeometryError::KTooLarge { k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let c = centroid(points).ok_or(GeometryError::EmptyInput)?;
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = p.distance(c);
        if d > best {
            best = d;
            first = i;
        }
    }
    farthest_point_sampling_from(points, k, first)
}

/// The max-min stage of farthest point sampling from a given first index.
pub fn farthest_point_sampling_from(points: &[Point3], k: usize, first: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(GeometryError::KTooLarge { k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if first >= points.len() {
        return Err(GeometryError::InvalidArgument(format!("seed index {first} out of range")));
    }
    let mut selected = vec![false; points.len()];
    let mut min_dist: Vec<f64> = points.iter().map(|p| p.distance(points[first])).collect();
    let mut out = Vec::with_capacity(k);
    selected[first] = true;
    out.push(first);
    while out.len() < k {
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if !selected[i] && d > best {
                best = d;
                next = i;
            }
        }
        selected[next] = true;
        out.push(next);
        let anchor = points[next];
        for (d, p) in min_dist.iter_mut().zip(points) {
            *d = d.min(p.distance(anchor));
        }
    }
    Ok(out)
}

/// Centers a point set, scales it into the unit sphere and rests it on `z = 0`.
pub fn normalize_for_eval(points: &[Point3]) -> Result<Vec<Point3>> {
    let c = centroid(points).ok_or(GeometryError::EmptyInput)?;
    let radius = points.iter().map(|p| p.distance(c)).fold(0.0, f64::max);
    if radius == 0.0 {
        return Err(GeometryError::DegenerateInput);
    }
    let scaled: Vec<Point3> = points.iter().map(|&p| (p - c) * (1.0 / radius)).collect();
    let min_z = scaled.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    Ok(scaled
        .into_iter()
        .map(|p| Point3::new(p.x, p.y, p.z - min_z))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn brute_chamfer(p: &[Point3], q: &[Point3]) -> f64 {
        let directed = |a: &[Point3], b: &[Point3]| {
            a.iter()
                .map(|x| b.iter().map(|y| x.distance(*y)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / a.len() as f64
        };
        0.5 * (directed(p, q) + directed(q, p))
    }

    fn brute_fps(points: &[Point3], k: usize) -> Vec<usize> {
        let n = points.len() as f64;
        let c = points.iter().fold(Point3::ORIGIN, |a, &p| a + p) * (1.0 / n);
        let mut first = 0;
        for i in 0..points.len() {
            if points[i].distance(c) > points[first].distance(c) {
                first = i;
            }
        }
        let mut out = vec![first];
        while out.len() < k {
            let score = |i: usize| out.iter().map(|&j| points[i].distance(points[j])).fold(f64::INFINITY, f64::min);
            let mut best: Option<usize> = None;
            for i in 0..points.len() {
                if out.contains(&i) {
                    continue;
                }
                if best.is_none_or(|b| score(i) > score(b)) {
                    best = Some(i);
                }
            }
            out.push(best.unwrap());
        }
        out
    }

    #[test]
    fn chamfer_basics() {
        let p = random_points(10, 1);
        assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
        let a = [Point3::ORIGIN];
        let b = [Point3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_distance(&a, &[]), Err(GeometryError::EmptyInput));
    }

    #[test]
    fn chamfer_matches_brute_force_for_small_sets() {
        for seed in 0..20 {
            let p = random_points(8, seed);
            let q = random_points(8, seed + 100);
            assert_eq!(chamfer_distance(&p, &q).unwrap(), brute_chamfer(&p, &q));
        }
        for n in [1usize, 5, 17, 33, 64] {
            let p = random_points(n, n as u64);
            let q = random_points(64 - n + 1, 7 * n as u64);
            assert_eq!(chamfer_distance(&p, &q).unwrap(), brute_chamfer(&p, &q));
        }
    }

    #[test]
    fn fps_collinear() {
        let pts: Vec<Point3> = [0.0, 1.0, 2.0, 10.0].iter().map(|&x| Point3::new(x, 0.0, 0.0)).collect();
        assert_eq!(farthest_point_sampling(&pts, 2).unwrap(), vec![3, 0]);
        let mut all = farthest_point_sampling(&pts, 4).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(farthest_point_sampling(&pts, 5), Err(GeometryError::KTooLarge { .. })));
    }

    #[test]
    fn fps_matches_greedy_oracle() {
        for seed in 0..30 {
            let pts = random_points(10, seed);
            assert_eq!(farthest_point_sampling(&pts, 4).unwrap(), brute_fps(&pts, 4));
        }
    }

    #[test]
    fn fps_exact_ties_take_lowest_index() {
        let pts = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
        ];
        assert_eq!(farthest_point_sampling(&pts, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn normalize_examples() {
        let corners: Vec<Point3> = (0..8)
            .map(|i| {
                let s = |b: usize| if i & b != 0 { 1.0 } else { -1.0 };
                Point3::new(s(1), s(2), s(4))
            })
            .collect();
        let n = normalize_for_eval(&corners).unwrap();
        let max_r = n
            .iter()
            .map(|p| Point3::new(p.x, p.y, p.z - 1.0 / 3f64.sqrt()).norm())
            .fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12);
        assert!(n.iter().map(|p| p.z).fold(f64::INFINITY, f64::min).abs() < 1e-15);
        assert_eq!(normalize_for_eval(&[Point3::ORIGIN; 3]), Err(GeometryError::DegenerateInput));
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_nonnegative(seed in 0u64..1000, n in 1usize..40, m in 1usize..40) {
            let p = random_points(n, seed);
            let q = random_points(m, seed ^ 0xabc);
            let a = chamfer_distance(&p, &q).unwrap();
            let b = chamfer_distance(&q, &p).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-15 * (1.0 + a));
            prop_assert_eq!(a, brute_chamfer(&p, &q));
        }

        #[test]
        fn fps_ignores_duplicated_unselected_points(seed in 0u64..1000, k in 1usize..6) {
            let pts = random_points(12, seed);
            let first = farthest_point_sampling(&pts, 1).unwrap()[0];
            let chosen = farthest_point_sampling_from(&pts, k, first).unwrap();
            let mut extended = pts.clone();
            for (i, &p) in pts.iter().enumerate() {
                if !chosen.contains(&i) && i % 2 == 0 {
                    extended.push(p);
                }
            }
            let again = farthest_point_sampling_from(&extended, k, first).unwrap();
            let a: Vec<Point3> = chosen.iter().map(|&i| pts[i]).collect();
            let b: Vec<Point3> = again.iter().map(|&i| extended[i]).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalize_is_scale_invariant_and_idempotent(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let pts = random_points(16, seed);
            let base = normalize_for_eval(&pts).unwrap();
            let scaled: Vec<Point3> = pts.iter().map(|&p| p * scale).collect();
            let other = normalize_for_eval(&scaled).unwrap();
            let twice = normalize_for_eval(&base).unwrap();
            for ((a, b), c) in base.iter().zip(&other).zip(&twice) {
                prop_assert!(a.distance(*b) < 1e-9);
                prop_assert!(a.distance(*c) < 1e-12);
            }
        }
    }
}
