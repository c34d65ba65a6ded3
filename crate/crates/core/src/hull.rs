//! Planar convex hulls by Andrew's monotone chain.

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull {
    /// Counter-clockwise, starting at the lowest-x (then lowest-y) point,
    /// without collinear boundary points.
    pub vertices: Vec<[f64; 2]>,
    pub area: f64,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Area of a simple polygon by the shoelace formula; positive when the ring
/// is counter-clockwise.
pub fn shoelace_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for k in 0..n {
        let (p, q) = (ring[k], ring[(k + 1) % n]);
        twice += p[0] * q[1] - q[0] * p[1];
    }
    twice / 2.0
}

pub fn convex_hull(points: &[[f64; 2]]) -> ConvexHull {
    let mut pts: Vec<[f64; 2]> = points.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return ConvexHull { vertices: pts, area: 0.0 };
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let area = shoelace_area(&hull).max(0.0);
    if hull.len() < 3 {
        // Every point lies on one line.
        return ConvexHull { vertices: hull, area: 0.0 };
    }
    ConvexHull { vertices: hull, area }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Hull edges are the ordered pairs with every point on or left of them.
    fn brute_force_area(points: &[[f64; 2]]) -> f64 {
        let mut on_hull: Vec<[f64; 2]> = Vec::new();
        for (i, &p) in points.iter().enumerate() {
            for (j, &q) in points.iter().enumerate() {
                if i == j || p == q {
                    continue;
                }
                if points.iter().all(|&r| cross(p, q, r) >= 0.0) {
                    on_hull.push(p);
                    on_hull.push(q);
                }
            }
        }
        if on_hull.len() < 3 {
            return 0.0;
        }
        let n = on_hull.len() as f64;
        let cx = on_hull.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = on_hull.iter().map(|p| p[1]).sum::<f64>() / n;
        on_hull.sort_by(|a, b| (a[1] - cy).atan2(a[0] - cx).total_cmp(&(b[1] - cy).atan2(b[0] - cx)));
        on_hull.dedup();
        shoelace_area(&on_hull).abs()
    }

    #[test]
    fn unit_square() {
        let h = convex_hull(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]);
        assert_eq!(h.area, 1.0);
        assert_eq!(h.vertices, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(convex_hull(&[]).area, 0.0);
        assert_eq!(convex_hull(&[[1.0, 2.0]]).area, 0.0);
        assert_eq!(convex_hull(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).area, 0.0);
        assert_eq!(convex_hull(&[[3.0, 3.0], [3.0, 3.0], [3.0, 3.0]]).area, 0.0);
    }

    #[test]
    fn random_points_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(3..120);
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
            let h = convex_hull(&pts);
            let oracle = brute_force_area(&pts);
            assert!((h.area - oracle).abs() <= 1e-9 * oracle.max(1.0));
            assert!((shoelace_area(&h.vertices) - h.area).abs() < 1e-12);
            for &p in &pts {
                for k in 0..h.vertices.len() {
                    let (a, b) = (h.vertices[k], h.vertices[(k + 1) % h.vertices.len()]);
                    assert!(cross(a, b, p) >= -1e-9);
                }
            }
        }
    }

    #[test]
    fn thousand_points_contained() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 2]> = (0..1000).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let h = convex_hull(&pts);
        let oracle = brute_force_area(&pts);
        assert!((h.area - oracle).abs() <= 1e-9 * oracle);
        assert!(h.area > 9000.0 && h.area <= 10000.0);
    }
}
