//! Bowyer–Watson Delaunay triangulation for modest point counts.

use crate::error::{IknoError, Result};

/// Triangulates `points`, returning vertex index triples (counter-clockwise).
///
/// Duplicate points are triangulated once (the first occurrence wins).
/// Fails if fewer than three distinct, non-collinear points are given.
pub fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    let mut unique: Vec<usize> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !unique.iter().any(|&u| points[u] == *p) {
            unique.push(i);
        }
    }
    if unique.len() < 3 {
        return Err(IknoError::Input("triangulation needs at least 3 distinct points".into()));
    }
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &i in &unique {
        min_x = min_x.min(points[i][0]);
        min_y = min_y.min(points[i][1]);
        max_x = max_x.max(points[i][0]);
        max_y = max_y.max(points[i][1]);
    }
    let a = unique[0];
    let b = unique[1];
    if unique[2..]
        .iter()
        .all(|&c| orient(points[a], points[b], points[c]) == 0.0)
    {
        return Err(IknoError::Input("all sample points are collinear".into()));
    }

    // Vertices 0..n are the inputs; n, n+1, n+2 form an enclosing super-triangle.
    let n = points.len();
    let span = (max_x - min_x).max(max_y - min_y).max(f64::MIN_POSITIVE);
    let (cx, cy) = (0.5 * (min_x + max_x), 0.5 * (min_y + max_y));
    let mut verts: Vec<[f64; 2]> = points.to_vec();
    verts.push([cx - 100.0 * span, cy - 50.0 * span]);
    verts.push([cx + 100.0 * span, cy - 50.0 * span]);
    verts.push([cx, cy + 100.0 * span]);

    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    for &p in &unique {
        let pt = verts[p];
        let (bad, keep): (Vec<_>, Vec<_>) = tris
            .into_iter()
            .partition(|t| in_circumcircle(&verts, t, pt));
        tris = keep;
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(bad.len() * 3);
        for t in &bad {
            for (u, v) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if let Some(k) = edges.iter().position(|&(x, y)| x == v && y == u) {
                    edges.swap_remove(k);
                } else {
                    edges.push((u, v));
                }
            }
        }
        for (u, v) in edges {
            tris.push([u, v, p]);
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    for t in &mut tris {
        if orient(verts[t[0]], verts[t[1]], verts[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }
    tris.retain(|t| orient(verts[t[0]], verts[t[1]], verts[t[2]]) > 0.0);
    Ok(tris)
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn in_circumcircle(verts: &[[f64; 2]], t: &[usize; 3], p: [f64; 2]) -> bool {
    let (mut a, mut b, c) = (verts[t[0]], verts[t[1]], verts[t[2]]);
    if orient(a, b, c) < 0.0 {
        std::mem::swap(&mut a, &mut b);
    }
    let (adx, ady) = (a[0] - p[0], a[1] - p[1]);
    let (bdx, bdy) = (b[0] - p[0], b[1] - p[1]);
    let (cdx, cdy) = (c[0] - p[0], c[1] - p[1]);
    let det = (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        - (bdx * bdx + bdy * bdy) * (adx * cdy - cdx * ady)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady);
    det > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(points: &[[f64; 2]], tris: &[[usize; 3]]) -> f64 {
        tris.iter()
            .map(|t| 0.5 * orient(points[t[0]], points[t[1]], points[t[2]]))
            .sum()
    }

    #[test]
    fn square_grid_covers_hull() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                pts.push([i as f64 * 0.25, j as f64 / 3.0]);
            }
        }
        let tris = triangulate(&pts).unwrap();
        assert_eq!(tris.len(), 2 * 4 * 3);
        assert!((area(&pts, &tris) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delaunay_property_on_scattered_points() {
        let pts: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let t = i as f64;
                [(t * 0.618).fract(), (t * 0.414 + 0.1).fract()]
            })
            .collect();
        let tris = triangulate(&pts).unwrap();
        for t in &tris {
            for (k, p) in pts.iter().enumerate() {
                if !t.contains(&k) {
                    assert!(!in_circumcircle(&pts, t, *p));
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(triangulate(&[[0.0, 0.0], [1.0, 1.0]]).is_err());
        assert!(triangulate(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
        assert!(triangulate(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]).is_err());
        let tris = triangulate(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(tris.len(), 1);
    }
}
