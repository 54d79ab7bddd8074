//! Zero-level contours on a 2-D grid by marching squares.

/// A line segment between two points of the plane.
pub type Segment = [[f64; 2]; 2];

/// Segments approximating `{f = 0}` over `[lo, hi]` with `res × res` cells.
///
/// Corners with `f ≥ 0` count as inside. Crossings are placed by linear
/// interpolation along cell edges; saddle cells are resolved with the value
/// at the cell centre.
pub fn marching_squares<E>(
    f: impl Fn(f64, f64) -> Result<f64, E>,
    lo: [f64; 2],
    hi: [f64; 2],
    res: usize,
) -> Result<Vec<Segment>, E> {
    let res = res.max(1);
    let step = [(hi[0] - lo[0]) / res as f64, (hi[1] - lo[1]) / res as f64];
    let coord = |k: usize, d: usize| if k == res { hi[d] } else { lo[d] + k as f64 * step[d] };
    let mut v = vec![0.0; (res + 1) * (res + 1)];
    for i in 0..=res {
        for j in 0..=res {
            v[i * (res + 1) + j] = f(coord(i, 0), coord(j, 1))?;
        }
    }
    let at = |i: usize, j: usize| v[i * (res + 1) + j];
    let mut segs = Vec::new();
    for i in 0..res {
        for j in 0..res {
            let (x0, x1, y0, y1) = (coord(i, 0), coord(i + 1, 0), coord(j, 1), coord(j + 1, 1));
            let (v00, v10, v11, v01) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            // Edges in the order bottom, right, top, left.
            let edges = [
                ((x0, y0, v00), (x1, y0, v10)),
                ((x1, y0, v10), (x1, y1, v11)),
                ((x0, y1, v01), (x1, y1, v11)),
                ((x0, y0, v00), (x0, y1, v01)),
            ];
            let mut cross: [Option<[f64; 2]>; 4] = [None; 4];
            for (k, ((ax, ay, va), (bx, by, vb))) in edges.into_iter().enumerate() {
                if (va >= 0.0) != (vb >= 0.0) {
                    let t = (va / (va - vb)).clamp(0.0, 1.0);
                    cross[k] = Some([ax + t * (bx - ax), ay + t * (by - ay)]);
                }
            }
            let pts: Vec<[f64; 2]> = cross.iter().flatten().copied().collect();
            match pts.len() {
                2 => segs.push([pts[0], pts[1]]),
                4 => {
                    let [b, r, t, l] = cross.map(|c| c.expect("all four edges cross"));
                    let centre = f(0.5 * (x0 + x1), 0.5 * (y0 + y1))?;
                    if (centre >= 0.0) == (v00 >= 0.0) {
                        segs.push([b, r]);
                        segs.push([t, l]);
                    } else {
                        segs.push([b, l]);
                        segs.push([r, t]);
                    }
                }
                _ => {}
            }
        }
    }
    Ok(segs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn circle_points_lie_near_the_circle() {
        let f = |x: f64, y: f64| Ok::<_, Infallible>(1.0 - x * x - y * y);
        let segs = marching_squares(f, [-2.0, -2.0], [2.0, 2.0], 80).unwrap();
        assert!(segs.len() > 100);
        for s in &segs {
            for p in s {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!((r - 1.0).abs() < 0.05, "{r}");
            }
        }
    }

    #[test]
    fn empty_level_set_gives_no_segments() {
        let f = |_: f64, _: f64| Ok::<_, Infallible>(-1.0);
        assert!(marching_squares(f, [0.0, 0.0], [1.0, 1.0], 10).unwrap().is_empty());
    }

    #[test]
    fn linear_function_is_exact() {
        let f = |x: f64, y: f64| Ok::<_, Infallible>(x + 2.0 * y - 0.3);
        for s in marching_squares(f, [-1.0, -1.0], [1.0, 1.0], 7).unwrap() {
            for p in s {
                assert!((p[0] + 2.0 * p[1] - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saddle_cell_produces_two_segments() {
        let f = |x: f64, y: f64| Ok::<_, Infallible>(x * y);
        let segs = marching_squares(f, [-1.0, -1.0], [1.0, 1.0], 1).unwrap();
        assert_eq!(segs.len(), 2);
    }
}
