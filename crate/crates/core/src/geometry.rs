//! Planar geometry shared by the constraint operators, the metrics and the
//! synthetic world: winding numbers, closest points on polylines and
//! oriented-box tests.

pub type Point = [f64; 2];

#[inline]
fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Signed side of `p` relative to the directed line `a -> b`; positive when left.
#[inline]
fn is_left(a: Point, b: Point, p: Point) -> f64 {
    cross(sub(b, a), sub(p, a))
}

/// Winding number of a closed polygon around `p`. The ring may or may not
/// repeat its first vertex at the end. Zero means outside.
pub fn winding_number(ring: &[Point], p: Point) -> i32 {
    let n = ring.len();
    if n < 3 {
        return 0;
    }
    let closed = ring[0] == ring[n - 1];
    let edges = if closed { n - 1 } else { n };
    let mut wn = 0;
    for i in 0..edges {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if a[1] <= p[1] {
            if b[1] > p[1] && is_left(a, b, p) > 0.0 {
                wn += 1;
            }
        } else if b[1] <= p[1] && is_left(a, b, p) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

pub fn inside_any(polygons: &[Vec<Point>], p: Point) -> bool {
    polygons.iter().any(|ring| winding_number(ring, p) != 0)
}

/// Closest point to `p` on segment `a-b`.
pub fn closest_on_segment(a: Point, b: Point, p: Point) -> Point {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return a;
    }
    let s = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    [a[0] + s * ab[0], a[1] + s * ab[1]]
}

pub fn dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d).sqrt()
}

/// Closest point on an open polyline (or a closed ring) and its distance.
pub fn closest_on_polyline(line: &[Point], p: Point) -> Option<(Point, f64)> {
    match line.len() {
        0 => None,
        1 => Some((line[0], dist(line[0], p))),
        _ => line
            .windows(2)
            .map(|w| {
                let c = closest_on_segment(w[0], w[1], p);
                (c, dist(c, p))
            })
            .min_by(|x, y| x.1.total_cmp(&y.1)),
    }
}

/// Closest boundary point over a set of polygons.
pub fn closest_boundary_point(polygons: &[Vec<Point>], p: Point) -> Option<(Point, f64)> {
    polygons
        .iter()
        .filter_map(|ring| closest_on_ring(ring, p))
        .min_by(|x, y| x.1.total_cmp(&y.1))
}

fn closest_on_ring(ring: &[Point], p: Point) -> Option<(Point, f64)> {
    if ring.len() >= 2 && ring[0] != ring[ring.len() - 1] {
        let mut closed = ring.to_vec();
        closed.push(ring[0]);
        closest_on_polyline(&closed, p)
    } else {
        closest_on_polyline(ring, p)
    }
}

/// Signed distance to the nearest boundary: negative inside any polygon.
pub fn signed_boundary_distance(polygons: &[Vec<Point>], p: Point) -> Option<f64> {
    let (_, d) = closest_boundary_point(polygons, p)?;
    Some(if inside_any(polygons, p) { -d } else { d })
}

/// Shoelace area (absolute) of a ring.
pub fn polygon_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        s += cross(a, b);
    }
    0.5 * s.abs()
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = is_left(c, d, a);
    let d2 = is_left(c, d, b);
    let d3 = is_left(a, b, c);
    let d4 = is_left(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when no two non-adjacent edges of the ring cross.
pub fn is_simple(ring: &[Point]) -> bool {
    let mut pts = ring.to_vec();
    if pts.len() >= 2 && pts[0] == pts[pts.len() - 1] {
        pts.pop();
    }
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        for j in (i + 1)..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Oriented bounding box: center, heading (radians), length along heading,
/// width across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    fn axes(&self) -> [Point; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Point; 4] {
        let [u, v] = self.axes();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let at = |i: f64, j: f64| {
            [
                self.center[0] + i * hl * u[0] + j * hw * v[0],
                self.center[1] + i * hl * u[1] + j * hw * v[1],
            ]
        };
        [at(1.0, 1.0), at(-1.0, 1.0), at(-1.0, -1.0), at(1.0, -1.0)]
    }

    /// Minimum overlap depth along the four separating axes; `None` when a
    /// separating axis exists (touching counts as separated).
    pub fn penetration(&self, other: &OrientedBox) -> Option<f64> {
        let ca = self.corners();
        let cb = other.corners();
        let mut depth = f64::INFINITY;
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = project(&ca, axis);
            let (bmin, bmax) = project(&cb, axis);
            let overlap = amax.min(bmax) - amin.max(bmin);
            if overlap <= 0.0 {
                return None;
            }
            depth = depth.min(overlap);
        }
        Some(depth)
    }

    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        self.penetration(other).is_some()
    }

    /// Signed separation: minimum edge-to-edge distance when disjoint,
    /// negative penetration depth when overlapping.
    pub fn signed_distance(&self, other: &OrientedBox) -> f64 {
        if let Some(depth) = self.penetration(other) {
            return -depth;
        }
        let ca = self.corners();
        let cb = other.corners();
        let mut best = f64::INFINITY;
        for i in 0..4 {
            let (a0, a1) = (ca[i], ca[(i + 1) % 4]);
            for p in cb {
                best = best.min(dist(closest_on_segment(a0, a1, p), p));
            }
            let (b0, b1) = (cb[i], cb[(i + 1) % 4]);
            for p in ca {
                best = best.min(dist(closest_on_segment(b0, b1, p), p));
            }
        }
        best
    }
}

fn project(corners: &[Point; 4], axis: Point) -> (f64, f64) {
    corners
        .iter()
        .map(|&c| dot(c, axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Vec<Point> {
        vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]
    }

    #[test]
    fn winding_inside_outside() {
        let sq = unit_square();
        assert_eq!(winding_number(&sq, [0.5, 0.5]), 1);
        assert_eq!(winding_number(&sq, [1.5, 0.5]), 0);
        let mut cw = sq.clone();
        cw.reverse();
        assert_eq!(winding_number(&cw, [0.5, 0.5]), -1);
        // open ring form gives the same answer
        assert_eq!(winding_number(&sq[..4], [0.25, 0.75]), 1);
    }

    #[test]
    fn signed_distance_to_square_boundary() {
        let sq = vec![unit_square()];
        let d = signed_boundary_distance(&sq, [3.0, 0.5]).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let d = signed_boundary_distance(&sq, [0.5, 0.4]).unwrap();
        assert!((d + 0.4).abs() < 1e-12);
    }

    #[test]
    fn axis_aligned_unit_boxes_half_apart_collide() {
        let a = OrientedBox::new([0.0, 0.0], 0.0, 1.0, 1.0);
        let b = OrientedBox::new([0.5, 0.0], 0.0, 1.0, 1.0);
        assert!(a.overlaps(&b));
        assert!((a.penetration(&b).unwrap() - 0.5).abs() < 1e-12);
        let c = OrientedBox::new([2.0, 0.0], 0.0, 1.0, 1.0);
        assert!(!a.overlaps(&c));
        assert!((a.signed_distance(&c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_box_separation() {
        // diamond touching region: 45 degree box centered at distance where corner reaches
        let a = OrientedBox::new([0.0, 0.0], std::f64::consts::FRAC_PI_4, 1.0, 1.0);
        let half_diag = 0.5 * 2f64.sqrt();
        let b = OrientedBox::new([half_diag + 0.5 + 0.1, 0.0], 0.0, 1.0, 1.0);
        assert!(!a.overlaps(&b));
        assert!((a.signed_distance(&b) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn area_and_simplicity() {
        assert!((polygon_area(&unit_square()) - 1.0).abs() < 1e-15);
        assert!(is_simple(&unit_square()));
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple(&bowtie));
    }
}
