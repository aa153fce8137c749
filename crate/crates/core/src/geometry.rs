//! Planar geometry helpers: quadrature on intervals, triangles and convex
//! polygons, and clipping of convex regions.
//!
//! Points are stored as `[f64; 2]` in both dimensions; one-dimensional
//! geometry keeps the second coordinate at zero.

pub type Point = [f64; 2];

/// Three-point Gauss-Legendre rule on the reference interval `[0, 1]`
/// (exact up to degree 5).
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Six-point degree-4 rule on the reference triangle, barycentric
/// coordinates and area-normalised weights.
const TRI6: [([f64; 3], f64); 6] = [
    ([0.108_103_018_168_070, 0.445_948_490_915_965, 0.445_948_490_915_965], 0.223_381_589_678_011),
    ([0.445_948_490_915_965, 0.108_103_018_168_070, 0.445_948_490_915_965], 0.223_381_589_678_011),
    ([0.445_948_490_915_965, 0.445_948_490_915_965, 0.108_103_018_168_070], 0.223_381_589_678_011),
    ([0.816_847_572_980_459, 0.091_576_213_509_771, 0.091_576_213_509_771], 0.109_951_743_655_322),
    ([0.091_576_213_509_771, 0.816_847_572_980_459, 0.091_576_213_509_771], 0.109_951_743_655_322),
    ([0.091_576_213_509_771, 0.091_576_213_509_771, 0.816_847_572_980_459], 0.109_951_743_655_322),
];

/// A convex integration region: an interval on the x-axis or a convex
/// counter-clockwise polygon.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Interval(f64, f64),
    Polygon(Vec<Point>),
}

impl Region {
    pub fn measure(&self) -> f64 {
        match self {
            Region::Interval(a, b) => (b - a).max(0.0),
            Region::Polygon(pts) => polygon_area(pts).max(0.0),
        }
    }

    pub fn bbox(&self) -> (Point, Point) {
        match self {
            Region::Interval(a, b) => ([*a, 0.0], [*b, 0.0]),
            Region::Polygon(pts) => {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                for p in pts {
                    for k in 0..2 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
                (lo, hi)
            }
        }
    }

    pub fn translated(&self, shift: Point) -> Region {
        match self {
            Region::Interval(a, b) => Region::Interval(a + shift[0], b + shift[0]),
            Region::Polygon(pts) => {
                Region::Polygon(pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect())
            }
        }
    }

    /// Appends `(point, weight)` pairs of a degree-4 exact rule on the region.
    pub fn quadrature_into(&self, out: &mut Vec<(Point, f64)>) {
        match self {
            Region::Interval(a, b) => {
                let len = b - a;
                if len <= 0.0 {
                    return;
                }
                for (s, w) in GAUSS3 {
                    out.push(([a + s * len, 0.0], w * len));
                }
            }
            Region::Polygon(pts) => {
                for i in 1..pts.len().saturating_sub(1) {
                    triangle_quadrature_into(pts[0], pts[i], pts[i + 1], out);
                }
            }
        }
    }

    pub fn quadrature(&self) -> Vec<(Point, f64)> {
        let mut out = Vec::new();
        self.quadrature_into(&mut out);
        out
    }

    /// Containment test with an absolute tolerance.
    pub fn contains(&self, x: Point, tol: f64) -> bool {
        match self {
            Region::Interval(a, b) => x[0] >= a - tol && x[0] <= b + tol,
            Region::Polygon(pts) => {
                let n = pts.len();
                (0..n).all(|i| {
                    let p = pts[i];
                    let q = pts[(i + 1) % n];
                    let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                    cross(p, q, x) >= -tol * len
                })
            }
        }
    }

    /// Splits the region along the zero set of `f`; returns the parts where
    /// `f >= 0` and `f <= 0`.
    pub fn split_by_sign(&self, f: &Affine) -> (Option<Region>, Option<Region>) {
        match self {
            Region::Interval(a, b) => {
                let (fa, fb) = (f.eval([*a, 0.0]), f.eval([*b, 0.0]));
                if fa * fb >= 0.0 {
                    let positive = fa + fb >= 0.0;
                    let whole = Some(self.clone());
                    return if positive { (whole, None) } else { (None, whole) };
                }
                let r = a + (b - a) * fa / (fa - fb);
                let (left, right) = (Region::Interval(*a, r), Region::Interval(r, *b));
                if fa > 0.0 {
                    (Some(left), Some(right))
                } else {
                    (Some(right), Some(left))
                }
            }
            Region::Polygon(pts) => {
                let vals: Vec<f64> = pts.iter().map(|&p| f.eval(p)).collect();
                if vals.iter().all(|&v| v >= 0.0) {
                    return (Some(self.clone()), None);
                }
                if vals.iter().all(|&v| v <= 0.0) {
                    return (None, Some(self.clone()));
                }
                let half = |sign: f64| {
                    let out = clip_half_plane(pts, &vals, sign);
                    (out.len() >= 3 && polygon_area(&out) > 0.0).then_some(Region::Polygon(out))
                };
                (half(1.0), half(-1.0))
            }
        }
    }

    /// Intersection of two convex regions of the same kind; `None` when empty
    /// or degenerate.
    pub fn intersect(&self, other: &Region) -> Option<Region> {
        match (self, other) {
            (Region::Interval(a0, b0), Region::Interval(a1, b1)) => {
                let lo = a0.max(*a1);
                let hi = b0.min(*b1);
                let scale = (b0 - a0).abs().max((b1 - a1).abs());
                (hi - lo > 1e-14 * scale).then_some(Region::Interval(lo, hi))
            }
            (Region::Polygon(p), Region::Polygon(q)) => {
                let clipped = clip_convex(p, q);
                let scale = polygon_area(p).abs().max(polygon_area(q).abs());
                (clipped.len() >= 3 && polygon_area(&clipped) > 1e-14 * scale)
                    .then_some(Region::Polygon(clipped))
            }
            _ => None,
        }
    }
}

fn triangle_quadrature_into(a: Point, b: Point, c: Point, out: &mut Vec<(Point, f64)>) {
    let area = 0.5 * cross(a, b, c);
    if area <= 0.0 {
        return;
    }
    for (l, w) in TRI6 {
        let x = [
            l[0] * a[0] + l[1] * b[0] + l[2] * c[0],
            l[0] * a[1] + l[1] * b[1] + l[2] * c[1],
        ];
        out.push((x, w * area));
    }
}

/// `(b - a) x (c - a)`; positive for a counter-clockwise triple.
pub fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Signed area (positive for counter-clockwise ordering).
pub fn polygon_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let p = pts[i];
        let q = pts[(i + 1) % n];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland-Hodgman clipping of `subject` against the convex
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    dedup_points(output)
}

fn clip_half_plane(pts: &[Point], vals: &[f64], sign: f64) -> Vec<Point> {
    let n = pts.len();
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..n {
        let i = (j + n - 1) % n;
        let (fi, fj) = (sign * vals[i], sign * vals[j]);
        if fj >= 0.0 {
            if fi < 0.0 {
                out.push(lerp(pts[i], pts[j], fi / (fi - fj)));
            }
            out.push(pts[j]);
        } else if fi > 0.0 {
            out.push(lerp(pts[i], pts[j], fi / (fi - fj)));
        }
    }
    dedup_points(out)
}

fn lerp(p: Point, q: Point, t: f64) -> Point {
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn dedup_points(pts: Vec<Point>) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(pts.len());
    for p in pts {
        let dup = out
            .last()
            .is_some_and(|q| (p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        if !dup {
            out.push(p);
        }
    }
    if out.len() > 1 {
        let f = out[0];
        let l = out[out.len() - 1];
        if (f[0] - l[0]).abs() < 1e-15 && (f[1] - l[1]).abs() < 1e-15 {
            out.pop();
        }
    }
    out
}

/// Affine function `value + slope . x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub value: f64,
    pub slope: Point,
}

impl Affine {
    pub const fn constant(c: f64) -> Self {
        Affine { value: c, slope: [0.0, 0.0] }
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        self.value + self.slope[0] * x[0] + self.slope[1] * x[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_rule_integrates_quartics() {
        // int over the unit right triangle of x^4 = 1/30, of x^2 y^2 = 1/180
        let q = Region::Polygon(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).quadrature();
        let i4: f64 = q.iter().map(|(x, w)| w * x[0].powi(4)).sum();
        let i22: f64 = q.iter().map(|(x, w)| w * x[0].powi(2) * x[1].powi(2)).sum();
        assert!((i4 - 1.0 / 30.0).abs() < 1e-13);
        assert!((i22 - 1.0 / 180.0).abs() < 1e-13);
    }

    #[test]
    fn gauss_rule_integrates_quintics() {
        let q = Region::Interval(-1.0, 2.0).quadrature();
        let i: f64 = q.iter().map(|(x, w)| w * x[0].powi(5)).sum();
        assert!((i - (64.0 - 1.0) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn clip_overlapping_squares() {
        let a = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let b = vec![[0.5, 0.25], [1.5, 0.25], [1.5, 1.25], [0.5, 1.25]];
        let c = Region::Polygon(a).intersect(&Region::Polygon(b)).unwrap();
        assert!((c.measure() - 0.375).abs() < 1e-14);
    }

    #[test]
    fn disjoint_regions_do_not_intersect() {
        let a = Region::Polygon(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let b = a.translated([1.0, 1.0]);
        assert!(a.intersect(&b).is_none());
        assert!(Region::Interval(0.0, 1.0).intersect(&Region::Interval(1.0, 2.0)).is_none());
    }

    #[test]
    fn sign_split_partitions_region() {
        let t = Region::Polygon(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let f = Affine { value: -0.5, slope: [1.0, 0.0] };
        let (pos, neg) = t.split_by_sign(&f);
        let (pos, neg) = (pos.unwrap(), neg.unwrap());
        assert!((pos.measure() - 0.125).abs() < 1e-15);
        assert!((neg.measure() - 0.375).abs() < 1e-15);
        let (a, b) = Region::Interval(0.0, 1.0).split_by_sign(&Affine { value: 0.25, slope: [-1.0, 0.0] });
        assert_eq!(a, Some(Region::Interval(0.0, 0.25)));
        assert_eq!(b, Some(Region::Interval(0.25, 1.0)));
        let (a, b) = t.split_by_sign(&Affine::constant(1.0));
        assert_eq!(a, Some(t.clone()));
        assert!(b.is_none());
    }

    #[test]
    fn containment_with_tolerance() {
        let t = Region::Polygon(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(t.contains([0.25, 0.25], 0.0));
        assert!(t.contains([0.5, 0.5], 1e-12));
        assert!(!t.contains([0.6, 0.6], 1e-12));
    }
}
