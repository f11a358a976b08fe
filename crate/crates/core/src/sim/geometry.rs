//! Planar geometry on ego-frame metres.

pub type Point = [f64; 2];

/// Oriented rectangle: center, width (lateral), length (longitudinal), yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Point, width: f64, length: f64, yaw: f64) -> Self {
        Self {
            center,
            width,
            length,
            yaw,
        }
    }

    /// Unit axes: heading, then left normal.
    pub fn axes(&self) -> [Point; 2] {
        let (s, c) = self.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [Point; 4] {
        let [f, l] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let [cx, cy] = self.center;
        let p = |a: f64, b: f64| [cx + a * f[0] + b * l[0], cy + a * f[1] + b * l[1]];
        [p(hl, hw), p(-hl, hw), p(-hl, -hw), p(hl, -hw)]
    }

    pub fn contains(&self, p: Point) -> bool {
        let [f, l] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        dot(d, f).abs() <= self.length / 2.0 && dot(d, l).abs() <= self.width / 2.0
    }

    /// Projection interval onto a unit axis.
    fn project(&self, axis: Point) -> (f64, f64) {
        let [f, l] = self.axes();
        let c = dot(self.center, axis);
        let r = self.length / 2.0 * dot(f, axis).abs() + self.width / 2.0 * dot(l, axis).abs();
        (c - r, c + r)
    }
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Slack that keeps exactly touching boxes overlapping under rounding.
const TOUCH_EPS: f64 = 1e-9;

/// Separating-axis test; touching boxes overlap.
pub fn box_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    a.axes().into_iter().chain(b.axes()).all(|ax| {
        let (a0, a1) = a.project(ax);
        let (b0, b1) = b.project(ax);
        a0 <= b1 + TOUCH_EPS && b0 <= a1 + TOUCH_EPS
    })
}

/// Earliest `t` in `[0, horizon]` at which `a` and `b`, translating with
/// constant velocities, first touch. Exact for convex polygons: the
/// overlapping times per separating axis are intervals and their
/// intersection is the contact window.
pub fn time_to_contact(a: &OrientedBox, va: Point, b: &OrientedBox, vb: Point, horizon: f64) -> Option<f64> {
    let rel = sub(vb, va);
    let (mut lo, mut hi) = (0.0f64, horizon);
    for ax in a.axes().into_iter().chain(b.axes()) {
        let (a0, a1) = a.project(ax);
        let (b0, b1) = b.project(ax);
        let s = dot(rel, ax);
        // b's interval moves by s * t; overlap while b0 + s t <= a1 and a0 <= b1 + s t
        if s.abs() < 1e-12 {
            if b0 > a1 || a0 > b1 {
                return None;
            }
            continue;
        }
        let t1 = (a1 - b0) / s;
        let t2 = (a0 - b1) / s;
        let (enter, exit) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        lo = lo.max(enter);
        hi = hi.min(exit);
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

/// Even-odd test with boundary points counted inside (within `tol`).
pub fn point_in_polygon(p: Point, poly: &[Point], tol: f64) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if segment_distance(p, a, b).0 <= tol {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance from `p` to segment `ab` and the clamped parameter along it.
pub fn segment_distance(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (dist(p, q), t)
}

/// Nearest point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    /// Arc length from the polyline start.
    pub arc: f64,
    /// Unit direction of the nearest segment.
    pub tangent: Point,
}

pub fn project_polyline(p: Point, line: &[Point]) -> Option<Projection> {
    if line.len() < 2 {
        return None;
    }
    let mut best: Option<Projection> = None;
    let mut acc = 0.0;
    for w in line.windows(2) {
        let len = dist(w[0], w[1]);
        let (d, t) = segment_distance(p, w[0], w[1]);
        if best.map_or(true, |b| d < b.distance) && len > 0.0 {
            let tangent = [(w[1][0] - w[0][0]) / len, (w[1][1] - w[0][1]) / len];
            best = Some(Projection {
                distance: d,
                arc: acc + t * len,
                tangent,
            });
        }
        acc += len;
    }
    best
}

/// Proper or touching intersection of segments `p1p2` and `q1q2`.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(sub(q2, q1), sub(p1, q1));
    let d2 = cross(sub(q2, q1), sub(p2, q1));
    let d3 = cross(sub(p2, p1), sub(q1, p1));
    let d4 = cross(sub(p2, p1), sub(q2, p1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0 && p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = a % two_pi;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    } else if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_distant_boxes() {
        let a = OrientedBox::new([0.0, 0.0], 2.0, 2.0, 0.3);
        assert!(box_overlap(&a, &a));
        let b = OrientedBox::new([100.0, 0.0], 2.0, 2.0, 0.0);
        assert!(!box_overlap(&a, &b));
    }

    #[test]
    fn rotated_squares_sharing_a_corner() {
        let q = std::f64::consts::FRAC_PI_4;
        let h = 0.5 * 2f64.sqrt();
        // diamonds whose tips meet at the origin
        let a = OrientedBox::new([-h, 0.0], 1.0, 1.0, q);
        let b = OrientedBox::new([h, 0.0], 1.0, 1.0, q);
        assert!(box_overlap(&a, &b));
        let c = OrientedBox::new([h + 1e-6, 0.0], 1.0, 1.0, q);
        assert!(!box_overlap(&a, &c));
    }

    #[test]
    fn closing_at_five_metres_per_second() {
        let ego = OrientedBox::new([0.0, 0.0], 2.0, 4.0, 0.0);
        // rear of the agent 10 m ahead of the ego front
        let agent = OrientedBox::new([2.0 + 10.0 + 2.0, 0.0], 2.0, 4.0, 0.0);
        let t = time_to_contact(&ego, [0.0, 0.0], &agent, [-5.0, 0.0], 10.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!(time_to_contact(&ego, [0.0, 0.0], &agent, [-5.0, 0.0], 1.0).is_none());
        assert!(time_to_contact(&ego, [0.0, 0.0], &agent, [5.0, 0.0], 10.0).is_none());
    }

    #[test]
    fn polygon_and_polyline() {
        let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon([1.0, 1.0], &sq, 1e-9));
        assert!(point_in_polygon([2.0, 1.0], &sq, 1e-9));
        assert!(!point_in_polygon([3.0, 1.0], &sq, 1e-9));
        let line = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        let p = project_polyline([12.0, 5.0], &line).unwrap();
        assert!((p.distance - 2.0).abs() < 1e-12 && (p.arc - 15.0).abs() < 1e-12);
        assert_eq!(p.tangent, [0.0, 1.0]);
    }

    #[test]
    fn segment_crossing() {
        assert!(segments_intersect([0.0, 0.0], [2.0, 0.0], [1.0, -1.0], [1.0, 1.0]));
        assert!(!segments_intersect([0.0, 0.0], [0.5, 0.0], [1.0, -1.0], [1.0, 1.0]));
        assert!(segments_intersect([0.0, 0.0], [1.0, 0.0], [1.0, -1.0], [1.0, 1.0]));
    }

    #[test]
    fn angle_wrap() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
