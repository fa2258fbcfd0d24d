use super::Real;

/// Convex polygon with counter-clockwise vertices. Empty means no area.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn from_vertices(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }
}

/// Intersection of two convex polygons (Sutherland–Hodgman).
pub fn clip_polygons(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    let out = clip_generic(&subject.vertices, &clip.vertices);
    if out.len() < 3 || shoelace(&out) <= 0.0 {
        return ConvexPolygon::empty();
    }
    ConvexPolygon::from_vertices(out)
}

/// Signed area, positive for counter-clockwise order.
pub(crate) fn shoelace<T: Real>(pts: &[[T; 2]]) -> T {
    let n = pts.len();
    if n < 3 {
        return T::cst(0.0);
    }
    let mut acc = T::cst(0.0);
    for i in 0..n {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % n];
        acc = acc + (x0 * y1 - x1 * y0);
    }
    acc * T::cst(0.5)
}

/// Clips `subject` against each edge of the counter-clockwise `clip`,
/// keeping the half-plane to the left of the edge. Points on an edge count
/// as inside; a polygon that only touches collapses to zero area.
pub(crate) fn clip_generic<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut poly: Vec<[T; 2]> = subject.to_vec();
    let n = clip.len();
    for e in 0..n {
        if poly.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % n];
        let side = |p: [T; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut poly);
        let m = input.len();
        for i in 0..m {
            let cur = input[i];
            let prev = input[(i + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            let (cin, pin) = (sc.re() >= 0.0, sp.re() >= 0.0);
            if cin != pin {
                let t = sp / (sp - sc);
                poly.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if cin {
                poly.push(cur);
            }
        }
    }
    poly
}
