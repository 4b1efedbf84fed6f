//! Planar mid-surface domains and structured quadrilateral meshes.

use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{PlateError, Result};

/// Default tolerance for deciding whether an edge normal is orthogonal to a direction.
pub const TAU_NORMAL: f64 = 1e-8;

/// Continuous piecewise-linear function of one variable given by breakpoints.
/// Constant extrapolation outside the breakpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    points: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn constant(c: f64) -> Self {
        PiecewiseLinear { points: vec![(0.0, c)] }
    }

    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(PlateError::InvalidDomain("piecewise-linear function needs a breakpoint".into()));
        }
        if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(PlateError::InvalidDomain("non-finite breakpoint".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(PlateError::InvalidDomain("repeated breakpoint abscissa".into()));
        }
        Ok(PiecewiseLinear { points })
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.0)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let p = &self.points;
        if t <= p[0].0 {
            return p[0].1;
        }
        if t >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let k = p.partition_point(|q| q.0 <= t);
        let (t0, v0) = p[k - 1];
        let (t1, v1) = p[k];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Slopes of the pieces that intersect `(a, b)`.
    fn slopes_on(&self, a: f64, b: f64) -> Vec<f64> {
        let mut s = vec![];
        if self.points.len() == 1 {
            return vec![0.0];
        }
        if a < self.points[0].0 {
            s.push(0.0);
        }
        for w in self.points.windows(2) {
            if w[1].0 > a && w[0].0 < b {
                s.push((w[1].1 - w[0].1) / (w[1].0 - w[0].0));
            }
        }
        if b > self.points[self.points.len() - 1].0 {
            s.push(0.0);
        }
        s
    }
}

impl Serialize for PiecewiseLinear {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.points.len() == 1 {
            s.serialize_f64(self.points[0].1)
        } else {
            let v: Vec<[f64; 2]> = self.points.iter().map(|&(t, y)| [t, y]).collect();
            v.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for PiecewiseLinear {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Const(f64),
            Points(Vec<[f64; 2]>),
        }
        match Raw::deserialize(d)? {
            Raw::Const(c) => Ok(PiecewiseLinear::constant(c)),
            Raw::Points(p) => PiecewiseLinear::new(p.into_iter().map(|q| (q[0], q[1])).collect())
                .map_err(serde::de::Error::custom),
        }
    }
}

/// The planar set occupied by the plate mid-surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanarDomain {
    /// `{(y1, y2); a < y1 < b, f(y1) < y2 < g(y1)}`.
    RectangleLike { a: f64, b: f64, f: PiecewiseLinear, g: PiecewiseLinear },
    ConvexPolygon { vertices: Vec<[f64; 2]> },
    GeneralPolygon { vertices: Vec<[f64; 2]> },
}

impl PlanarDomain {
    pub fn unit_square() -> Self {
        Self::rectangle(0.0, 1.0, 0.0, 1.0)
    }

    pub fn rectangle(a: f64, b: f64, c: f64, d: f64) -> Self {
        PlanarDomain::RectangleLike {
            a,
            b,
            f: PiecewiseLinear::constant(c),
            g: PiecewiseLinear::constant(d),
        }
    }

    /// Regular polygon with `n` vertices inscribed in a circle, counterclockwise.
    pub fn regular_polygon(n: usize, center: [f64; 2], radius: f64) -> Self {
        let vertices = (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect();
        PlanarDomain::ConvexPolygon { vertices }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlanarDomain::RectangleLike { a, b, f, g } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(PlateError::InvalidDomain(format!("need a < b, got a = {a}, b = {b}")));
                }
                // f - g is piecewise linear, so checking breakpoints and ends suffices.
                let mut ts: Vec<f64> = vec![*a, *b];
                ts.extend(f.breakpoints().chain(g.breakpoints()).filter(|t| t > a && t < b));
                ts.sort_by(f64::total_cmp);
                for t in ts {
                    if f.eval(t) >= g.eval(t) {
                        return Err(PlateError::DegenerateDomain { abscissa: t });
                    }
                }
                Ok(())
            }
            PlanarDomain::ConvexPolygon { vertices } => {
                check_polygon(vertices)?;
                let n = vertices.len();
                for k in 0..n {
                    let c = turn(vertices[k], vertices[(k + 1) % n], vertices[(k + 2) % n]);
                    if c < -1e-12 * polygon_scale(vertices).powi(2) {
                        return Err(PlateError::InvalidDomain(format!(
                            "polygon is not convex at vertex {}",
                            (k + 1) % n
                        )));
                    }
                }
                Ok(())
            }
            PlanarDomain::GeneralPolygon { vertices } => {
                check_polygon(vertices)?;
                let n = vertices.len();
                for i in 0..n {
                    for j in i + 1..n {
                        if j == i + 1 || (i == 0 && j == n - 1) {
                            continue;
                        }
                        if segments_cross(vertices[i], vertices[(i + 1) % n], vertices[j], vertices[(j + 1) % n]) {
                            return Err(PlateError::InvalidDomain(format!(
                                "polygon edges {i} and {j} intersect"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            PlanarDomain::RectangleLike { a, b, f, g } => {
                let nondecreasing = |s: Vec<f64>| s.windows(2).all(|w| w[1] >= w[0] - 1e-14);
                let sf = f.slopes_on(*a, *b);
                let mut sg = g.slopes_on(*a, *b);
                sg.iter_mut().for_each(|s| *s = -*s);
                nondecreasing(sf) && nondecreasing(sg)
            }
            PlanarDomain::ConvexPolygon { .. } => true,
            PlanarDomain::GeneralPolygon { vertices } => {
                let n = vertices.len();
                let scale = polygon_scale(vertices).powi(2);
                (0..n).all(|k| turn(vertices[k], vertices[(k + 1) % n], vertices[(k + 2) % n]) >= -1e-12 * scale)
            }
        }
    }

    pub fn is_rectangle_like(&self) -> bool {
        matches!(self, PlanarDomain::RectangleLike { .. })
    }

    pub fn diameter(&self) -> f64 {
        let pts: Vec<[f64; 2]> = match self {
            PlanarDomain::RectangleLike { a, b, f, g } => {
                let mut ts = vec![*a, *b];
                ts.extend(f.breakpoints().chain(g.breakpoints()).filter(|t| t > a && t < b));
                ts.iter().flat_map(|&t| [[t, f.eval(t)], [t, g.eval(t)]]).collect()
            }
            PlanarDomain::ConvexPolygon { vertices } | PlanarDomain::GeneralPolygon { vertices } => vertices.clone(),
        };
        let mut d: f64 = 0.0;
        for p in &pts {
            for q in &pts {
                d = d.max(dist(*p, *q));
            }
        }
        d
    }
}

fn turn(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn polygon_scale(v: &[[f64; 2]]) -> f64 {
    v.iter().map(|p| p[0].abs().max(p[1].abs())).fold(1e-300, f64::max)
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    0.5 * (0..n)
        .map(|k| {
            let (p, q) = (v[k], v[(k + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}

fn check_polygon(v: &[[f64; 2]]) -> Result<()> {
    if v.len() < 3 {
        return Err(PlateError::InvalidDomain("polygon needs at least 3 vertices".into()));
    }
    if v.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(PlateError::InvalidDomain("non-finite polygon vertex".into()));
    }
    let area = signed_area(v);
    let scale = polygon_scale(v).powi(2);
    if area.abs() <= 1e-12 * scale {
        return Err(PlateError::InvalidDomain("polygon vertices are collinear".into()));
    }
    if area < 0.0 {
        return Err(PlateError::InvalidDomain("polygon vertices must be counterclockwise".into()));
    }
    Ok(())
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = turn(q1, q2, p1);
    let d2 = turn(q1, q2, p2);
    let d3 = turn(p1, p2, q1);
    let d4 = turn(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Boundary tags. Graph tags only occur on rectangle-like domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    GammaF,
    GammaG,
    Lateral,
}

/// Side of the parameter square an edge comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

/// Names a set of boundary edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSelector {
    GammaF,
    GammaG,
    Lateral,
    Bottom,
    Right,
    Top,
    Left,
    All,
}

impl EdgeSelector {
    pub fn name(self) -> &'static str {
        match self {
            EdgeSelector::GammaF => "gamma_f",
            EdgeSelector::GammaG => "gamma_g",
            EdgeSelector::Lateral => "lateral",
            EdgeSelector::Bottom => "bottom",
            EdgeSelector::Right => "right",
            EdgeSelector::Top => "top",
            EdgeSelector::Left => "left",
            EdgeSelector::All => "all",
        }
    }

    fn matches(self, e: &BoundaryEdge) -> bool {
        match self {
            EdgeSelector::GammaF => e.tag == BoundaryTag::GammaF,
            EdgeSelector::GammaG => e.tag == BoundaryTag::GammaG,
            EdgeSelector::Lateral => e.tag == BoundaryTag::Lateral,
            EdgeSelector::Bottom => e.side == Side::Bottom,
            EdgeSelector::Right => e.side == Side::Right,
            EdgeSelector::Top => e.side == Side::Top,
            EdgeSelector::Left => e.side == Side::Left,
            EdgeSelector::All => true,
        }
    }
}

/// A boundary edge, oriented so the domain lies on its left.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub element: usize,
    pub tag: BoundaryTag,
    pub side: Side,
    pub normal: [f64; 2],
    pub length: f64,
}

impl BoundaryEdge {
    pub fn tangent(&self) -> [f64; 2] {
        [-self.normal[1], self.normal[0]]
    }
}

/// Structured `n1 x n2` quadrilateral mesh. Node `(i, j)` has index `j (n1 + 1) + i`,
/// element `(i, j)` has index `j n1 + i`.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 4]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub n1: usize,
    pub n2: usize,
    pub h: f64,
    pub convex: bool,
    pub rectangle_like: bool,
    pub diameter: f64,
    on_boundary: Vec<bool>,
}

impl Mesh {
    pub fn build(domain: &PlanarDomain, n1: usize, n2: usize) -> Result<Self> {
        if n1 < 2 || n2 < 2 {
            return Err(PlateError::InvalidMesh(format!("need n1, n2 >= 2, got {n1} x {n2}")));
        }
        domain.validate()?;
        let mut nodes = Vec::with_capacity((n1 + 1) * (n2 + 1));
        match domain {
            PlanarDomain::RectangleLike { a, b, f, g } => {
                for j in 0..=n2 {
                    for i in 0..=n1 {
                        let x = a + (b - a) * (i as f64 / n1 as f64);
                        let (lo, hi) = (f.eval(x), g.eval(x));
                        nodes.push([x, lo + (j as f64 / n2 as f64) * (hi - lo)]);
                    }
                }
            }
            PlanarDomain::ConvexPolygon { vertices } | PlanarDomain::GeneralPolygon { vertices } => {
                let path = Perimeter::new(vertices);
                let c = path.corners();
                let p = path.total;
                let bottom = |s: f64| path.at(c[0] + s * (c[1] - c[0]));
                let right = |t: f64| path.at(c[1] + t * (c[2] - c[1]));
                let top = |s: f64| path.at(c[3] + s * (c[2] - c[3]));
                let left = |t: f64| path.at(p + t * (c[3] - p));
                let c00 = bottom(0.0);
                let c10 = bottom(1.0);
                let c11 = top(1.0);
                let c01 = top(0.0);
                for j in 0..=n2 {
                    let t = j as f64 / n2 as f64;
                    for i in 0..=n1 {
                        let s = i as f64 / n1 as f64;
                        let (b, tp, l, r) = (bottom(s), top(s), left(t), right(t));
                        let mut x = [0.0; 2];
                        for k in 0..2 {
                            x[k] = (1.0 - t) * b[k] + t * tp[k] + (1.0 - s) * l[k] + s * r[k]
                                - ((1.0 - s) * (1.0 - t) * c00[k]
                                    + s * (1.0 - t) * c10[k]
                                    + s * t * c11[k]
                                    + (1.0 - s) * t * c01[k]);
                        }
                        nodes.push(x);
                    }
                }
            }
        }
        let node = |i: usize, j: usize| j * (n1 + 1) + i;
        let mut elements = Vec::with_capacity(n1 * n2);
        for j in 0..n2 {
            for i in 0..n1 {
                elements.push([node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]);
            }
        }
        let mut h: f64 = 0.0;
        for (e, el) in elements.iter().enumerate() {
            let x: Vec<[f64; 2]> = el.iter().map(|&k| nodes[k]).collect();
            let scale = dist(x[0], x[2]).max(dist(x[1], x[3])).powi(2);
            // Straight angles are allowed: a triangle has to put one corner of the
            // parameter square on a side.
            for a in 0..4 {
                if turn(x[(a + 3) % 4], x[a], x[(a + 1) % 4]) < -1e-12 * scale || signed_area(&x) <= 0.0 {
                    return Err(PlateError::InvalidMesh(format!(
                        "element {e} is inverted or degenerate at local corner {a}"
                    )));
                }
            }
            h = h.max(dist(x[0], x[2])).max(dist(x[1], x[3]));
        }

        let graphs = domain.is_rectangle_like();
        let mut boundary_edges = Vec::with_capacity(2 * (n1 + n2));
        let mut push = |a: usize, b: usize, element: usize, side: Side| {
            let tag = match (graphs, side) {
                (true, Side::Bottom) => BoundaryTag::GammaF,
                (true, Side::Top) => BoundaryTag::GammaG,
                _ => BoundaryTag::Lateral,
            };
            let (p, q) = (nodes[a], nodes[b]);
            let length = dist(p, q);
            let normal = [(q[1] - p[1]) / length, -(q[0] - p[0]) / length];
            boundary_edges.push(BoundaryEdge { nodes: [a, b], element, tag, side, normal, length });
        };
        for i in 0..n1 {
            push(node(i, 0), node(i + 1, 0), i, Side::Bottom);
        }
        for j in 0..n2 {
            push(node(n1, j), node(n1, j + 1), j * n1 + n1 - 1, Side::Right);
        }
        for i in (0..n1).rev() {
            push(node(i + 1, n2), node(i, n2), (n2 - 1) * n1 + i, Side::Top);
        }
        for j in (0..n2).rev() {
            push(node(0, j + 1), node(0, j), j * n1, Side::Left);
        }
        let mut on_boundary = vec![false; nodes.len()];
        for e in &boundary_edges {
            on_boundary[e.nodes[0]] = true;
            on_boundary[e.nodes[1]] = true;
        }
        Ok(Mesh {
            nodes,
            elements,
            boundary_edges,
            n1,
            n2,
            h,
            convex: domain.is_convex(),
            rectangle_like: graphs,
            diameter: domain.diameter(),
            on_boundary,
        })
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n1 + 1) + i
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_boundary_node(&self, k: usize) -> bool {
        self.on_boundary[k]
    }

    /// Indices of boundary edges matched by `sel`; errors if the mesh has none.
    pub fn select(&self, sel: EdgeSelector) -> Result<Vec<usize>> {
        let v: Vec<usize> = (0..self.boundary_edges.len())
            .filter(|&k| sel.matches(&self.boundary_edges[k]))
            .collect();
        if v.is_empty() {
            return Err(PlateError::UnknownTag(sel.name().into()));
        }
        Ok(v)
    }

    /// Total area by the shoelace formula over the boundary polyline.
    pub fn area(&self) -> f64 {
        0.5 * self
            .boundary_edges
            .iter()
            .map(|e| {
                let (p, q) = (self.nodes[e.nodes[0]], self.nodes[e.nodes[1]]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
    }

    /// Writes `id,y1,y2` rows.
    pub fn write_nodes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "y1", "y2"])?;
        for (k, p) in self.nodes.iter().enumerate() {
            wr.write_record([k.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `id,n0,n1,n2,n3` rows.
    pub fn write_elements_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "n0", "n1", "n2", "n3"])?;
        for (k, e) in self.elements.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(e.iter().map(|n| n.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Boundary edges whose normal is not orthogonal to a direction `e`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalTag {
    pub e: [f64; 2],
    pub tau: f64,
    pub gamma0: Vec<usize>,
}

impl DirectionalTag {
    pub fn complement(&self, mesh: &Mesh) -> Vec<usize> {
        (0..mesh.boundary_edges.len()).filter(|k| !self.gamma0.contains(k)).collect()
    }
}

/// Edges with `|nu . e| > tau |e|`.
pub fn tag_directional(mesh: &Mesh, e: [f64; 2], tau: f64) -> Result<DirectionalTag> {
    let norm = e[0].hypot(e[1]);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(PlateError::InvalidArgument("direction e must be nonzero".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PlateError::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let gamma0 = mesh
        .boundary_edges
        .iter()
        .enumerate()
        .filter(|(_, b)| (b.normal[0] * e[0] + b.normal[1] * e[1]).abs() > tau * norm)
        .map(|(k, _)| k)
        .collect();
    Ok(DirectionalTag { e, tau, gamma0 })
}

/// Arclength parametrization of a closed polygon starting at vertex 0.
struct Perimeter {
    vertices: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    total: f64,
}

impl Perimeter {
    fn new(v: &[[f64; 2]]) -> Self {
        let n = v.len();
        let mut cumulative = vec![0.0];
        for k in 0..n {
            let last = cumulative[k];
            cumulative.push(last + dist(v[k], v[(k + 1) % n]));
        }
        let total = cumulative[n];
        Perimeter { vertices: v.to_vec(), cumulative, total }
    }

    /// Arclength positions of the four parameter-square corners. Corners snap to
    /// vertices near the quarter points; a triangle gets its fourth corner at the
    /// midpoint of its longest side.
    fn corners(&self) -> [f64; 4] {
        let n = self.vertices.len();
        let c = &self.cumulative;
        if n == 3 {
            let m = (0..3).max_by(|&a, &b| (c[a + 1] - c[a]).total_cmp(&(c[b + 1] - c[b]))).unwrap();
            let mut v = vec![0.0, c[1], c[2], 0.5 * (c[m] + c[m + 1])];
            v.sort_by(f64::total_cmp);
            return [v[0], v[1], v[2], v[3]];
        }
        let mut out = [0.0; 4];
        let mut prev = 0;
        for k in 1..4 {
            let target = k as f64 * self.total / 4.0;
            let idx = (prev + 1..=n - (4 - k))
                .min_by(|&a, &b| (c[a] - target).abs().total_cmp(&(c[b] - target).abs()))
                .unwrap();
            out[k] = c[idx];
            prev = idx;
        }
        out
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let n = self.vertices.len();
        let s = s.rem_euclid(self.total);
        let k = (self.cumulative.partition_point(|&c| c <= s) - 1).min(n - 1);
        let len = self.cumulative[k + 1] - self.cumulative[k];
        let t = if len > 0.0 { (s - self.cumulative[k]) / len } else { 0.0 };
        let (p, q) = (self.vertices[k], self.vertices[(k + 1) % n]);
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_two_by_two() {
        let m = Mesh::build(&PlanarDomain::unit_square(), 2, 2).unwrap();
        assert_eq!(m.nodes.len(), 9);
        assert_eq!(m.elements.len(), 4);
        assert_eq!(m.boundary_edges.len(), 8);
        for e in &m.boundary_edges {
            assert!(e.normal[0] == 0.0 || e.normal[1] == 0.0);
            assert!((e.normal[0].hypot(e.normal[1]) - 1.0).abs() < 1e-12);
        }
        assert!((m.area() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn graphs_tag_bottom_and_top() {
        let m = Mesh::build(&PlanarDomain::unit_square(), 2, 2).unwrap();
        let f = m.select(EdgeSelector::GammaF).unwrap();
        let g = m.select(EdgeSelector::GammaG).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(g.len(), 2);
        for k in f {
            assert_eq!(m.boundary_edges[k].normal, [0.0, -1.0]);
        }
        for k in g {
            assert_eq!(m.boundary_edges[k].normal, [0.0, 1.0]);
        }
        assert_eq!(m.select(EdgeSelector::Lateral).unwrap().len(), 4);
    }

    #[test]
    fn degenerate_graphs_report_abscissa() {
        let f = PiecewiseLinear::new(vec![(0.0, 0.0), (0.5, 1.5), (1.0, 0.0)]).unwrap();
        let d = PlanarDomain::RectangleLike { a: 0.0, b: 1.0, f, g: PiecewiseLinear::constant(1.0) };
        match Mesh::build(&d, 4, 4) {
            Err(PlateError::DegenerateDomain { abscissa }) => assert_eq!(abscissa, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn triangle_normals_are_unit() {
        let d = PlanarDomain::ConvexPolygon { vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] };
        let m = Mesh::build(&d, 4, 4).unwrap();
        for e in &m.boundary_edges {
            assert!((e.normal[0].hypot(e.normal[1]) - 1.0).abs() < 1e-12);
        }
        assert!((m.area() - 0.5).abs() < 1e-12);
        assert!(m.select(EdgeSelector::GammaF).is_err());
    }

    #[test]
    fn boundary_closes() {
        for d in [
            PlanarDomain::unit_square(),
            PlanarDomain::regular_polygon(12, [0.0, 0.0], 1.0),
            PlanarDomain::RectangleLike {
                a: -1.0,
                b: 2.0,
                f: PiecewiseLinear::new(vec![(0.0, 0.0), (1.0, -0.5)]).unwrap(),
                g: PiecewiseLinear::new(vec![(-1.0, 1.0), (2.0, 2.0)]).unwrap(),
            },
        ] {
            let m = Mesh::build(&d, 6, 5).unwrap();
            let mut s = [0.0; 2];
            for e in &m.boundary_edges {
                s[0] += e.length * e.normal[0];
                s[1] += e.length * e.normal[1];
            }
            assert!(s[0].abs() < 1e-10 && s[1].abs() < 1e-10);
        }
    }

    #[test]
    fn refinement_nests() {
        for d in [PlanarDomain::unit_square(), PlanarDomain::regular_polygon(7, [0.3, 0.1], 2.0)] {
            let c = Mesh::build(&d, 3, 4).unwrap();
            let f = Mesh::build(&d, 6, 8).unwrap();
            for j in 0..=4 {
                for i in 0..=3 {
                    let p = c.nodes[c.node_index(i, j)];
                    let q = f.nodes[f.node_index(2 * i, 2 * j)];
                    assert!(dist(p, q) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn directional_tags() {
        let m = Mesh::build(&PlanarDomain::unit_square(), 4, 4).unwrap();
        let lr: Vec<usize> = m
            .select(EdgeSelector::Left)
            .unwrap()
            .into_iter()
            .chain(m.select(EdgeSelector::Right).unwrap())
            .collect();
        let mut g = tag_directional(&m, [1.0, 0.0], 1e-8).unwrap().gamma0;
        g.sort();
        let mut lr = lr;
        lr.sort();
        assert_eq!(g, lr);
        let t = tag_directional(&m, [0.0, 1.0], 1e-8).unwrap();
        assert!(t.gamma0.iter().all(|&k| matches!(m.boundary_edges[k].side, Side::Top | Side::Bottom)));
        assert_eq!(t.gamma0.len(), 8);
        let s = 0.5f64.sqrt();
        assert_eq!(tag_directional(&m, [s, s], 1e-8).unwrap().gamma0.len(), 16);
        assert!(tag_directional(&m, [0.0, 0.0], 1e-8).is_err());
    }

    #[test]
    fn convexity_and_validation() {
        assert!(PlanarDomain::unit_square().is_convex());
        let bump = PlanarDomain::RectangleLike {
            a: 0.0,
            b: 1.0,
            f: PiecewiseLinear::new(vec![(0.0, 0.0), (0.5, 0.3), (1.0, 0.0)]).unwrap(),
            g: PiecewiseLinear::constant(1.0),
        };
        assert!(!bump.is_convex());
        let cw = PlanarDomain::ConvexPolygon { vertices: vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]] };
        assert!(cw.validate().is_err());
        let l_shape = PlanarDomain::GeneralPolygon {
            vertices: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]],
        };
        assert!(l_shape.validate().is_ok());
        assert!(!l_shape.is_convex());
        let not_convex = PlanarDomain::ConvexPolygon {
            vertices: vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]],
        };
        assert!(not_convex.validate().is_err());
        assert!(Mesh::build(&PlanarDomain::unit_square(), 1, 3).is_err());
    }

    #[test]
    fn csv_export() {
        let m = Mesh::build(&PlanarDomain::unit_square(), 2, 2).unwrap();
        let mut buf = Vec::new();
        m.write_nodes_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 10);
        assert!(s.starts_with("id,y1,y2\n0,0,0\n"));
        let mut buf = Vec::new();
        m.write_elements_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\n0,0,1,4,3\n"));
    }

    #[test]
    fn domain_serde() {
        let d: PlanarDomain = serde_json::from_str(
            r#"{"kind":"rectangle_like","a":0,"b":1,"f":0,"g":[[0,1],[1,2]]}"#,
        )
        .unwrap();
        assert!(d.validate().is_ok());
        let back = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<PlanarDomain>(&back).unwrap(), d);
    }
}
