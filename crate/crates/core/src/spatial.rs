//! Exact spatial queries: a kd-tree for nearest neighbours and a BVH for
//! normal-ray counterparts. Both are checked against brute force; ties
//! always resolve to the lowest primitive index.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{dist2, Vec3};

pub const DEFAULT_LEAF_SIZE: usize = 16;
/// Default half-angle of the cone searched around a normal ray (15 degrees).
pub const DEFAULT_CONE_HALF_ANGLE: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Default bound on the ray parameter, in unit-sphere units.
pub const DEFAULT_MAX_T: f64 = 0.1;

const UNIT_DIRECTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Balanced 3D kd-tree over an immutable point array.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

/// Lexicographic (distance, index) ordering implements the tie rule.
#[inline]
fn better(d: f64, i: usize, best_d: f64, best_i: usize) -> bool {
    d < best_d || (d == best_d && i < best_i)
}

impl KdIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Vec3], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("kd-tree needs at least one point"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("kd-tree input"));
        }
        let mut index = KdIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        let mut order = std::mem::take(&mut index.order);
        index.build_node(&mut order, 0, leaf_size.max(1));
        index.order = order;
        Ok(index)
    }

    fn build_node(&mut self, order: &mut [usize], offset: usize, leaf_size: usize) -> usize {
        let id = self.nodes.len();
        if order.len() <= leaf_size {
            self.nodes.push(KdNode::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        // split on the axis of largest extent
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        let mid = order.len() / 2;
        let pts = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let value = self.points[order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let (left_part, right_part) = order.split_at_mut(mid);
        let left = self.build_node(left_part, offset, leaf_size);
        let right = self.build_node(right_part, offset + mid, leaf_size);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Exact nearest point: `(index, squared distance)`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if better(d, i, best.1, best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                // points on the far side are at least |diff| away along `axis`;
                // equality still has to be visited for the index tie rule
                if diff * diff <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by (distance, index).
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        let mut found: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(0, q, k, &mut found);
        }
        found
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, found: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if found.len() == k {
                        let (wi, wd) = found[k - 1];
                        if !better(d, i, wd, wi) {
                            continue;
                        }
                        found.pop();
                    }
                    let pos = found.partition_point(|&(j, dj)| better(dj, j, d, i));
                    found.insert(pos, (i, d));
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].1 {
                    self.knn_rec(far, q, k, found);
                }
            }
        }
    }
}

/// Linear scan with the same distance kernel and tie rule as [`KdIndex`].
pub fn brute_nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(q, p);
        if better(d, i, best.1, best.0) {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&o.lo),
            hi: self.hi.sup(&o.hi),
        }
    }

    fn centroid(&self) -> Vec3 {
        (self.lo + self.hi) * 0.5
    }

    /// Squared distance from `p` to the box, shrunk slightly so pruning
    /// stays conservative under rounding.
    fn dist2_to(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d * (1.0 - 1e-12)
    }

    /// Parameter interval of the line `o + t d` inside the box (slab test),
    /// widened by a small margin.
    fn line_interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let pad = 1e-9 * (1.0 + (self.hi - self.lo).amax());
        for a in 0..3 {
            let lo = self.lo[a] - pad;
            let hi = self.hi[a] + pad;
            if d[a] == 0.0 {
                if o[a] < lo || o[a] > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((lo - o[a]) * inv, (hi - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const BVH_LEAF: usize = 4;

impl Bvh {
    fn build(boxes: &[Aabb]) -> Self {
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..boxes.len()).collect(),
        };
        let mut order = std::mem::take(&mut bvh.order);
        bvh.build_node(boxes, &mut order, 0);
        bvh.order = order;
        bvh
    }

    fn build_node(&mut self, boxes: &[Aabb], order: &mut [usize], offset: usize) -> usize {
        let bounds = order.iter().fold(Aabb::empty(), |acc, &i| acc.union(&boxes[i]));
        let id = self.nodes.len();
        if order.len() <= BVH_LEAF {
            self.nodes.push(BvhNode::Leaf {
                bounds,
                start: offset,
                end: offset + order.len(),
            });
            return id;
        }
        let mut cb = Aabb::empty();
        for &i in order.iter() {
            cb.grow(&boxes[i].centroid());
        }
        let axis = (cb.hi - cb.lo).imax();
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            boxes[a].centroid()[axis]
                .partial_cmp(&boxes[b].centroid()[axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.nodes.push(BvhNode::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let (l, r) = order.split_at_mut(mid);
        let left = self.build_node(boxes, l, offset);
        let right = self.build_node(boxes, r, offset + mid);
        self.nodes[id] = BvhNode::Inner {
            bounds,
            left,
            right,
        };
        id
    }
}

/// Result of a normal-ray counterpart query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Target point on the scan.
    pub point: Vec3,
    /// Euclidean distance from the ray origin.
    pub distance: f64,
    /// Triangle index (mesh mode) or point index (cloud mode).
    pub primitive: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RayQuery {
    pub cone_half_angle: f64,
    pub max_t: f64,
}

impl Default for RayQuery {
    fn default() -> Self {
        Self {
            cone_half_angle: DEFAULT_CONE_HALF_ANGLE,
            max_t: DEFAULT_MAX_T,
        }
    }
}

#[derive(Debug, Clone)]
enum RayTarget {
    Mesh {
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
    },
    Cloud {
        points: Vec<Vec3>,
    },
}

/// BVH over the raw scan: triangles when the scan kept its faces, bare points
/// otherwise.
#[derive(Debug, Clone)]
pub struct RayIndex {
    target: RayTarget,
    bvh: Bvh,
}

/// Intersection parameter of the line `o + t d` with a triangle
/// (Moller-Trumbore, two-sided). Returns `None` when parallel or outside.
pub fn line_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det == 0.0 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Cone acceptance test for a point relative to the line `o + t d`.
/// Returns `(perpendicular distance squared, |t|)` for accepted points.
#[inline]
fn cone_candidate(o: &Vec3, d: &Vec3, p: &Vec3, tan_half: f64, max_t: f64) -> Option<(f64, f64)> {
    let rel = p - o;
    let t = rel.dot(d);
    let at = t.abs();
    if at > max_t {
        return None;
    }
    let perp2 = (dist2(p, o) - t * t).max(0.0);
    // angular offset from +d or -d within the half angle; the origin itself
    // is accepted with zero offset
    let lim = at * tan_half;
    if perp2 > lim * lim && perp2 > 0.0 {
        return None;
    }
    Some((perp2, at))
}

#[inline]
fn better_cone(c: (f64, f64), i: usize, best: &Option<((f64, f64), usize)>) -> bool {
    match best {
        None => true,
        Some((b, bi)) => {
            c.0 < b.0 || (c.0 == b.0 && (c.1 < b.1 || (c.1 == b.1 && i < *bi)))
        }
    }
}

fn check_direction(direction: &Vec3) -> Result<()> {
    let norm = direction.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_DIRECTION_TOL {
        return Err(Error::NonUnitDirection(norm));
    }
    Ok(())
}

impl RayIndex {
    pub fn from_mesh(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Empty("ray index needs at least one triangle"));
        }
        let boxes: Vec<Aabb> = faces
            .iter()
            .map(|f| {
                let mut b = Aabb::empty();
                for &v in f {
                    b.grow(&vertices[v]);
                }
                b
            })
            .collect();
        Ok(RayIndex {
            bvh: Bvh::build(&boxes),
            target: RayTarget::Mesh {
                vertices: vertices.to_vec(),
                faces: faces.to_vec(),
            },
        })
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("ray index needs at least one point"));
        }
        let boxes: Vec<Aabb> = points.iter().map(|p| Aabb { lo: *p, hi: *p }).collect();
        Ok(RayIndex {
            bvh: Bvh::build(&boxes),
            target: RayTarget::Cloud {
                points: points.to_vec(),
            },
        })
    }

    /// Counterpart of `origin` along `±direction`.
    ///
    /// Mesh mode returns the intersection with smallest `|t| <= max_t`. Cloud
    /// mode returns the point inside the double cone of half angle
    /// `cone_half_angle` around the line with the smallest perpendicular
    /// distance to it (ties by `|t|`, then index).
    pub fn ray_counterpart(&self, origin: &Vec3, direction: &Vec3, query: &RayQuery) -> Result<Option<RayHit>> {
        check_direction(direction)?;
        Ok(match &self.target {
            RayTarget::Mesh { vertices, faces } => self.mesh_query(vertices, faces, origin, direction, query.max_t),
            RayTarget::Cloud { points } => self.cloud_query(points, origin, direction, query),
        })
    }

    fn mesh_query(
        &self,
        vertices: &[Vec3],
        faces: &[[usize; 3]],
        o: &Vec3,
        d: &Vec3,
        max_t: f64,
    ) -> Option<RayHit> {
        let mut best: Option<(f64, usize, f64)> = None; // (|t|, face, t)
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.bvh.nodes[n];
            let Some((t0, t1)) = node.bounds().line_interval(o, d) else {
                continue;
            };
            let lo = t0.max(-max_t);
            let hi = t1.min(max_t);
            if lo > hi {
                continue;
            }
            let min_abs = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
            if let Some((bt, _, _)) = best {
                if min_abs > bt {
                    continue;
                }
            }
            match *node {
                BvhNode::Leaf { start, end, .. } => {
                    for &fi in &self.bvh.order[start..end] {
                        let f = faces[fi];
                        if let Some(t) = line_triangle(o, d, &vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) {
                            let at = t.abs();
                            if at > max_t {
                                continue;
                            }
                            let replace = match best {
                                None => true,
                                Some((bt, bf, _)) => at < bt || (at == bt && fi < bf),
                            };
                            if replace {
                                best = Some((at, fi, t));
                            }
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best.map(|(at, fi, t)| RayHit {
            point: o + d * t,
            distance: at,
            primitive: fi,
        })
    }

    fn cloud_query(&self, points: &[Vec3], o: &Vec3, d: &Vec3, query: &RayQuery) -> Option<RayHit> {
        let tan_half = query.cone_half_angle.tan();
        // every candidate satisfies |p - o|^2 = t^2 + perp^2 <= max_t^2 (1 + tan^2)
        let reach = query.max_t * query.max_t * (1.0 + tan_half * tan_half);
        let mut best: Option<((f64, f64), usize)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.bvh.nodes[n];
            if node.bounds().dist2_to(o) > reach {
                continue;
            }
            match *node {
                BvhNode::Leaf { start, end, .. } => {
                    for &pi in &self.bvh.order[start..end] {
                        if let Some(c) = cone_candidate(o, d, &points[pi], tan_half, query.max_t) {
                            if better_cone(c, pi, &best) {
                                best = Some((c, pi));
                            }
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best.map(|(_, pi)| RayHit {
            point: points[pi],
            distance: dist2(&points[pi], o).sqrt(),
            primitive: pi,
        })
    }
}

/// Brute-force cloud-mode counterpart, the oracle for [`RayIndex`].
pub fn brute_ray_cloud(points: &[Vec3], origin: &Vec3, direction: &Vec3, query: &RayQuery) -> Result<Option<RayHit>> {
    check_direction(direction)?;
    let tan_half = query.cone_half_angle.tan();
    let mut best: Option<((f64, f64), usize)> = None;
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = cone_candidate(origin, direction, p, tan_half, query.max_t) {
            if better_cone(c, i, &best) {
                best = Some((c, i));
            }
        }
    }
    Ok(best.map(|(_, pi)| RayHit {
        point: points[pi],
        distance: dist2(&points[pi], origin).sqrt(),
        primitive: pi,
    }))
}

/// Brute-force mesh-mode counterpart over every triangle.
pub fn brute_ray_mesh(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    origin: &Vec3,
    direction: &Vec3,
    query: &RayQuery,
) -> Result<Option<RayHit>> {
    check_direction(direction)?;
    let mut best: Option<(f64, usize, f64)> = None;
    for (fi, f) in faces.iter().enumerate() {
        if let Some(t) = line_triangle(origin, direction, &vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) {
            let at = t.abs();
            if at <= query.max_t && best.is_none_or(|(bt, _, _)| at < bt) {
                best = Some((at, fi, t));
            }
        }
    }
    Ok(best.map(|(at, fi, t)| RayHit {
        point: origin + direction * t,
        distance: at,
        primitive: fi,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn single_point() {
        let kd = KdIndex::build(&[Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(kd.nearest(&Vec3::new(-5.0, 0.0, 9.0)).0, 0);
        assert_eq!(kd.nearest(&Vec3::new(1.0, 2.0, 3.0)), (0, 0.0));
    }

    #[test]
    fn empty_build_errors() {
        assert!(KdIndex::build(&[]).is_err());
    }

    #[test]
    fn hand_case_and_ties() {
        let kd = KdIndex::build(&[Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)]).unwrap();
        let (i, d) = kd.nearest(&Vec3::new(0.9, 0.0, 0.0));
        assert_eq!(i, 0);
        assert!((d - 0.81).abs() < 1e-15);
        assert_eq!(kd.nearest(&Vec3::new(1.0, 0.0, 0.0)), (0, 1.0));

        let dup = vec![Vec3::new(0.5, 0.5, 0.5); 40];
        let kd = KdIndex::with_leaf_size(&dup, 2).unwrap();
        assert_eq!(kd.nearest(&Vec3::zeros()).0, 0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 512);
        let kd = KdIndex::build(&pts).unwrap();
        for _ in 0..100 {
            let q = random_points(&mut rng, 1)[0] * 1.3;
            assert_eq!(kd.nearest(&q), brute_nearest(&pts, &q));
        }
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 300);
        let kd = KdIndex::with_leaf_size(&pts, 5).unwrap();
        for _ in 0..30 {
            let q = random_points(&mut rng, 1)[0];
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(&q, p))).collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(16);
            assert_eq!(kd.knn(&q, 16), all);
        }
    }

    #[test]
    fn ray_hits_triangle_both_directions() {
        let v = vec![Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let idx = RayIndex::from_mesh(&v, &[[0, 1, 2]]).unwrap();
        let q = RayQuery { max_t: 2.0, ..Default::default() };
        let hit = idx.ray_counterpart(&Vec3::new(0.0, 0.0, 1.0), &-Vec3::z(), &q).unwrap().unwrap();
        assert!((hit.point - Vec3::zeros()).norm() < 1e-15);
        assert!((hit.distance - 1.0).abs() < 1e-15);
        // pointing away still finds it through the negative direction
        let hit = idx.ray_counterpart(&Vec3::new(0.0, 0.0, 1.0), &Vec3::z(), &q).unwrap().unwrap();
        assert!((hit.distance - 1.0).abs() < 1e-15);
        // origin on the surface
        let hit = idx.ray_counterpart(&Vec3::new(0.0, 0.0, 0.0), &Vec3::z(), &q).unwrap().unwrap();
        assert_eq!(hit.distance, 0.0);
        // out of reach
        let short = RayQuery { max_t: 0.5, ..Default::default() };
        assert!(idx.ray_counterpart(&Vec3::new(0.0, 0.0, 1.0), &-Vec3::z(), &short).unwrap().is_none());
    }

    #[test]
    fn non_unit_direction_rejected() {
        let idx = RayIndex::from_points(&[Vec3::zeros()]).unwrap();
        assert!(matches!(
            idx.ray_counterpart(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 2.0), &RayQuery::default()),
            Err(Error::NonUnitDirection(_))
        ));
    }

    #[test]
    fn cloud_rays_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = random_points(&mut rng, 256).into_iter().map(|p| p * 0.2).collect();
        let idx = RayIndex::from_points(&pts).unwrap();
        let q = RayQuery::default();
        let mut hits = 0;
        for _ in 0..50 {
            let o = random_points(&mut rng, 1)[0] * 0.2;
            let d = random_points(&mut rng, 1)[0].normalize();
            let a = idx.ray_counterpart(&o, &d, &q).unwrap();
            let b = brute_ray_cloud(&pts, &o, &d, &q).unwrap();
            assert_eq!(a, b);
            hits += a.is_some() as usize;
        }
        assert!(hits > 10, "query set too sparse to be meaningful ({hits} hits)");
    }

    #[test]
    fn mesh_rays_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let verts = random_points(&mut rng, 90);
        let faces: Vec<[usize; 3]> = (0..30).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        let idx = RayIndex::from_mesh(&verts, &faces).unwrap();
        let q = RayQuery { max_t: 1.0, ..Default::default() };
        for _ in 0..100 {
            let o = random_points(&mut rng, 1)[0];
            let d = random_points(&mut rng, 1)[0].normalize();
            assert_eq!(
                idx.ray_counterpart(&o, &d, &q).unwrap(),
                brute_ray_mesh(&verts, &faces, &o, &d, &q).unwrap()
            );
        }
    }
}
