//! Mesh and point-cloud types plus the differential-geometry kernels the
//! losses are built on: area-weighted vertex normals (with their adjoint),
//! the template edge graph, the umbrella Laplacian and midpoint subdivision.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance on the norm of stored unit normals.
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// Squared Euclidean distance with a fixed summation order.
///
/// Every nearest-neighbour path (accelerated and brute force) goes through
/// this function so that their answers compare bit-for-bit.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// An unorganized point set, optionally carrying one unit normal per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        if let Some(normals) = &normals {
            if normals.len() != points.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} normals for {} points",
                    normals.len(),
                    points.len()
                )));
            }
            for (i, n) in normals.iter().enumerate() {
                let norm = n.norm();
                if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORMAL_TOL {
                    return Err(Error::InvalidCloud(format!(
                        "normal {i} has norm {norm}, expected unit length"
                    )));
                }
            }
        }
        Ok(Self { points, normals })
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Option<Vec<Vec3>>) {
        (self.points, self.normals)
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        PointCloud { points, normals }
    }
}

/// A fixed-topology triangle mesh. The undirected edge list is derived on
/// construction and kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(i) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex out of range ({:?}, {n} vertices)",
                    f
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate ({:?})", f)));
            }
        }
        let edges = edge_graph(&faces);
        Ok(Self {
            vertices,
            faces,
            edges,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(self.vertices.len(), vertices.len()));
        }
        if let Some(i) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
        })
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Sorted neighbour lists derived from the edge graph.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// True when every vertex is reachable from vertex 0 through edges.
    pub fn is_connected(&self) -> bool {
        let n = self.vertices.len();
        if n == 0 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Sorted, deduplicated undirected edges `(i, j)` with `i < j`.
pub fn edge_graph(faces: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Unnormalized per-vertex sums of face cross products. Each face contributes
/// `(b - a) x (c - a)`, whose length is twice its area, so the sum is the
/// area-weighted normal direction.
pub fn normal_sums(positions: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut sums = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let a = positions[f[0]];
        let c = (positions[f[1]] - a).cross(&(positions[f[2]] - a));
        for &v in f {
            sums[v] += c;
        }
    }
    sums
}

/// Area-weighted unit vertex normals for arbitrary positions on a fixed
/// face list. Orientation follows the face winding.
pub fn vertex_normals_from(positions: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let mut incident = vec![0usize; positions.len()];
    for f in faces {
        for &v in f {
            incident[v] += 1;
        }
    }
    if let Some(vertex) = incident.iter().position(|&c| c == 0) {
        return Err(Error::IsolatedVertex { vertex });
    }
    normal_sums(positions, faces)
        .into_iter()
        .enumerate()
        .map(|(vertex, m)| {
            let len = m.norm();
            if len > 0.0 && len.is_finite() {
                Ok(m / len)
            } else {
                Err(Error::DegenerateNormal { vertex })
            }
        })
        .collect()
}

pub fn vertex_normals(mesh: &TriMesh) -> Result<Vec<Vec3>> {
    vertex_normals_from(&mesh.vertices, &mesh.faces)
}

/// Pulls a gradient with respect to the unit vertex normals back to the
/// vertex positions. `sums` must be the output of [`normal_sums`] at
/// `positions`.
pub fn vertex_normals_backward(
    positions: &[Vec3],
    faces: &[[usize; 3]],
    sums: &[Vec3],
    grad_normals: &[Vec3],
) -> Vec<Vec3> {
    // d(m/|m|)/dm = (I - n n^T) / |m|
    let grad_sums: Vec<Vec3> = sums
        .iter()
        .zip(grad_normals)
        .map(|(m, g)| {
            let len = m.norm();
            if len == 0.0 {
                return Vec3::zeros();
            }
            let n = m / len;
            (g - n * n.dot(g)) / len
        })
        .collect();

    let mut grad = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let a = positions[f[0]];
        let e1 = positions[f[1]] - a;
        let e2 = positions[f[2]] - a;
        let h = grad_sums[f[0]] + grad_sums[f[1]] + grad_sums[f[2]];
        let g1 = e2.cross(&h);
        let g2 = h.cross(&e1);
        grad[f[1]] += g1;
        grad[f[2]] += g2;
        grad[f[0]] -= g1 + g2;
    }
    grad
}

/// Uniform ("umbrella") Laplacian restricted to a subset of rows:
/// `(L x)_i = x_i - mean(x_j for j in N(i))`, neighbours taken over the
/// full mesh graph.
#[derive(Debug, Clone)]
pub struct UmbrellaLaplacian {
    rows: Vec<usize>,
    neighbours: Vec<Vec<usize>>,
}

impl UmbrellaLaplacian {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn apply(&self, x: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .zip(&self.neighbours)
            .map(|(&i, nbrs)| {
                let mean = nbrs.iter().fold(Vec3::zeros(), |acc, &j| acc + x[j]) / nbrs.len() as f64;
                x[i] - mean
            })
            .collect()
    }

    /// `L^T g` as a dense per-vertex field over `vertex_count` vertices.
    pub fn apply_transpose(&self, g: &[Vec3], vertex_count: usize) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); vertex_count];
        for ((&i, nbrs), gi) in self.rows.iter().zip(&self.neighbours).zip(g) {
            out[i] += gi;
            let share = gi / nbrs.len() as f64;
            for &j in nbrs {
                out[j] -= share;
            }
        }
        out
    }
}

pub fn graph_laplacian(mesh: &TriMesh, subset: &[usize]) -> Result<UmbrellaLaplacian> {
    let adj = mesh.adjacency();
    let mut neighbours = Vec::with_capacity(subset.len());
    for &i in subset {
        if i >= adj.len() {
            return Err(Error::InvalidArgument(format!(
                "Laplacian row {i} out of range ({} vertices)",
                adj.len()
            )));
        }
        if adj[i].is_empty() {
            return Err(Error::NoNeighbours { vertex: i });
        }
        neighbours.push(adj[i].clone());
    }
    Ok(UmbrellaLaplacian {
        rows: subset.to_vec(),
        neighbours,
    })
}

/// Midpoint 1-to-4 subdivision. Original vertices keep their index and exact
/// position; edge `k` of the sorted edge list becomes vertex `V + k`.
pub fn interpolating_subdivide(mesh: &TriMesh) -> TriMesh {
    let v = mesh.vertices.len();
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::with_capacity(mesh.edges.len());
    for (k, &(a, b)) in mesh.edges.iter().enumerate() {
        vertices.push((mesh.vertices[a] + mesh.vertices[b]) * 0.5);
        midpoint.insert((a, b), v + k);
    }
    let mid = |a: usize, b: usize| midpoint[&if a < b { (a, b) } else { (b, a) }];

    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let ab = mid(a, b);
        let bc = mid(b, c);
        let ca = mid(c, a);
        faces.push([a, ab, ca]);
        faces.push([b, bc, ab]);
        faces.push([c, ca, bc]);
        faces.push([ab, bc, ca]);
    }
    let edges = edge_graph(&faces);
    TriMesh {
        vertices,
        faces,
        edges,
    }
}

/// The canonical mesh every scan is corresponded into, with named landmark
/// vertices and the mouth region used by the Laplacian regularizer.
#[derive(Debug, Clone)]
pub struct Template {
    mesh: TriMesh,
    landmarks: Vec<(String, usize)>,
    mouth: Vec<usize>,
}

impl Template {
    pub fn new(mesh: TriMesh, landmarks: Vec<(String, usize)>, mouth: Vec<usize>) -> Result<Self> {
        let n = mesh.vertex_count();
        let mut seen = std::collections::HashSet::new();
        for (id, idx) in &landmarks {
            if *idx >= n {
                return Err(Error::InvalidArgument(format!(
                    "landmark `{id}` index {idx} out of range ({n} vertices)"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateLandmark(id.clone()));
            }
        }
        if let Some(&m) = mouth.iter().find(|&&m| m >= n) {
            return Err(Error::InvalidArgument(format!(
                "mouth index {m} out of range ({n} vertices)"
            )));
        }
        if !mesh.is_connected() {
            return Err(Error::InvalidMesh("template edge graph is not connected".into()));
        }
        let mut mouth = mouth;
        mouth.sort_unstable();
        mouth.dedup();
        Ok(Self {
            mesh,
            landmarks,
            mouth,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        self.mesh.edges()
    }

    pub fn landmarks(&self) -> &[(String, usize)] {
        &self.landmarks
    }

    pub fn landmark_index(&self, id: &str) -> Option<usize> {
        self.landmarks.iter().find(|(l, _)| l == id).map(|(_, i)| *i)
    }

    pub fn mouth(&self) -> &[usize] {
        &self.mouth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn tri() -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn octahedron() -> TriMesh {
        let v = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        let f = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        TriMesh::new(v, f).unwrap()
    }

    #[test]
    fn planar_triangle_normals_follow_winding() {
        let n = vertex_normals(&tri()).unwrap();
        for v in &n {
            assert!(close(v, &Vec3::z(), 1e-15));
        }
        let flipped = TriMesh::new(tri().vertices().to_vec(), vec![[0, 2, 1]]).unwrap();
        for v in &vertex_normals(&flipped).unwrap() {
            assert!(close(v, &-Vec3::z(), 1e-15));
        }
    }

    #[test]
    fn octahedron_apex_normal() {
        // The four faces around (0,0,1) have normals (±1,±1,1)/sqrt(3) with
        // equal area; the lateral components cancel.
        let n = vertex_normals(&octahedron()).unwrap();
        assert!(close(&n[4], &Vec3::z(), 1e-12));
        assert!(close(&n[5], &-Vec3::z(), 1e-12));
    }

    #[test]
    fn isolated_vertex_is_reported() {
        let mut v = tri().vertices().to_vec();
        v.push(Vec3::new(5.0, 5.0, 5.0));
        let mesh = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(vertex_normals(&mesh), Err(Error::IsolatedVertex { vertex: 3 })));
    }

    #[test]
    fn zero_area_incidence_is_reported() {
        let v = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let mesh = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(vertex_normals(&mesh), Err(Error::DegenerateNormal { .. })));
    }

    #[test]
    fn invalid_faces_rejected() {
        let v = tri().vertices().to_vec();
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn edge_counts() {
        assert_eq!(tri().edges().len(), 3);
        let quad = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        assert_eq!(quad.edges(), &[(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)]);
        assert_eq!(octahedron().euler_characteristic(), 2);
    }

    #[test]
    fn umbrella_rows() {
        // 1-ring: centre 0 at origin, four symmetric neighbours.
        let v = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ];
        let f = vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
        let mesh = TriMesh::new(v, f).unwrap();
        let lap = graph_laplacian(&mesh, &[0]).unwrap();
        assert_eq!(lap.apply(mesh.vertices())[0], Vec3::zeros());

        let delta = 0.25;
        let mut moved = mesh.vertices().to_vec();
        moved[0].z = delta;
        assert_eq!(lap.apply(&moved)[0], Vec3::new(0.0, 0.0, delta));

        let t = Vec3::new(0.3, -1.7, 2.5);
        let shifted: Vec<Vec3> = moved.iter().map(|p| p + t).collect();
        assert!(close(&lap.apply(&shifted)[0], &lap.apply(&moved)[0], 1e-12));
    }

    #[test]
    fn laplacian_transpose_matches_dense() {
        let mesh = octahedron();
        let lap = graph_laplacian(&mesh, &[0, 4, 5]).unwrap();
        let g = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0), Vec3::new(0.0, 0.0, 2.0)];
        let lt = lap.apply_transpose(&g, 6);
        // <L x, g> == <x, L^T g> for a few basis fields x
        for vtx in 0..6 {
            for axis in 0..3 {
                let mut x = vec![Vec3::zeros(); 6];
                x[vtx][axis] = 1.0;
                let lhs: f64 = lap.apply(&x).iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
                assert!((lhs - lt[vtx][axis]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn laplacian_without_neighbours_errors() {
        let mut v = tri().vertices().to_vec();
        v.push(Vec3::new(3.0, 3.0, 3.0));
        let mesh = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(graph_laplacian(&mesh, &[3]), Err(Error::NoNeighbours { vertex: 3 })));
    }

    #[test]
    fn subdivide_single_triangle() {
        let mesh = tri();
        let sub = interpolating_subdivide(&mesh);
        assert_eq!(sub.vertex_count(), 6);
        assert_eq!(sub.faces().len(), 4);
        assert_eq!(&sub.vertices()[..3], mesh.vertices());
        // edges (0,1), (0,2), (1,2) in sorted order
        assert_eq!(sub.vertices()[3], Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(sub.vertices()[4], Vec3::new(0.0, 0.5, 0.0));
        assert_eq!(sub.vertices()[5], Vec3::new(0.5, 0.5, 0.0));
        for n in vertex_normals(&sub).unwrap() {
            assert!(close(&n, &Vec3::z(), 1e-15));
        }
    }

    #[test]
    fn subdivision_counting_and_topology() {
        let mesh = octahedron();
        let sub = interpolating_subdivide(&mesh);
        assert_eq!(sub.vertex_count(), mesh.vertex_count() + mesh.edges().len());
        assert_eq!(sub.faces().len(), 4 * mesh.faces().len());
        assert_eq!(sub.euler_characteristic(), mesh.euler_characteristic());
    }

    #[test]
    fn normal_backward_matches_finite_differences() {
        let mut mesh = octahedron();
        let jitter = [0.1, -0.05, 0.07, 0.02, -0.03, 0.04];
        let verts: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .zip(jitter)
            .map(|(p, j)| p + Vec3::new(j, -j * 0.5, j * 0.3))
            .collect();
        mesh = mesh.with_vertices(verts).unwrap();
        let w: Vec<Vec3> = (0..6).map(|i| Vec3::new(1.0 + i as f64, -0.5, 0.25 * i as f64)).collect();
        let objective = |p: &[Vec3]| -> f64 {
            vertex_normals_from(p, mesh.faces())
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(n, w)| n.dot(w))
                .sum()
        };
        let p = mesh.vertices().to_vec();
        let sums = normal_sums(&p, mesh.faces());
        let analytic = vertex_normals_backward(&p, mesh.faces(), &sums, &w);
        let h = 1e-6;
        for v in 0..6 {
            for a in 0..3 {
                let mut plus = p.clone();
                plus[v][a] += h;
                let mut minus = p.clone();
                minus[v][a] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - analytic[v][a]).abs() < 1e-7, "{v},{a}: {fd} vs {}", analytic[v][a]);
            }
        }
    }

    #[test]
    fn template_validation() {
        let mesh = octahedron();
        assert!(Template::new(mesh.clone(), vec![("a".into(), 0)], vec![4]).is_ok());
        assert!(Template::new(mesh.clone(), vec![("a".into(), 9)], vec![]).is_err());
        assert!(Template::new(mesh.clone(), vec![("a".into(), 0), ("a".into(), 1)], vec![]).is_err());
        assert!(Template::new(mesh, vec![], vec![6]).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], None).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], Some(vec![Vec3::new(2.0, 0.0, 0.0)])).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], Some(vec![])).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], Some(vec![Vec3::x()])).is_ok());
    }
}
