//! Indexed triangle meshes, OBJ input/output and deformation masks.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::MeshError;

pub type Vec3 = Vector3<f64>;

/// Relative area threshold: a face is degenerate when its area is below
/// this factor times the squared bounding-box diagonal.
pub const DEGENERATE_AREA_FACTOR: f64 = 1e-12;

/// Triangle mesh with a frozen copy of its rest pose.
///
/// Only `vertices` may change after construction; `rest_vertices`,
/// `faces` and `colors` are fixed for the lifetime of the mesh.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    rest_vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    colors: Option<Vec<Vec3>>,
}

impl TriMesh {
    /// Builds and validates a mesh. The given vertices become the rest pose.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        colors: Option<Vec<Vec3>>,
    ) -> Result<Self, MeshError> {
        validate(&vertices, &faces, colors.as_deref())?;
        Ok(Self {
            rest_vertices: vertices.clone(),
            vertices,
            faces,
            colors,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn rest_vertices(&self) -> &[Vec3] {
        &self.rest_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Replaces the current (deformed) vertex positions.
    pub fn set_vertices(&mut self, vertices: Vec<Vec3>) -> Result<(), MeshError> {
        if vertices.len() != self.rest_vertices.len() {
            return Err(MeshError::VertexCount {
                expected: self.rest_vertices.len(),
                got: vertices.len(),
            });
        }
        self.vertices = vertices;
        Ok(())
    }

    /// Copy of this mesh whose current vertices are `vertices` but whose
    /// rest pose is kept.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self, MeshError> {
        let mut out = self.clone();
        out.set_vertices(vertices)?;
        Ok(out)
    }

    /// Unit face normals of the given positions (zero for degenerate faces).
    pub fn face_normals(&self, positions: &[Vec3]) -> Vec<Vec3> {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let n = (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
                n.try_normalize(0.0).unwrap_or_else(Vec3::zeros)
            })
            .collect()
    }
}

fn validate(vertices: &[Vec3], faces: &[[usize; 3]], colors: Option<&[Vec3]>) -> Result<(), MeshError> {
    for (i, v) in vertices.iter().enumerate() {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(MeshError::NonFiniteVertex { vertex: i });
        }
    }
    if let Some(colors) = colors {
        if colors.len() != vertices.len() {
            return Err(MeshError::ColorCount {
                expected: vertices.len(),
                got: colors.len(),
            });
        }
        for (i, c) in colors.iter().enumerate() {
            if !c.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)) {
                return Err(MeshError::InvalidColor { vertex: i });
            }
        }
    }

    let (_, diagonal) = bounding_info_of(vertices);
    let min_area = DEGENERATE_AREA_FACTOR * diagonal * diagonal;
    let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
    for (f, face) in faces.iter().enumerate() {
        for &i in face {
            if i >= vertices.len() {
                return Err(MeshError::IndexOutOfRange {
                    face: f,
                    index: i,
                    vertex_count: vertices.len(),
                });
            }
        }
        let [a, b, c] = *face;
        if a == b || b == c || a == c {
            return Err(MeshError::RepeatedVertex { face: f });
        }
        let area = 0.5 * (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a])).norm();
        if !(area > min_area) {
            return Err(MeshError::DegenerateFace { face: f, area });
        }
        for (u, v) in [(a, b), (b, c), (c, a)] {
            let key = (u.min(v), u.max(v));
            let count = edge_use.entry(key).or_insert(0);
            *count += 1;
            if *count > 2 {
                return Err(MeshError::NonManifoldEdge {
                    face: f,
                    edge: key,
                });
            }
        }
    }
    Ok(())
}

/// Vertex centroid and axis-aligned bounding-box diagonal of the current vertices.
pub fn bounding_info(mesh: &TriMesh) -> (Vec3, f64) {
    bounding_info_of(mesh.vertices())
}

pub fn bounding_info_of(vertices: &[Vec3]) -> (Vec3, f64) {
    if vertices.is_empty() {
        return (Vec3::zeros(), 0.0);
    }
    let mut lo = vertices[0];
    let mut hi = vertices[0];
    let mut sum = Vec3::zeros();
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
        sum += v;
    }
    (sum / vertices.len() as f64, (hi - lo).norm())
}

/// Parses ASCII OBJ text. Polygons are fan-triangulated; `v x y z r g b`
/// lines carry per-vertex colors (all vertices or none).
pub fn parse_obj(text: &str) -> Result<TriMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut colors: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let parse_err = |msg: String| MeshError::Parse {
            line: lineno + 1,
            message: msg,
        };
        match tag {
            "v" => {
                let nums = tokens
                    .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number `{t}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                match nums.len() {
                    3 | 4 => vertices.push(Vec3::new(nums[0], nums[1], nums[2])),
                    6 => {
                        vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                        colors.push(Vec3::new(nums[3], nums[4], nums[5]));
                    }
                    n => return Err(parse_err(format!("vertex record has {n} values"))),
                }
            }
            "f" => {
                let mut poly = Vec::new();
                for t in tokens {
                    let idx_str = t.split('/').next().unwrap_or("");
                    let idx: i64 = idx_str
                        .parse()
                        .map_err(|_| parse_err(format!("bad face index `{t}`")))?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err("face index 0".into()));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err(format!(
                            "face index {idx} out of range ({} vertices so far)",
                            vertices.len()
                        )));
                    }
                    poly.push(resolved as usize);
                }
                if poly.len() < 3 {
                    return Err(parse_err(format!("face has {} vertices", poly.len())));
                }
                for k in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[k], poly[k + 1]]);
                }
            }
            // normals, texture coordinates, groups, materials: ignored
            _ => {}
        }
    }

    let colors = match colors.len() {
        0 => None,
        n if n == vertices.len() => Some(colors),
        n => {
            return Err(MeshError::ColorCount {
                expected: vertices.len(),
                got: n,
            })
        }
    };
    TriMesh::new(vertices, faces, colors)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

/// Serializes the current vertices (not the rest pose) as OBJ text.
pub fn to_obj_string(mesh: &TriMesh) -> String {
    let mut out = String::with_capacity(mesh.num_vertices() * 40 + mesh.num_faces() * 20);
    for (i, v) in mesh.vertices().iter().enumerate() {
        match mesh.colors() {
            Some(c) => {
                let c = c[i];
                writeln!(out, "v {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", v.x, v.y, v.z, c.x, c.y, c.z)
            }
            None => writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z),
        }
        .expect("writing to a String cannot fail");
    }
    for [a, b, c] in mesh.faces() {
        writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1).expect("writing to a String cannot fail");
    }
    out
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    fs::write(path, to_obj_string(mesh)).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// User handle: a vertex and the position it should be dragged to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleConstraint {
    pub vertex_index: usize,
    pub target: [f64; 3],
}

impl HandleConstraint {
    pub fn new(vertex_index: usize, target: Vec3) -> Self {
        Self {
            vertex_index,
            target: [target.x, target.y, target.z],
        }
    }

    pub fn target(&self) -> Vec3 {
        Vec3::from(self.target)
    }
}

/// Vertices allowed to move. Faces touching at least one movable vertex
/// are movable too.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMask {
    vertex_set: Option<BTreeSet<usize>>,
    vertex_flags: Vec<bool>,
    face_flags: Vec<bool>,
}

impl DeformationMask {
    /// Every vertex movable.
    pub fn all(mesh: &TriMesh) -> Self {
        Self {
            vertex_set: None,
            vertex_flags: vec![true; mesh.num_vertices()],
            face_flags: vec![true; mesh.num_faces()],
        }
    }

    pub fn from_vertices(
        mesh: &TriMesh,
        vertices: impl IntoIterator<Item = usize>,
    ) -> Result<Self, MeshError> {
        let set: BTreeSet<usize> = vertices.into_iter().collect();
        let mut vertex_flags = vec![false; mesh.num_vertices()];
        for &v in &set {
            if v >= mesh.num_vertices() {
                return Err(MeshError::MaskIndex {
                    index: v,
                    vertex_count: mesh.num_vertices(),
                });
            }
            vertex_flags[v] = true;
        }
        let face_flags = mesh
            .faces()
            .iter()
            .map(|f| f.iter().any(|&v| vertex_flags[v]))
            .collect();
        Ok(Self {
            vertex_set: Some(set),
            vertex_flags,
            face_flags,
        })
    }

    /// True when no explicit vertex set was given.
    pub fn is_all(&self) -> bool {
        self.vertex_set.is_none()
    }

    pub fn vertex_set(&self) -> Option<&BTreeSet<usize>> {
        self.vertex_set.as_ref()
    }

    pub fn contains_vertex(&self, v: usize) -> bool {
        self.vertex_flags.get(v).copied().unwrap_or(false)
    }

    pub fn contains_face(&self, f: usize) -> bool {
        self.face_flags.get(f).copied().unwrap_or(false)
    }

    pub fn vertex_flags(&self) -> &[bool] {
        &self.vertex_flags
    }

    pub fn face_flags(&self) -> &[bool] {
        &self.face_flags
    }

    pub fn face_set(&self) -> BTreeSet<usize> {
        self.face_flags
            .iter()
            .enumerate()
            .filter_map(|(f, &m)| m.then_some(f))
            .collect()
    }
}

/// Geodesic sphere of radius 1 centered at the origin: the icosahedron
/// (12 vertices, 20 faces) refined `subdivisions` times by edge midpoint
/// splitting and reprojection. Vertex counts are 12, 42, 162, 642, ...
pub fn icosphere(subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh::new(verts, faces, None).expect("icosphere is a valid closed manifold")
}
