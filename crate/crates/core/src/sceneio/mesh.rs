//! Zero-level-set extraction and PLY export.
//!
//! Each grid cube is split into six tetrahedra around its main diagonal,
//! which avoids the ambiguous cases of the cube table and still yields a
//! watertight mesh because neighbouring cubes split shared faces the same
//! way. Vertices on shared grid edges are welded.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{decode_channel, encode_channel};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexMaterial {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl Default for VertexMaterial {
    fn default() -> Self {
        Self {
            albedo: [0.5; 3],
            roughness: 0.5,
            metallic: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaterialMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// Unit normals, pointing toward positive SDF.
    pub normals: Vec<[f64; 3]>,
    pub materials: Vec<VertexMaterial>,
}

impl MaterialMesh {
    pub fn validate(&self) -> Result<(), Error> {
        let n = self.vertices.len();
        if self.normals.len() != n || self.materials.len() != n {
            return Err(Error::Data("per-vertex attribute count differs from vertex count".into()));
        }
        if self.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return Err(Error::Data("triangle index out of range".into()));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| tri_area(self, t)).sum()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| a[k] - b[k])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn tri_area(mesh: &MaterialMesh, t: &[u32; 3]) -> f64 {
    let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Grid points per axis block when skipping empty space.
const BLOCK: usize = 8;

/// Extracts `f = 0` on a `resolution³` cell grid over the cube
/// `[lo, hi]³`. `sdf` is called with batches of points.
///
/// Blocks of cells whose center value exceeds twice their half-diagonal
/// are assumed not to contain the surface and are filled with that value,
/// which is exact for any function with gradient norm at most 2.
pub fn marching_cubes(
    sdf: &mut dyn FnMut(&[[f64; 3]]) -> Vec<f64>,
    resolution: usize,
    lo: f64,
    hi: f64,
) -> Result<MaterialMesh, Error> {
    extract(sdf, resolution, lo, hi, true)
}

fn extract(
    sdf: &mut dyn FnMut(&[[f64; 3]]) -> Vec<f64>,
    resolution: usize,
    lo: f64,
    hi: f64,
    skip_empty: bool,
) -> Result<MaterialMesh, Error> {
    if resolution < 2 {
        return Err(Error::Config("mesh resolution must be at least 2".into()));
    }
    let n = resolution + 1;
    let step = (hi - lo) / resolution as f64;
    let pos = |i: usize| lo + i as f64 * step;
    let index = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    let values = grid_values(sdf, n, &pos, step, skip_empty);

    let mut mesh = MaterialMesh::default();
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let corners: [usize; 8] =
                    std::array::from_fn(|c| index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                let f = corners.map(|c| values[c]);
                if f.iter().all(|&v| v >= 0.0) || f.iter().all(|&v| v < 0.0) {
                    continue;
                }
                for tet in TETS {
                    let ids = tet.map(|c| corners[c]);
                    let fv = tet.map(|c| f[c]);
                    let point = |g: usize| {
                        let (a, rest) = (g / (n * n), g % (n * n));
                        [pos(a), pos(rest / n), pos(rest % n)]
                    };
                    polygonize(&mut mesh, &mut welded, ids, fv, &point);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    face_normals(&mut mesh);
    mesh.materials = vec![VertexMaterial::default(); mesh.vertices.len()];
    Ok(mesh)
}

fn grid_values(
    sdf: &mut dyn FnMut(&[[f64; 3]]) -> Vec<f64>,
    n: usize,
    pos: &dyn Fn(usize) -> f64,
    step: f64,
    skip_empty: bool,
) -> Vec<f64> {
    let mut values = vec![f64::NAN; n * n * n];
    let blocks = n.div_ceil(BLOCK);
    let block_range = |b: usize| (b * BLOCK, ((b + 1) * BLOCK + 1).min(n));
    // one probe per block at its center
    let mut centers = Vec::new();
    for bi in 0..blocks {
        for bj in 0..blocks {
            for bk in 0..blocks {
                let c = [bi, bj, bk].map(|b| {
                    let (s, e) = block_range(b);
                    0.5 * (pos(s) + pos(e - 1))
                });
                centers.push(c);
            }
        }
    }
    let probe = sdf(&centers);
    let mut points = Vec::new();
    let mut targets = Vec::new();
    for (b, &fc) in probe.iter().enumerate() {
        let (bi, bj, bk) = (b / (blocks * blocks), (b / blocks) % blocks, b % blocks);
        let ranges = [bi, bj, bk].map(block_range);
        let half_diag = 0.5 * step * 3f64.sqrt() * ranges.iter().map(|(s, e)| e - s - 1).max().unwrap() as f64;
        let skip = skip_empty && fc.abs() > 2.0 * half_diag;
        for i in ranges[0].0..ranges[0].1 {
            for j in ranges[1].0..ranges[1].1 {
                for k in ranges[2].0..ranges[2].1 {
                    let g = (i * n + j) * n + k;
                    if skip {
                        if values[g].is_nan() {
                            values[g] = fc;
                        }
                    } else {
                        points.push([pos(i), pos(j), pos(k)]);
                        targets.push(g);
                    }
                }
            }
        }
    }
    for (chunk_p, chunk_t) in points.chunks(65536).zip(targets.chunks(65536)) {
        for (v, &g) in sdf(chunk_p).into_iter().zip(chunk_t) {
            values[g] = v;
        }
    }
    values
}

fn polygonize(
    mesh: &mut MaterialMesh,
    welded: &mut HashMap<(usize, usize), u32>,
    ids: [usize; 4],
    f: [f64; 4],
    point: &dyn Fn(usize) -> [f64; 3],
) {
    let inside: Vec<usize> = (0..4).filter(|&c| f[c] < 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&c| f[c] >= 0.0).collect();
    if inside.is_empty() || outside.is_empty() {
        return;
    }
    let mut vertex = |a: usize, b: usize| -> u32 {
        // crossings within 1e-9 of a grid node snap to that node, so
        // near-zero values do not leave slivers
        let t = f[a] / (f[a] - f[b]);
        let snap = if t <= 1e-9 {
            Some(a)
        } else if t >= 1.0 - 1e-9 {
            Some(b)
        } else {
            None
        };
        let key = match snap {
            Some(c) => (ids[c], ids[c]),
            None => (ids[a].min(ids[b]), ids[a].max(ids[b])),
        };
        *welded.entry(key).or_insert_with(|| {
            let (pa, pb) = (point(ids[a]), point(ids[b]));
            mesh.vertices.push(match snap {
                Some(c) => point(ids[c]),
                None => std::array::from_fn(|k| pa[k] + t * (pb[k] - pa[k])),
            });
            (mesh.vertices.len() - 1) as u32
        })
    };
    let centroid = |set: &[usize]| -> [f64; 3] {
        let mut c = [0.0; 3];
        for &s in set {
            let p = point(ids[s]);
            for k in 0..3 {
                c[k] += p[k] / set.len() as f64;
            }
        }
        c
    };
    let outward = sub(centroid(&outside), centroid(&inside));
    let tris: Vec<[u32; 3]> = match (inside.len(), outside.len()) {
        (1, 3) => vec![outside.iter().map(|&o| vertex(inside[0], o)).collect::<Vec<_>>().try_into().unwrap()],
        (3, 1) => vec![inside.iter().map(|&i| vertex(i, outside[0])).collect::<Vec<_>>().try_into().unwrap()],
        _ => {
            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
            let q = [vertex(a, c), vertex(a, d), vertex(b, d), vertex(b, c)];
            vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        }
    };
    for mut t in tris {
        let [p0, p1, p2] = t.map(|i| mesh.vertices[i as usize]);
        let nrm = cross(sub(p1, p0), sub(p2, p0));
        if nrm.iter().zip(&outward).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            t.swap(1, 2);
        }
        if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
            mesh.triangles.push(t);
        }
    }
}

/// Area-weighted vertex normals from the triangles.
fn face_normals(mesh: &mut MaterialMesh) {
    let mut acc = vec![[0.0; 3]; mesh.vertices.len()];
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let nrm = cross(sub(b, a), sub(c, a));
        for &i in t {
            for k in 0..3 {
                acc[i as usize][k] += nrm[k];
            }
        }
    }
    mesh.normals = acc
        .into_iter()
        .map(|v| {
            let len = norm(v);
            if len > 0.0 {
                v.map(|c| c / len)
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
}

/// `n` points uniformly distributed over the mesh area.
pub fn sample_mesh(mesh: &MaterialMesh, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += tri_area(mesh, t);
        cdf.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let t = mesh.triangles[cdf.partition_point(|&c| c < u).min(cdf.len() - 1)];
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            std::array::from_fn(|k| a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]))
        })
        .collect()
}

const PLY_HEADER_VERTEX: [&str; 11] = [
    "property float x",
    "property float y",
    "property float z",
    "property float nx",
    "property float ny",
    "property float nz",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
    "property float roughness",
    "property float metallic",
];

/// ASCII PLY text. Albedo is stored gamma encoded as 8-bit color; all other
/// values are written with round-trip precision.
pub fn ply_string(mesh: &MaterialMesh) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices.len());
    for line in PLY_HEADER_VERTEX {
        out.push_str(line);
        out.push('\n');
    }
    let _ = writeln!(out, "element face {}", mesh.triangles.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for ((p, n), m) in mesh.vertices.iter().zip(&mesh.normals).zip(&mesh.materials) {
        let rgb = m.albedo.map(|c| encode_channel(c, true));
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {}",
            p[0], p[1], p[2], n[0], n[1], n[2], rgb[0], rgb[1], rgb[2], m.roughness, m.metallic
        );
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

pub fn export_ply(mesh: &MaterialMesh, path: &Path) -> Result<(), Error> {
    mesh.validate()?;
    std::fs::write(path, ply_string(mesh))?;
    Ok(())
}

/// Parses files written by [`export_ply`].
pub fn read_ply(path: &Path) -> Result<MaterialMesh, Error> {
    let text = std::fs::read_to_string(path)?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut lines = text.lines();
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut properties = Vec::new();
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["element", "vertex", n] => n_vertices = n.parse::<usize>().ok(),
            ["element", "face", n] => n_faces = n.parse::<usize>().ok(),
            ["property", "list", ..] => {}
            ["property", _, _] => properties.push(line),
            _ => {}
        }
    }
    if properties != PLY_HEADER_VERTEX {
        return Err(bad("unexpected vertex properties"));
    }
    let (nv, nf) = (n_vertices.ok_or_else(|| bad("no vertex count"))?, n_faces.ok_or_else(|| bad("no face count"))?);
    let mut mesh = MaterialMesh::default();
    for _ in 0..nv {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<_, _>>()?;
        if v.len() != 11 {
            return Err(bad("vertex line needs 11 values"));
        }
        mesh.vertices.push([v[0], v[1], v[2]]);
        mesh.normals.push([v[3], v[4], v[5]]);
        mesh.materials.push(VertexMaterial {
            albedo: [v[6], v[7], v[8]].map(|c| decode_channel(c as u8, true)),
            roughness: v[9],
            metallic: v[10],
        });
    }
    for _ in 0..nf {
        let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
        let v: Vec<u32> = line
            .split_whitespace()
            .map(|w| w.parse::<u32>().map_err(|_| bad("bad index")))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 || v[0] != 3 {
            return Err(bad("only triangles are supported"));
        }
        mesh.triangles.push([v[1], v[2], v[3]]);
    }
    mesh.validate()?;
    Ok(mesh)
}
