use std::path::Path;

use nepf::sceneio::{ply_string, read_ply, MaterialMesh, VertexMaterial};

fn quad() -> MaterialMesh {
    let mat = |albedo: [f64; 3], roughness, metallic| VertexMaterial { albedo, roughness, metallic };
    MaterialMesh {
        vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
        normals: vec![[0.0, 0.0, 1.0]; 4],
        materials: vec![
            mat([0.7, 0.3, 0.3], 0.5, 0.0),
            mat([1.0, 1.0, 1.0], 0.25, 1.0),
            mat([0.0, 0.0, 0.0], 1.0, 0.5),
            mat([0.5, 0.5, 0.5], 0.75, 0.25),
        ],
    }
}

fn golden() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/two_triangles.ply")
}

#[test]
fn export_matches_committed_file() {
    let want = std::fs::read_to_string(golden()).unwrap();
    assert_eq!(ply_string(&quad()), want);
}

#[test]
fn committed_file_reads_back() {
    let mesh = read_ply(&golden()).unwrap();
    let q = quad();
    assert_eq!(mesh.vertices, q.vertices);
    assert_eq!(mesh.triangles, q.triangles);
    assert_eq!(mesh.normals, q.normals);
    for (a, b) in mesh.materials.iter().zip(&q.materials) {
        assert_eq!(a.roughness, b.roughness);
        assert_eq!(a.metallic, b.metallic);
        // colours pass through 8-bit sRGB-style codes
        for k in 0..3 {
            assert!((a.albedo[k] - b.albedo[k]).abs() < 0.01, "{a:?} vs {b:?}");
        }
    }
}
