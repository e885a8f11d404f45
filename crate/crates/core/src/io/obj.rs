//! OBJ subset: `v x y z` and `f a b c` lines. Face indices are 1-based and
//! may carry `/vt/vn` suffixes, which are ignored. Polygons are fanned.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GenieError, Result};
use crate::scene::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

pub fn parse_obj(text: &str) -> std::result::Result<ObjMesh, String> {
    let mut mesh = ObjMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: {e}", ln + 1))?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", ln + 1));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        head.parse::<usize>()
                            .ok()
                            .filter(|i| *i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| format!("line {}: bad face index {s:?}", ln + 1))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(format!("line {}: face needs 3 vertices", ln + 1));
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len();
    if let Some(f) = mesh.faces.iter().find(|f| f.iter().any(|i| *i >= n)) {
        return Err(format!("face {f:?} references a vertex beyond {n}"));
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<ObjMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| GenieError::io(path, e))?;
    parse_obj(&text).map_err(|m| GenieError::parse(path, m))
}

pub fn format_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        // {:?} on f64 prints the shortest round-tripping form
        writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    for f in faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

pub fn write_obj(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    std::fs::write(path, format_obj(vertices, faces)).map_err(|e| GenieError::io(path, e))
}
