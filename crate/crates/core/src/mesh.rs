//! Object meshes: vertex lists with optional triangles, loaded from ASCII PLY
//! or Wavefront OBJ. Lengths are meters.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    diameter: f64,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::TooFewVertices {
                requested: 4,
                available: vertices.len(),
            });
        }
        if vertices
            .iter()
            .any(|v| !v.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid("mesh", "non-finite vertex"));
        }
        if let Some(f) = faces
            .iter()
            .find(|f| f.iter().any(|&i| i >= vertices.len()))
        {
            return Err(Error::invalid(
                "mesh",
                format!("face {f:?} indexes past the vertex list"),
            ));
        }
        let diameter = point_set_diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::invalid("mesh", "all vertices coincide"));
        }
        Ok(Mesh {
            vertices,
            faces,
            diameter,
        })
    }

    pub fn from_points(vertices: Vec<Point3>) -> Result<Self> {
        Self::new(vertices, Vec::new())
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Largest distance between any two vertices.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Axis-aligned half extents around the model origin.
    pub fn half_extents(&self) -> [f64; 3] {
        let mut h = [0.0_f64; 3];
        for v in &self.vertices {
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = hk.max(v[k].abs());
            }
        }
        h
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Mesh::new(
            self.vertices
                .iter()
                .map(|v| Point3::from(v.coords * factor))
                .collect(),
            self.faces.clone(),
        )
    }

    /// Loads `.ply` (ASCII) or `.obj` based on the file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
        {
            Some(ext) if ext == "ply" => parse_ply(&text).map_err(|m| Error::parse(path, m)),
            Some(ext) if ext == "obj" => parse_obj(&text).map_err(|m| Error::parse(path, m)),
            _ => Err(Error::parse(
                path,
                "unsupported mesh extension (expected .ply or .obj)",
            )),
        }
    }

    pub fn to_ply_string(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.vertices.len());
        out.push_str("property float x\nproperty float y\nproperty float z\n");
        let _ = writeln!(out, "element face {}", self.faces.len());
        out.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
        }
        out
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ply_string()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn point_set_diameter(points: &[Point3]) -> f64 {
    let mut best = 0.0_f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn fan(poly: &[usize]) -> impl Iterator<Item = [usize; 3]> + '_ {
    (1..poly.len().saturating_sub(1)).map(move |k| [poly[0], poly[k], poly[k + 1]])
}

fn parse_ply(text: &str) -> std::result::Result<Mesh, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err("only ASCII PLY is supported".into());
                }
            }
            Some("element") => {
                let name = tok.next().ok_or("element without name")?.to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or("element without count")?;
                elements.push((name, count, Vec::new()));
            }
            Some("property") => {
                let el = elements.last_mut().ok_or("property before element")?;
                let name = tok.last().ok_or("property without name")?;
                el.2.push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut body = lines.filter(|l| !l.trim().is_empty());
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let line = body
                .next()
                .ok_or_else(|| format!("truncated {name} data"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            match name.as_str() {
                "vertex" => {
                    let get = |axis: &str| -> std::result::Result<f64, String> {
                        let k = props
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| format!("vertex has no {axis} property"))?;
                        vals.get(k)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| format!("bad vertex line '{line}'"))
                    };
                    vertices.push(Point3::new(get("x")?, get("y")?, get("z")?));
                }
                "face" => {
                    let n: usize = vals
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| format!("bad face line '{line}'"))?;
                    let idx: std::result::Result<Vec<usize>, _> = vals
                        .iter()
                        .skip(1)
                        .take(n)
                        .map(|v| v.parse::<usize>())
                        .collect();
                    let idx = idx.map_err(|_| format!("bad face line '{line}'"))?;
                    if idx.len() != n {
                        return Err(format!("bad face line '{line}'"));
                    }
                    faces.extend(fan(&idx));
                }
                _ => {}
            }
        }
    }
    Mesh::new(vertices, faces).map_err(|e| e.to_string())
}

fn parse_obj(text: &str) -> std::result::Result<Mesh, String> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for line in text.lines() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| format!("bad vertex line '{line}'"))?;
                if c.len() != 3 {
                    return Err(format!("bad vertex line '{line}'"));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| format!("bad face line '{line}'"))?;
                    let resolved = if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if resolved < 0 {
                        return Err(format!("bad face index in '{line}'"));
                    }
                    idx.push(resolved as usize);
                }
                faces.extend(fan(&idx));
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces).map_err(|e| e.to_string())
}
