use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Point3;
use ply_rs_bw::parser::Parser;
use ply_rs_bw::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use ply_rs_bw::writer::Writer;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyPoints {
    pub points: Vec<Point3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Undirected edges from `face` or `edge` elements, deduplicated with `a < b`.
    pub edges: Option<Vec<(u32, u32)>>,
}

fn scalar_f64(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<i64>> {
    Some(match p {
        Property::ListChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x as i64).collect(),
        _ => return None,
    })
}

/// Reads an ASCII or binary PLY point file.
pub fn read_ply_points(path: &Path) -> Result<PlyPoints> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| Error::load(path, format!("malformed PLY: {e}")))?;

    let vertices = ply
        .payload
        .get("vertex")
        .ok_or_else(|| Error::load(path, "no vertex element"))?;

    let coord = |v: &DefaultElement, key: &str, i: usize| -> Result<f64> {
        v.get(key)
            .and_then(scalar_f64)
            .ok_or_else(|| Error::load(path, format!("vertex {i} lacks scalar property {key}")))
    };

    let mut points = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        points.push(Point3::new(
            coord(v, "x", i)?,
            coord(v, "y", i)?,
            coord(v, "z", i)?,
        ));
    }

    let has_colors = vertices
        .first()
        .is_some_and(|v| ["red", "green", "blue"].iter().all(|k| v.contains_key(*k)));
    let colors = if has_colors {
        let mut colors = Vec::with_capacity(vertices.len());
        for (i, v) in vertices.iter().enumerate() {
            let mut rgb = [0u8; 3];
            for (c, key) in rgb.iter_mut().zip(["red", "green", "blue"]) {
                *c = coord(v, key, i)?.clamp(0.0, 255.0) as u8;
            }
            colors.push(rgb);
        }
        Some(colors)
    } else {
        None
    };

    let n = points.len() as i64;
    let mut edges = BTreeSet::new();
    let mut push_edge = |a: i64, b: i64| -> Result<()> {
        if a < 0 || b < 0 || a >= n || b >= n {
            return Err(Error::load(path, format!("edge ({a}, {b}) out of range")));
        }
        if a != b {
            edges.insert((a.min(b) as u32, a.max(b) as u32));
        }
        Ok(())
    };
    let mut has_topology = false;
    if let Some(faces) = ply.payload.get("face") {
        has_topology = true;
        for f in faces {
            let idx = f
                .get("vertex_indices")
                .or_else(|| f.get("vertex_index"))
                .and_then(index_list)
                .ok_or_else(|| Error::load(path, "face without vertex_indices list"))?;
            for k in 0..idx.len() {
                push_edge(idx[k], idx[(k + 1) % idx.len()])?;
            }
        }
    }
    if let Some(edge_elems) = ply.payload.get("edge") {
        has_topology = true;
        for e in edge_elems {
            let a = e.get("vertex1").and_then(scalar_f64);
            let b = e.get("vertex2").and_then(scalar_f64);
            match (a, b) {
                (Some(a), Some(b)) => push_edge(a as i64, b as i64)?,
                _ => return Err(Error::load(path, "edge without vertex1/vertex2")),
            }
        }
    }

    Ok(PlyPoints {
        points,
        colors,
        edges: has_topology.then(|| edges.into_iter().collect()),
    })
}

/// Writes a binary little-endian PLY with float coordinates and optional colors.
pub fn write_ply_points(
    path: &Path,
    points: &[Point3<f64>],
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".to_string());
    for key in ["x", "y", "z"] {
        vertex.properties.add(PropertyDef::new(
            key.to_string(),
            PropertyType::Scalar(ScalarType::Float),
        ));
    }
    if colors.is_some() {
        for key in ["red", "green", "blue"] {
            vertex.properties.add(PropertyDef::new(
                key.to_string(),
                PropertyType::Scalar(ScalarType::UChar),
            ));
        }
    }
    ply.header.elements.add(vertex);

    let elements = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut e = DefaultElement::new();
            e.insert("x".into(), Property::Float(p.x as f32));
            e.insert("y".into(), Property::Float(p.y as f32));
            e.insert("z".into(), Property::Float(p.z as f32));
            if let Some(c) = colors {
                e.insert("red".into(), Property::UChar(c[i][0]));
                e.insert("green".into(), Property::UChar(c[i][1]));
                e.insert("blue".into(), Property::UChar(c[i][2]));
            }
            e
        })
        .collect();
    ply.payload.insert("vertex".into(), elements);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    Writer::new()
        .write_ply(&mut out, &mut ply)
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
