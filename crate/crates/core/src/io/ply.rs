//! PLY point clouds: a `vertex` element with `x y z` (float or double) and
//! optional `nx ny nz`, encoded ascii or binary little-endian. Other
//! elements and properties are ignored on read.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;
use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType,
};
use ply_rs::writer::Writer;

use crate::cloud::PointCloud;
use crate::error::{at, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

fn scalar(e: &DefaultElement, key: &str) -> Option<f64> {
    match e.get(key)? {
        Property::Float(v) => Some(f64::from(*v)),
        Property::Double(v) => Some(*v),
        _ => None,
    }
}

pub fn read_ply_from(source: &mut impl Read) -> Result<PointCloud> {
    let ply = Parser::<DefaultElement>::new()
        .read_ply(source)
        .map_err(|e| Error::Parse(format!("ply: {e}")))?;
    if ply.header.encoding == Encoding::BinaryBigEndian {
        return Err(Error::Parse("ply: big-endian payloads are not supported".into()));
    }
    let def = ply
        .header
        .elements
        .get("vertex")
        .ok_or_else(|| Error::Parse("ply: no vertex element".into()))?;
    for k in ["x", "y", "z"] {
        match def.properties.get(k).map(|p| &p.data_type) {
            Some(PropertyType::Scalar(ScalarType::Float | ScalarType::Double)) => {}
            Some(_) => return Err(Error::Parse(format!("ply: property {k} must be float or double"))),
            None => return Err(Error::Parse(format!("ply: missing property {k}"))),
        }
    }
    let has_normals = ["nx", "ny", "nz"].iter().all(|k| def.properties.contains_key(*k));
    let vertices = ply.payload.get("vertex").map(Vec::as_slice).unwrap_or_default();
    let mut points = Vec::with_capacity(vertices.len());
    let mut normals = Vec::with_capacity(if has_normals { vertices.len() } else { 0 });
    for v in vertices {
        let get = |k| scalar(v, k).ok_or_else(|| Error::Parse(format!("ply: bad value for {k}")));
        points.push(Vector3::new(get("x")?, get("y")?, get("z")?));
        if has_normals {
            normals.push(Vector3::new(get("nx")?, get("ny")?, get("nz")?));
        }
    }
    PointCloud::with_normals(points, has_normals.then_some(normals))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut f = fs::File::open(path).map_err(at(path))?;
    read_ply_from(&mut f).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes `cloud` with double-precision coordinates.
pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Result<Vec<u8>> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = match encoding {
        PlyEncoding::Ascii => Encoding::Ascii,
        PlyEncoding::BinaryLittleEndian => Encoding::BinaryLittleEndian,
    };
    let mut def = ElementDef::new("vertex".into());
    let mut names = vec!["x", "y", "z"];
    if cloud.normals.is_some() {
        names.extend(["nx", "ny", "nz"]);
    }
    for n in &names {
        def.properties
            .add(PropertyDef::new((*n).into(), PropertyType::Scalar(ScalarType::Double)));
    }
    ply.header.elements.add(def);
    let vertices = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut e = DefaultElement::new();
            let mut values = vec![p.x, p.y, p.z];
            if let Some(n) = &cloud.normals {
                values.extend(n[i].iter());
            }
            for (k, v) in names.iter().zip(values) {
                e.insert((*k).into(), Property::Double(v));
            }
            e
        })
        .collect();
    ply.payload.insert("vertex".into(), vertices);
    let mut out = Vec::new();
    Writer::new()
        .write_ply(&mut out, &mut ply)
        .map_err(|e| Error::Parse(format!("ply: {e}")))?;
    Ok(out)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    fs::write(path, encode_ply(cloud, encoding)?).map_err(at(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(normals: bool) -> PointCloud {
        let points = vec![
            Vector3::new(0.1, -2.5, 3.0),
            Vector3::new(1e-9, 7.25, -0.333_333_333_333_333_3),
        ];
        let n = normals.then(|| vec![Vector3::x(), Vector3::new(0.0, 0.6, 0.8)]);
        PointCloud::with_normals(points, n).unwrap()
    }

    #[test]
    fn round_trips_both_encodings() {
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            for normals in [false, true] {
                let c = cloud(normals);
                let bytes = encode_ply(&c, enc).unwrap();
                assert_eq!(read_ply_from(&mut bytes.as_slice()).unwrap(), c);
            }
        }
    }

    #[test]
    fn reads_float_ascii_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment hand written\nelement vertex 2\n\
                    property float x\nproperty float y\nproperty float z\nproperty uchar red\n\
                    element face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    1 2 3 255\n0.5 0.25 -1 0\n";
        let c = read_ply_from(&mut text.as_bytes()).unwrap();
        assert_eq!(
            c.points,
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.5, 0.25, -1.0)]
        );
        assert!(c.normals.is_none());
    }

    #[test]
    fn rejects_malformed_files() {
        let missing_z =
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        let int_coords = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\nproperty int z\nend_header\n1 2 3\n";
        let big = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let empty = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        for text in [missing_z, int_coords, big, "not a ply file\n"] {
            assert!(
                matches!(read_ply_from(&mut text.as_bytes()), Err(Error::Parse(_))),
                "{text}"
            );
        }
        assert!(matches!(read_ply_from(&mut empty.as_bytes()), Err(Error::EmptyCloud)));
    }
}
