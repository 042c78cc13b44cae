//! Mesh file format (magic `BMSH`, version 1, little-endian).
//!
//! Layout: magic, version u32, node count u64, tet count u64, node
//! coordinates as interleaved f64 x/y/z, tet node indices as u32, one region
//! label byte per node, one boundary-condition flag byte per node.

use std::io::Read;
use std::path::Path;

use super::{LabelledMesh, Region, BC_FIXED, BC_LOADED};
use crate::error::{Error, Result};
use crate::io;

const MAGIC: &[u8; 4] = b"BMSH";
const VERSION: u32 = 1;

pub fn write_mesh(path: &Path, mesh: &LabelledMesh) -> Result<()> {
    io::atomic_write(path, |w| {
        use std::io::Write;
        w.write_all(MAGIC)?;
        io::write_u32(w, VERSION)?;
        io::write_u64(w, mesh.nodes.len() as u64)?;
        io::write_u64(w, mesh.tets.len() as u64)?;
        for p in &mesh.nodes {
            io::write_f64_slice(w, p)?;
        }
        for t in &mesh.tets {
            for &v in t {
                io::write_u32(w, v)?;
            }
        }
        for &l in &mesh.labels {
            io::write_u8(w, l.as_u8())?;
        }
        for &f in &mesh.bc_flags {
            io::write_u8(w, f)?;
        }
        Ok(())
    })
}

pub fn read_mesh(path: &Path) -> Result<LabelledMesh> {
    let mut r = io::open_input(path)?;
    io::expect_magic(&mut r, MAGIC, "mesh file")?;
    let version = io::read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::compatibility(format!(
            "mesh file version {version}, this build reads {VERSION}"
        )));
    }
    let node_count = io::read_u64(&mut r)? as usize;
    let tet_count = io::read_u64(&mut r)? as usize;
    if node_count == 0 || tet_count == 0 {
        return Err(Error::compatibility("mesh file with empty node or tet table"));
    }

    let coords = io::read_f64_vec(&mut r, node_count * 3)?;
    let nodes: Vec<[f64; 3]> =
        coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

    let mut tets = Vec::with_capacity(tet_count);
    for _ in 0..tet_count {
        let mut t = [0u32; 4];
        for v in &mut t {
            *v = io::read_u32(&mut r)?;
            if *v as usize >= node_count {
                return Err(Error::compatibility(format!(
                    "tet references node {v} of {node_count}"
                )));
            }
        }
        tets.push(t);
    }

    let mut labels = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        labels.push(Region::from_u8(io::read_u8(&mut r)?)?);
    }
    let mut bc_flags = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let f = io::read_u8(&mut r)?;
        if f & !(BC_FIXED | BC_LOADED) != 0 {
            return Err(Error::compatibility(format!("unknown bc flag bits {f:#x}")));
        }
        if f == BC_FIXED | BC_LOADED {
            return Err(Error::compatibility("node marked both fixed and loaded"));
        }
        bc_flags.push(f);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::compatibility("trailing bytes after mesh payload"));
    }
    Ok(LabelledMesh { nodes, tets, labels, bc_flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_phantom, PhantomSpec};

    #[test]
    fn mesh_roundtrips_bitwise() {
        let mesh = generate_phantom(&PhantomSpec::example()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.bmsh");
        write_mesh(&path, &mesh).unwrap();
        let back = read_mesh(&path).unwrap();
        assert_eq!(mesh, back);
        // Write again: identical bytes (no timestamps or map ordering).
        let path2 = dir.path().join("mesh2.bmsh");
        write_mesh(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let mesh = generate_phantom(&PhantomSpec::example()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.bmsh");
        write_mesh(&path, &mesh).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bmsh");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_mesh(&cut).is_err());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badp = dir.path().join("bad.bmsh");
        std::fs::write(&badp, &bad).unwrap();
        match read_mesh(&badp) {
            Err(Error::Compatibility(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected compatibility error, got {other:?}"),
        }

        let mut vbad = bytes;
        vbad[4] = 99;
        let vbadp = dir.path().join("vbad.bmsh");
        std::fs::write(&vbadp, &vbad).unwrap();
        assert!(matches!(read_mesh(&vbadp), Err(Error::Compatibility(_))));
    }
}
