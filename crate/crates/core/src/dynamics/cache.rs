//! On-disk cache of transport data.
//!
//! File layout (text, versioned):
//!
//! ```text
//! # plap-transport v1
//! # key <hex>
//! # flow <description>
//! # mesh <signature>
//! # triangles <n>
//! tri_index Tx Ty DT11 DT12 DT21 DT22
//! ...
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{precompute_transport, FlowError, FlowMap, Mat2, TransportData};
use crate::mesh::{Mesh, Point};

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// Identity maps are never written to disk.
    Bypassed,
}

#[derive(Debug, Clone)]
pub struct TransportCache {
    dir: PathBuf,
}

impl TransportCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Content hash of flow description, mesh signature and format version.
    pub fn key(map: &FlowMap, mesh: &Mesh) -> String {
        let mut h = Sha256::new();
        h.update(format!("v{CACHE_FORMAT_VERSION}\n").as_bytes());
        h.update(map.description().as_bytes());
        h.update(b"\n");
        h.update(mesh.signature().as_bytes());
        h.finalize()
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn path_for(&self, map: &FlowMap, mesh: &Mesh) -> PathBuf {
        self.dir
            .join(format!("transport-{}.txt", Self::key(map, mesh)))
    }

    /// Load cached transport for `(map, mesh)`, computing and storing it on a
    /// miss.
    pub fn load_or_compute(
        &self,
        map: &FlowMap,
        mesh: &Mesh,
    ) -> Result<(TransportData, CacheStatus), FlowError> {
        if map.kind == super::FlowKind::Identity {
            return Ok((TransportData::identity(mesh), CacheStatus::Bypassed));
        }
        let path = self.path_for(map, mesh);
        if path.exists() {
            match read_transport(&path, map, mesh) {
                Ok(t) => return Ok((t, CacheStatus::Hit)),
                Err(e) => log::warn!("ignoring unreadable transport cache: {e}"),
            }
        }
        let t = precompute_transport(map, mesh)?;
        fs::create_dir_all(&self.dir)?;
        write_transport(&path, map, mesh, &t)?;
        Ok((t, CacheStatus::Miss))
    }

    /// Cache files currently present, sorted by name.
    pub fn entries(&self) -> Result<Vec<PathBuf>, FlowError> {
        if !self.dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("transport-") && n.ends_with(".txt"))
            })
            .collect();
        out.sort();
        Ok(out)
    }

    /// Remove every cache file; returns how many were deleted.
    pub fn clear(&self) -> Result<usize, FlowError> {
        let entries = self.entries()?;
        for p in &entries {
            fs::remove_file(p)?;
        }
        Ok(entries.len())
    }
}

/// Header lines (without the `# ` prefix) of a cache file.
pub fn read_header(path: &Path) -> Result<Vec<String>, FlowError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        match line.strip_prefix("# ") {
            Some(rest) => out.push(rest.to_string()),
            None => break,
        }
    }
    Ok(out)
}

fn write_transport(
    path: &Path,
    map: &FlowMap,
    mesh: &Mesh,
    t: &TransportData,
) -> Result<(), FlowError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        writeln!(w, "# plap-transport v{CACHE_FORMAT_VERSION}")?;
        writeln!(w, "# key {}", TransportCache::key(map, mesh))?;
        writeln!(w, "# flow {}", map.description())?;
        writeln!(w, "# mesh {}", mesh.signature())?;
        writeln!(w, "# triangles {}", t.len())?;
        for (i, e) in t.entries().iter().enumerate() {
            let j = &e.jacobian;
            writeln!(
                w,
                "{i} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
                e.mapped.x,
                e.mapped.y,
                j[(0, 0)],
                j[(0, 1)],
                j[(1, 0)],
                j[(1, 1)]
            )?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_transport(path: &Path, map: &FlowMap, mesh: &Mesh) -> Result<TransportData, FlowError> {
    let bad = |msg: String| FlowError::CacheFormat {
        path: path.display().to_string(),
        msg,
    };
    let header = read_header(path)?;
    let expect = [
        format!("plap-transport v{CACHE_FORMAT_VERSION}"),
        format!("key {}", TransportCache::key(map, mesh)),
        format!("flow {}", map.description()),
        format!("mesh {}", mesh.signature()),
        format!("triangles {}", mesh.num_triangles()),
    ];
    if header.len() != expect.len() || header.iter().zip(&expect).any(|(a, b)| a != b) {
        return Err(bad("header does not match the requested flow and mesh".into()));
    }

    let n = mesh.num_triangles();
    let mut mapped = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    let f = BufReader::new(fs::File::open(path)?);
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields", lineno + 1)));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("line {}: bad index", lineno + 1)))?;
        if idx != mapped.len() {
            return Err(bad(format!("line {}: out-of-order index {idx}", lineno + 1)));
        }
        let mut v = [0.0; 6];
        for (k, s) in fields[1..].iter().enumerate() {
            v[k] = s
                .parse()
                .map_err(|_| bad(format!("line {}: bad number {s:?}", lineno + 1)))?;
        }
        mapped.push(Point::new(v[0], v[1]));
        jac.push(Mat2::new(v[2], v[3], v[4], v[5]));
    }
    if mapped.len() != n {
        return Err(bad(format!("expected {n} rows, found {}", mapped.len())));
    }
    TransportData::from_jacobians(mesh, &mapped, &jac)
}
