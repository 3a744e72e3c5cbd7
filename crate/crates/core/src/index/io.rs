//! Index files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFIX" | version u32 | kind u8 (0 exact, 1 ivf) | dimension u64 | n_docs u64
//! doc ids: n_docs x (len u32, utf-8 bytes)
//! vectors: n_docs x dimension f64
//! ivf only: k u64 | n_probe u64 | max_iters u64 | seed u64
//!           centroids k x dimension f64 | assignments n_docs x u32
//!           history_len u64 | history f64...
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{IndexError, IndexKind, IvfData, IvfParams, VectorIndex};

const MAGIC: &[u8; 4] = b"CFIX";
const VERSION: u32 = 1;

fn put_u64(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s<'a>(buf: &mut Vec<u8>, vals: impl Iterator<Item = &'a f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let err = |reason: String| IndexError::Format {
        path: path.display().to_string(),
        reason,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match index.kind {
        IndexKind::Exact => 0,
        IndexKind::Ivf => 1,
    });
    put_u64(&mut buf, index.dimension());
    put_u64(&mut buf, index.len());
    for id in &index.doc_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    put_f64s(&mut buf, index.vectors.iter());
    if let Some(ivf) = &index.ivf {
        put_u64(&mut buf, ivf.params.k_centroids);
        put_u64(&mut buf, ivf.params.n_probe);
        put_u64(&mut buf, ivf.params.kmeans_max_iters);
        buf.extend_from_slice(&ivf.params.kmeans_seed.to_le_bytes());
        put_f64s(&mut buf, ivf.centroids.iter());
        for a in &ivf.assignments {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        put_u64(&mut buf, ivf.objective_history.len());
        put_f64s(&mut buf, ivf.objective_history.iter());
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(e.to_string()))?;
    tmp.write_all(&buf).map_err(|e| err(e.to_string()))?;
    tmp.persist(path).map_err(|e| err(e.error.to_string()))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "count overflows usize".to_string())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("count overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn parse(bytes: &[u8]) -> Result<VectorIndex, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let kind = match r.take(1)?[0] {
        0 => IndexKind::Exact,
        1 => IndexKind::Ivf,
        k => return Err(format!("unknown index kind {k}")),
    };
    let dim = r.usize()?;
    let n = r.usize()?;
    let mut doc_ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
        doc_ids.push(s.to_string());
    }
    let shape = |rows: usize, vals: Vec<f64>| Array2::from_shape_vec((rows, dim), vals).map_err(|e| e.to_string());
    let vectors = shape(n, r.f64s(n.checked_mul(dim).ok_or("count overflow")?)?)?;
    let mut index = VectorIndex::exact(doc_ids, vectors).map_err(|e| e.to_string())?;
    if kind == IndexKind::Ivf {
        let params = IvfParams {
            k_centroids: r.usize()?,
            n_probe: r.usize()?,
            kmeans_max_iters: r.usize()?,
            kmeans_seed: r.u64()?,
        };
        params.validate(n).map_err(|e| e.to_string())?;
        let centroids = shape(params.k_centroids, r.f64s(params.k_centroids.checked_mul(dim).ok_or("count overflow")?)?)?;
        let mut assignments = Vec::with_capacity(n);
        for _ in 0..n {
            let a = r.u32()?;
            if a as usize >= params.k_centroids {
                return Err(format!("assignment {a} references a missing centroid"));
            }
            assignments.push(a);
        }
        let h = r.usize()?;
        let history = r.f64s(h)?;
        index.kind = IndexKind::Ivf;
        index.ivf = Some(IvfData::new(params, centroids, assignments, history));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(index)
}

pub fn load_index(path: &Path) -> Result<VectorIndex, IndexError> {
    let err = |reason: String| IndexError::Format {
        path: path.display().to_string(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    parse(&bytes).map_err(err)
}
