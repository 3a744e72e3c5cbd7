//! Encoder checkpoints.
//!
//! Layout (little-endian): magic `CFPE`, version `u32`, role `u8`
//! (0 = query, 1 = document), `d_in` `u64`, `d_out` `u64`, then the weight
//! matrix in row-major `f64`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{EncoderRole, ProjectionEncoder, RetrieverError};

const MAGIC: &[u8; 4] = b"CFPE";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 1 + 8 + 8;

fn err(path: &Path, reason: impl Into<String>) -> RetrieverError {
    RetrieverError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_encoder(encoder: &ProjectionEncoder, path: &Path) -> Result<(), RetrieverError> {
    let mut buf = Vec::with_capacity(HEADER + 8 * encoder.weights.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match encoder.role {
        EncoderRole::Query => 0,
        EncoderRole::Document => 1,
    });
    buf.extend_from_slice(&(encoder.input_dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(encoder.output_dim() as u64).to_le_bytes());
    for w in encoder.weights.iter() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| err(path, e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(path, e.to_string()))?;
    tmp.write_all(&buf).map_err(|e| err(path, e.to_string()))?;
    tmp.persist(path).map_err(|e| err(path, e.error.to_string()))?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<ProjectionEncoder, RetrieverError> {
    let bytes = std::fs::read(path).map_err(|e| err(path, e.to_string()))?;
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(err(path, "not an encoder checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(path, format!("unsupported version {version}")));
    }
    let role = match bytes[8] {
        0 => EncoderRole::Query,
        1 => EncoderRole::Document,
        r => return Err(err(path, format!("unknown role byte {r}"))),
    };
    let d_in = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let d_out = u64::from_le_bytes(bytes[17..25].try_into().unwrap()) as usize;
    let expected = d_in.checked_mul(d_out).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(err(path, "truncated or oversized file"));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let weights = Array2::from_shape_vec((d_in, d_out), values).map_err(|e| err(path, e.to_string()))?;
    ProjectionEncoder::new(role, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for role in [EncoderRole::Query, EncoderRole::Document] {
            let enc = ProjectionEncoder::init_uniform(role, 7, 3, &mut rng);
            let path = dir.path().join(format!("{role:?}.bin"));
            save_encoder(&enc, &path).unwrap();
            assert_eq!(load_encoder(&path).unwrap(), enc);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let enc = ProjectionEncoder::zeros(EncoderRole::Query, 4, 2);
        save_encoder(&enc, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_encoder(&path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_encoder(&path).is_err());
        assert!(load_encoder(&dir.path().join("missing")).is_err());
    }
}
