//! Binary checkpoint format (little-endian, no padding):
//!
//! ```text
//! magic        b"MMLB"
//! version      u32 = 1
//! layer_count  u32
//! per layer:
//!   name_len   u32, then name_len bytes of UTF-8
//!   rank       u32, then rank × u32 dims
//!   values     product(dims) × f64, row-major
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{Layer, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MMLB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + params.num_values() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    for layer in params.layers() {
        buf.extend_from_slice(&(layer.name().len() as u32).to_le_bytes());
        buf.extend_from_slice(layer.name().as_bytes());
        buf.extend_from_slice(&(layer.shape().len() as u32).to_le_bytes());
        for &d in layer.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in layer.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!(
                    "needed {n} bytes for {what} at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a checkpoint buffer; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("layer count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let name_len = r.u32("layer name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|e| {
                Error::Data(format!(
                    "{}: layer {i} name is not UTF-8: {e}",
                    path.display()
                ))
            })?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(8), &format!("values of layer {name}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Layer::new(name, shape, values)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after last layer",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of the encoded form.
pub fn digest(params: &ModelParams) -> String {
    hex::encode(Sha256::digest(encode(params)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelParams {
        ModelParams::from_layers(vec![
            Layer::new(
                "enc.0.weight",
                vec![2, 3],
                vec![1.0, -2.5, 0.0, -0.0, 1e-300, f64::MAX],
            )
            .unwrap(),
            Layer::from_vector("enc.0.bias", &[0.1, 0.2, 0.3]),
            Layer::new("scalar", vec![], vec![7.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let p = ModelParams::from_layers(vec![Layer::from_vector("ab", &[1.5])]).unwrap();
        let bytes = encode(&p);
        let mut want = b"MMLB".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1.5f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back = decode(&encode(&p), Path::new("mem")).unwrap();
        assert!(back.bitwise_eq(&p));
    }

    #[test]
    fn empty_layer_list_round_trips() {
        let p = ModelParams::new();
        assert_eq!(encode(&p).len(), 12);
        assert!(decode(&encode(&p), Path::new("mem")).unwrap().is_empty());
    }

    #[test]
    fn corruptions_raise_distinct_errors() {
        let good = encode(&sample());
        let path = Path::new("mem");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode(&bad_magic, path),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode(&bad_version, path),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        for cut in [2, 6, 11, 20, good.len() - 1] {
            assert!(
                matches!(decode(&good[..cut], path), Err(Error::Truncated { .. })),
                "cut at {cut}"
            );
        }
    }

    proptest! {
        #[test]
        fn arbitrary_params_round_trip(
            layers in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let mut p = ModelParams::new();
            for (i, (shape, bits)) in layers.iter().enumerate() {
                let n: usize = shape.iter().product();
                let values = (0..n).map(|j| f64::from_bits(bits.rotate_left(j as u32))).collect();
                p.push(Layer::new(format!("l{i}"), shape.clone(), values).unwrap()).unwrap();
            }
            let back = decode(&encode(&p), Path::new("mem")).unwrap();
            prop_assert!(back.bitwise_eq(&p));
        }
    }
}
