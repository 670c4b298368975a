//! Binary parameter container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PEFTMINI1"
//! len | metadata (UTF-8 `key=value` lines)
//! repeated until EOF:
//!   len | name (UTF-8)
//!   rank | dim_0 .. dim_{rank-1}
//!   product(dims) × f32 (IEEE-754, little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"PEFTMINI1";

/// Ordered key/value metadata stored in the checkpoint header.
pub type Metadata = IndexMap<String, String>;

pub fn write_to<W: Write>(mut w: W, metadata: &Metadata, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    let mut meta = String::new();
    for (k, v) in metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "metadata entry `{k}` is not a single key=value line"
            )));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    write_bytes(&mut w, meta.as_bytes())?;
    for (name, t) in params.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            write_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<(Metadata, ParamStore)> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_bytes = read_bytes(&mut r)?.ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let mut metadata = Metadata::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("metadata line `{line}` has no `=`")))?;
        metadata.insert(k.to_string(), v.to_string());
    }
    let mut params = ParamStore::new();
    while let Some(name) = read_bytes(&mut r)? {
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((metadata, params))
}

pub fn save(path: impl AsRef<Path>, metadata: &Metadata, params: &ParamStore) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), metadata, params)
}

pub fn load(path: impl AsRef<Path>) -> Result<(Metadata, ParamStore)> {
    read_from(BufReader::new(File::open(path)?))
}

fn write_u32<W: Write>(w: &mut W, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("{x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// `None` at a clean end of stream.
fn read_bytes<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Checkpoint("truncated length prefix".into()))
            };
        }
        got += n;
    }
    let len = u32::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated string".into()))?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(entries: &[(String, Vec<usize>, Vec<f32>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape, data) in entries {
            s.insert(n.clone(), Tensor::new(shape.clone(), data.clone()).unwrap());
        }
        s
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            raw in prop::collection::vec((1usize..4, 1usize..5, prop::collection::vec(any::<u32>(), 20)), 0..5),
            key in "[a-z_]{1,8}",
            value in "[ -~]{0,20}",
        ) {
            let entries: Vec<_> = raw.iter().enumerate().map(|(i, (a, b, bits))| {
                let data: Vec<f32> = bits.iter().take(a * b).map(|&x| f32::from_bits(x)).collect();
                (format!("p.{i}"), vec![*a, *b], data)
            }).collect();
            let store = store_from(&entries);
            let mut meta = Metadata::new();
            meta.insert(key, value);
            let mut bytes = Vec::new();
            write_to(&mut bytes, &meta, &store).unwrap();
            let (meta2, store2) = read_from(&bytes[..]).unwrap();
            prop_assert_eq!(&meta, &meta2);
            prop_assert_eq!(store.len(), store2.len());
            for ((n1, t1), (n2, t2)) in store.iter().zip(store2.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert!(t1.bits_eq(t2));
            }
            let mut again = Vec::new();
            write_to(&mut again, &meta2, &store2).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let store = store_from(&[("w".into(), vec![2], vec![1.0, 2.0])]);
        let mut bytes = Vec::new();
        write_to(&mut bytes, &Metadata::new(), &store).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(&bad[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(
            read_from(&bytes[..bytes.len() - 2]),
            Err(Error::Checkpoint(_))
        ));
    }
}
