//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! CAMA-CKPT v1\n
//! {"entries":[{"name":..,"group":..,"shape":[..]},..],"meta":{..}}\n
//! <f64 little-endian values of every entry, in manifest order>
//! ```
//!
//! The manifest is a single JSON line. `meta` is free-form and carries
//! whatever the producer needs to rebuild the owning model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GradError, ParameterStore, Tensor};

pub const CHECKPOINT_HEADER: &str = "CAMA-CKPT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParameterStore, meta: &serde_json::Value) -> Result<(), GradError> {
    let manifest = Manifest {
        entries: store
            .iter()
            .map(|(name, group, t)| ManifestEntry {
                name: name.to_string(),
                group: group.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    serde_json::to_writer(&mut w, &manifest).map_err(|e| GradError::Checkpoint(e.to_string()))?;
    writeln!(w)?;
    for (_, _, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParameterStore, meta: &serde_json::Value) -> Result<(), GradError> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), store, meta)
}

/// Reads a whole checkpoint. Nothing is returned unless every entry parsed.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(ParameterStore, serde_json::Value), GradError> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    if header.trim_end_matches('\n') != CHECKPOINT_HEADER {
        return Err(GradError::Checkpoint(format!(
            "unsupported header {:?}, expected {CHECKPOINT_HEADER:?}",
            header.trim_end()
        )));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: Manifest =
        serde_json::from_str(line.trim_end()).map_err(|e| GradError::Checkpoint(format!("manifest: {e}")))?;
    let mut store = ParameterStore::new();
    let mut buf = [0u8; 8];
    for entry in &manifest.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| {
                GradError::Checkpoint(format!("truncated data section in entry {:?}", entry.name))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = if entry.shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(entry.shape.clone(), data)?
        };
        store.insert(entry.name.clone(), entry.group.clone(), t)?;
    }
    if r.read(&mut buf)? != 0 {
        return Err(GradError::Checkpoint("trailing bytes after data section".into()));
    }
    Ok((store, manifest.meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterStore, serde_json::Value), GradError> {
    read_checkpoint(File::open(path)?)
}

/// Replaces the values of `target` with those of a checkpoint whose manifest
/// matches `target` entry by entry (name, group and shape).
pub fn load_into(path: impl AsRef<Path>, target: &mut ParameterStore) -> Result<serde_json::Value, GradError> {
    let (loaded, meta) = load_checkpoint(path)?;
    ensure_compatible(target, &loaded)?;
    target.copy_values_from(&loaded)?;
    Ok(meta)
}

/// Checks that two stores share names, groups and shapes, in order.
pub fn ensure_compatible(expected: &ParameterStore, found: &ParameterStore) -> Result<(), GradError> {
    let mut found_iter = found.iter();
    for (name, group, t) in expected.iter() {
        let Some((fname, fgroup, ft)) = found_iter.next() else {
            return Err(GradError::Checkpoint(format!("missing entry {name:?}")));
        };
        if fname != name || fgroup != group {
            return Err(GradError::Checkpoint(format!(
                "entry mismatch: expected {name:?} in {group:?}, found {fname:?} in {fgroup:?}"
            )));
        }
        if ft.shape() != t.shape() {
            return Err(GradError::Checkpoint(format!(
                "shape mismatch in entry {name:?}: expected {:?}, found {:?}",
                t.shape(),
                ft.shape()
            )));
        }
    }
    if let Some((extra, _, _)) = found_iter.next() {
        return Err(GradError::Checkpoint(format!("unexpected entry {extra:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("enc/0/w", "NN_M^q", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-300]))
            .unwrap();
        s.insert("enc/0/b", "NN_M^q", Tensor::vector(vec![0.25, f64::MIN_POSITIVE, 7.0]))
            .unwrap();
        s.insert("dec/0/b", "NN_Y^p", Tensor::vector(vec![9.0])).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, &serde_json::json!({"k": 1})).unwrap();
        assert!(buf.starts_with(b"CAMA-CKPT v1\n"));
        let (back, meta) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back.checksums(), s.checksums());
        assert_eq!(back.groups(), s.groups());
    }

    #[test]
    fn truncated_data_is_an_error() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample(), &serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_version_is_an_error() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample(), &serde_json::Value::Null).unwrap();
        buf[11] = b'2';
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_entry() {
        let s = sample();
        let mut other = ParameterStore::new();
        other
            .insert("enc/0/w", "NN_M^q", Tensor::matrix(3, 3, vec![0.0; 9]))
            .unwrap();
        let err = ensure_compatible(&other, &s).unwrap_err().to_string();
        assert!(err.contains("enc/0/w"), "{err}");
    }
}
