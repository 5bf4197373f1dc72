//! Checkpoint container: plain-text metadata header + raw parameter blob.
//!
//! Layout (all text lines are `\n`-terminated UTF-8):
//!
//! ```text
//! contact-fields checkpoint v1
//! kind=<model kind>
//! code_version=<crate version>
//! seed=<u64>
//! meta.<key>=<value>        (repeated; model dimensions etc.)
//! tensors=<count>
//! tensor.<i>=<name>:<rows>:<cols>
//! blob_bytes=<len>
//! ---
//! <len bytes of little-endian f64 parameter data, store order>
//! ```
//!
//! The blob is an exact dump of the parameter store, so save → load
//! round-trips are bit-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::{Error, Result};

const MAGIC: &str = "contact-fields checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub code_version: String,
    pub seed: u64,
    pub meta: Vec<(String, String)>,
    pub tensor_shapes: Vec<(String, usize, usize)>,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint missing meta key '{key}'")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Format(format!("meta key '{key}' is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Format(format!("meta key '{key}' is not a number")))
    }
}

pub fn save(
    path: &Path,
    kind: &str,
    seed: u64,
    meta: &[(String, String)],
    store: &ParamStore,
) -> Result<()> {
    let blob = store.to_blob();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("kind={kind}\n"));
    header.push_str(&format!("code_version={}\n", env!("CARGO_PKG_VERSION")));
    header.push_str(&format!("seed={seed}\n"));
    for (k, v) in meta {
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    let shapes = store.shapes();
    header.push_str(&format!("tensors={}\n", shapes.len()));
    for (i, (name, rows, cols)) in shapes.iter().enumerate() {
        header.push_str(&format!("tensor.{i}={name}:{rows}:{cols}\n"));
    }
    header.push_str(&format!("blob_bytes={}\n---\n", blob.len()));

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let sep = b"\n---\n";
    let split = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::Format("checkpoint header terminator missing".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let blob = bytes[split + sep.len()..].to_vec();

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format("not a contact-fields checkpoint".into()));
    }
    let mut kind = String::new();
    let mut code_version = String::new();
    let mut seed = 0u64;
    let mut meta = Vec::new();
    let mut tensor_shapes = Vec::new();
    let mut blob_bytes = None;
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line '{line}'")))?;
        match key {
            "kind" => kind = value.to_string(),
            "code_version" => code_version = value.to_string(),
            "seed" => {
                seed = value
                    .parse()
                    .map_err(|_| Error::Format("bad seed in checkpoint".into()))?
            }
            "tensors" => {}
            "blob_bytes" => {
                blob_bytes = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::Format("bad blob_bytes".into()))?,
                );
            }
            _ if key.starts_with("meta.") => {
                meta.push((key["meta.".len()..].to_string(), value.to_string()));
            }
            _ if key.starts_with("tensor.") => {
                let mut parts = value.rsplitn(3, ':');
                let cols: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format("bad tensor shape".into()))?;
                let rows: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format("bad tensor shape".into()))?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Format("bad tensor line".into()))?;
                tensor_shapes.push((name.to_string(), rows, cols));
            }
            _ => return Err(Error::Format(format!("unknown header key '{key}'"))),
        }
    }
    if let Some(expect) = blob_bytes {
        if blob.len() != expect {
            return Err(Error::Format(format!(
                "checkpoint blob is {} bytes, header says {expect}",
                blob.len()
            )));
        }
    }
    Ok(Checkpoint {
        kind,
        code_version,
        seed,
        meta,
        tensor_shapes,
        blob,
    })
}

/// Guards against loading a checkpoint of the wrong model kind.
pub fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint kind '{}' where '{kind}' was expected",
            ckpt.kind
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::init_xavier;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn save_load_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = stream_rng(5, Stream::WeightInit);
        let mut store = ParamStore::new();
        store.add("w1", init_xavier(&mut rng, 3, 4));
        store.add("b1", init_xavier(&mut rng, 1, 4));
        let meta = vec![("width".to_string(), "4".to_string())];
        save(&path, "test-model", 99, &meta, &store).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.kind, "test-model");
        assert_eq!(ckpt.seed, 99);
        assert_eq!(ckpt.meta_usize("width").unwrap(), 4);
        assert_eq!(ckpt.tensor_shapes.len(), 2);
        assert_eq!(ckpt.blob, store.to_blob());

        // loading into a fresh store reproduces values exactly
        let mut fresh = ParamStore::new();
        fresh.add("w1", ndarray::Array2::zeros((3, 4)));
        fresh.add("b1", ndarray::Array2::zeros((1, 4)));
        fresh.load_blob(&ckpt.blob).unwrap();
        assert_eq!(fresh.to_blob(), store.to_blob());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = ParamStore::new();
        save(&path, "a", 0, &[], &store).unwrap();
        let ckpt = load(&path).unwrap();
        assert!(expect_kind(&ckpt, "b").is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load(&path).is_err());
    }
}
