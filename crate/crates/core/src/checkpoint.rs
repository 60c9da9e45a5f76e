//! Checkpoint container: a text header of `key=value` lines describing every
//! tensor, followed by the tensors as little-endian `f32` in header order.
//!
//! ```text
//! FUSEDVIEW-CHECKPOINT
//! schema_version=1
//! dtype=f32
//! kind=nerf
//! meta.iteration=1200
//! tensor=param/canonical.trunk.0.weight 63x256
//! end_header
//! <binary payload>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::nn::ParamStore;
use crate::Real;

pub const MAGIC: &str = "FUSEDVIEW-CHECKPOINT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta key `{key}`")))
    }

    pub fn set_json<V: serde::Serialize>(&mut self, key: &str, value: &V) {
        self.set(key, serde_json::to_string(value).expect("value serializes"));
    }

    pub fn get_json<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        serde_json::from_str(self.get(key)?).map_err(|e| bad(format!("meta key `{key}`: {e}")))
    }

    pub fn get_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?
            .parse()
            .map_err(|_| bad(format!("meta key `{key}` does not parse")))
    }

    /// Appends every tensor of `store` under `prefix/`.
    pub fn put_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for t in store.tensors() {
            self.tensors.push((
                format!("{prefix}/{}", t.name),
                t.shape.clone(),
                t.data.iter().map(|v| v.to_f32_lossy()).collect(),
            ));
        }
    }

    /// Fills `template` (matching names and shapes) from tensors under `prefix/`.
    pub fn take_store<T: Real>(&self, prefix: &str, template: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = template.clone();
        for t in out.tensors_mut() {
            let key = format!("{prefix}/{}", t.name);
            let (_, shape, data) = self
                .tensors
                .iter()
                .find(|(n, _, _)| *n == key)
                .ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
            if *shape != t.shape {
                return Err(bad(format!(
                    "tensor `{key}` has shape {shape:?}, expected {:?}",
                    t.shape
                )));
            }
            t.data = data.iter().map(|&v| T::from_f32_exact(v)).collect();
        }
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "schema_version={SCHEMA_VERSION}")?;
        writeln!(w, "dtype=f32")?;
        writeln!(w, "kind={}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta.{k}={}", v.replace('\n', " "))?;
        }
        for (name, shape, _) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor={name} {}", dims.join("x"))?;
        }
        writeln!(w, "end_header")?;
        for (_, _, data) in &self.tensors {
            let mut buf = Vec::with_capacity(data.len() * 4);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
            if n == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end_header" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad header line `{l}`")))?;
            match k {
                "schema_version" => {
                    let ver: u32 = v.parse().map_err(|_| bad("bad schema version"))?;
                    if ver != SCHEMA_VERSION {
                        return Err(bad(format!("unsupported schema version {ver}")));
                    }
                }
                "dtype" if v != "f32" => return Err(bad(format!("unsupported dtype {v}"))),
                "dtype" => {}
                "kind" => ck.kind = v.to_string(),
                "tensor" => {
                    let (name, dims) = v
                        .rsplit_once(' ')
                        .ok_or_else(|| bad(format!("bad tensor line `{v}`")))?;
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dims `{dims}`"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    shapes.push((name.to_string(), shape));
                }
                _ => match k.strip_prefix("meta.") {
                    Some(key) => {
                        ck.meta.insert(key.to_string(), v.to_string());
                    }
                    None => return Err(bad(format!("unknown header key `{k}`"))),
                },
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated payload in `{name}`")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.push((name, shape, data));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err(&tmp))?;
        w.flush().map_err(io_err(&tmp))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = ParamStore::<f32>::new();
        store.add(
            "a.weight",
            &[2, 3],
            vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12, 7.0, -1e30],
        );
        store.add("a.bias", &[3], vec![0.1, 0.2, 0.3]);
        let mut ck = Checkpoint::new("test");
        ck.set("iteration", 42);
        ck.set("config", "{\"depth\": 4}");
        ck.put_store("param", &store);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let restored = back.take_store("param", &store.zeros_like()).unwrap();
        for (a, b) in restored.iter_scalars().zip(store.iter_scalars()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.get_parsed::<u64>("iteration").unwrap(), 42);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Checkpoint::read_from("hello\n".as_bytes()).is_err());
        let mut ck = Checkpoint::new("x");
        ck.tensors.push(("t".into(), vec![4], vec![1.0; 4]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", &[2], vec![1.0, 2.0]);
        let mut ck = Checkpoint::new("x");
        ck.put_store("param", &store);
        let mut other = ParamStore::<f64>::new();
        other.add("w", &[3], vec![0.0; 3]);
        assert!(ck.take_store("param", &other).is_err());
    }
}
