//! Self-contained model checkpoints: a plain-text manifest (kind, config
//! echo, vocabulary, parameter tables with byte offsets) followed by a raw
//! little-endian f64 payload. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use lotn_autograd::Tensor;
use thiserror::Error;

const MAGIC: &str = "lotn-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

fn malformed(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed { path: path.display().to_string(), reason: reason.into() }
}

/// Writes via a temp file in the same directory plus rename, so readers
/// never observe a half-written artifact.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Everything needed to rebuild a model: kind tag, ordered metadata,
/// vocabulary tokens, and named parameter tensors (the embedding matrix
/// rides along as a parameter).
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tokens: Vec<String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_param(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.params.iter().position(|(n, _)| n == name)?;
        Some(self.params.remove(idx).1)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            debug_assert!(!k.contains(' ') && !v.contains('\n'));
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for token in &self.tokens {
            manifest.push_str(&format!("token {token}\n"));
        }
        let mut payload: Vec<u8> = Vec::new();
        for (name, tensor) in &self.params {
            let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "param {name} {} {} {}\n",
                shape.join("x"),
                payload.len(),
                tensor.numel()
            ));
            for v in tensor.values().iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        manifest.push_str("payload\n");

        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(&payload);
        write_atomic(path, &bytes).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let header_end = find_payload_start(&bytes)
            .ok_or_else(|| malformed(path, "no payload marker"))?;
        let manifest = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| malformed(path, "manifest is not UTF-8"))?;
        let payload = &bytes[header_end..];

        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(malformed(path, "not a checkpoint file (bad magic)"));
        }
        let mut kind = None;
        let mut meta = Vec::new();
        let mut tokens = Vec::new();
        let mut params = Vec::new();
        for line in lines {
            if line == "payload" {
                break;
            }
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| malformed(path, format!("bad manifest line {line:?}")))?;
            match tag {
                "kind" => kind = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| malformed(path, format!("bad meta line {line:?}")))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                "token" => tokens.push(rest.to_string()),
                "param" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 4 {
                        return Err(malformed(path, format!("bad param line {line:?}")));
                    }
                    let name = fields[0].to_string();
                    let shape: Option<Vec<usize>> =
                        fields[1].split('x').map(|d| d.parse().ok()).collect();
                    let shape = shape.ok_or_else(|| malformed(path, "bad shape"))?;
                    let offset: usize =
                        fields[2].parse().map_err(|_| malformed(path, "bad offset"))?;
                    let numel: usize =
                        fields[3].parse().map_err(|_| malformed(path, "bad length"))?;
                    let end = offset + numel * 8;
                    if end > payload.len() {
                        return Err(malformed(
                            path,
                            format!("param {name} extends past payload ({end} > {})", payload.len()),
                        ));
                    }
                    let values: Vec<f64> = payload[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let tensor = Tensor::from_vec(shape, values)
                        .map_err(|e| malformed(path, format!("param {name}: {e}")))?;
                    params.push((name, tensor));
                }
                other => return Err(malformed(path, format!("unknown manifest tag {other:?}"))),
            }
        }
        Ok(Checkpoint {
            kind: kind.ok_or_else(|| malformed(path, "missing kind"))?,
            meta,
            tokens,
            params,
        })
    }
}

fn find_payload_start(bytes: &[u8]) -> Option<usize> {
    let marker = b"\npayload\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|i| i + marker.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "sentiment".into(),
            meta: vec![("lr".into(), "0.001".into()), ("dev_acc".into(), "0.9125".into())],
            tokens: vec!["<pad>".into(), "<unk>".into(), "good".into()],
            params: vec![
                (
                    "enc.w".into(),
                    Tensor::from_vec(vec![2, 3], vec![1.5e-300, -0.0, 3.25, f64::MIN_POSITIVE, 1.0, -7.5])
                        .unwrap(),
                ),
                ("enc.b".into(), Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = sample();
        original.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.kind, "sentiment");
        assert_eq!(loaded.meta, original.meta);
        assert_eq!(loaded.tokens, original.tokens);
        assert_eq!(loaded.params.len(), 2);
        for ((n1, t1), (n2, t2)) in original.params.iter().zip(&loaded.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let (v1, v2) = (t1.to_vec(), t2.to_vec());
            for (a, b) in v1.iter().zip(&v2) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n1} drifted");
            }
        }
        assert!(!loaded.params[0].1.requires_grad(), "loaded params are frozen");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        sample().save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_non_checkpoints_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, "something else\npayload\n").unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("magic"));

        let good = dir.path().join("good.ckpt");
        sample().save(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("payload"));
    }

    #[test]
    fn meta_and_param_lookup() {
        let ck = sample();
        assert_eq!(ck.meta_value("lr"), Some("0.001"));
        assert_eq!(ck.meta_value("absent"), None);
        assert_eq!(ck.param("enc.b").unwrap().numel(), 3);
    }
}
