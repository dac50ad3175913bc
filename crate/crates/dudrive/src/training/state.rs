//! Metrics logs, run directories, and the binary container for optimizer and
//! rng state (what makes a run resumable from its last checkpoint).

use crate::error::{Error, Result};
use crate::num::Scalar;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// One metrics row. Loss columns are absent for runs that do not compute
/// them (a predictor-only run has no adversarial losses); the validation
/// column is filled on the last step of each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_d: Option<f64>,
    pub loss_g_adv: Option<f64>,
    pub loss_task: Option<f64>,
    pub val_mae_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("bad metrics value {s:?}: {e}")))
    }
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,epoch,loss_d,loss_g_adv,loss_task,val_mae_deg";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                r.epoch,
                fmt_opt(r.loss_d),
                fmt_opt(r.loss_g_adv),
                fmt_opt(r.loss_task),
                fmt_opt(r.val_mae_deg)
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != Self::HEADER {
                    return Err(Error::Config(format!("unexpected metrics header {line:?}")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("bad metrics row: {line:?}")));
            }
            rows.push(MetricsRow {
                step: f[0].parse().map_err(|e| Error::Config(format!("bad step: {e}")))?,
                epoch: f[1].parse().map_err(|e| Error::Config(format!("bad epoch: {e}")))?,
                loss_d: parse_opt(f[2])?,
                loss_g_adv: parse_opt(f[3])?,
                loss_task: parse_opt(f[4])?,
                val_mae_deg: parse_opt(f[5])?,
            });
        }
        Ok(MetricsLog { rows })
    }

    /// Validation MAE of the best epoch so far.
    pub fn best_val(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.val_mae_deg).fold(None, |best, v| match best {
            None => Some(v),
            Some(b) => Some(b.min(v)),
        })
    }

    pub fn last_val(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_mae_deg)
    }
}

// --- binary state container ------------------------------------------------

const STATE_MAGIC: &[u8; 8] = b"DUSTAT01";

#[derive(serde::Serialize, serde::Deserialize)]
struct StateHeader {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    dtype: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

/// Named scalar arrays plus a free-form JSON meta blob, in one file.
pub struct StateBlob<S> {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> StateBlob<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        StateBlob { meta, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, data: Vec<S>) {
        self.arrays.insert(name.to_string(), data);
    }

    pub fn take(&mut self, name: &str) -> Result<Vec<S>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("state array {name} missing")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let header = StateHeader {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, data)| ArrayEntry { name: name.clone(), len: data.len() })
                .collect(),
            dtype: S::DTYPE.to_string(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("state encode: {e}")))?;
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        file.write_all(STATE_MAGIC).map_err(io)?;
        file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        file.write_all(&json).map_err(io)?;
        for data in self.arrays.values() {
            let mut blob = Vec::with_capacity(data.len() * S::byte_width());
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes_vec());
            }
            file.write_all(&blob).map_err(io)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() < 16 || &raw[..8] != STATE_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a state file", path.display())));
        }
        let json_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
        let header: StateHeader = serde_json::from_slice(&raw[16..16 + json_len])
            .map_err(|e| Error::Checkpoint(format!("state decode: {e}")))?;
        if header.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: state dtype {} does not match {}",
                path.display(),
                header.dtype,
                S::DTYPE
            )));
        }
        let width = S::byte_width();
        let mut offset = 16 + json_len;
        let mut arrays = BTreeMap::new();
        for entry in &header.arrays {
            let bytes = entry.len * width;
            if raw.len() < offset + bytes {
                return Err(Error::Checkpoint(format!("{}: truncated state", path.display())));
            }
            let data: Vec<S> = raw[offset..offset + bytes]
                .chunks_exact(width)
                .map(|c| S::from_le_slice(c))
                .collect();
            arrays.insert(entry.name.clone(), data);
            offset += bytes;
        }
        Ok(StateBlob { meta: header.meta, arrays })
    }
}

/// Writer for a run directory: metrics, per-epoch checkpoints, resumable
/// state, reports.
#[derive(Debug, Clone)]
pub struct RunSink {
    pub dir: PathBuf,
}

impl RunSink {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunSink { dir })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("checkpoints").join("state.ckpt")
    }

    pub fn epoch_dir(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
    }

    pub fn best_dir(&self) -> PathBuf {
        self.dir.join("checkpoints").join("best")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let log = MetricsLog {
            rows: vec![
                MetricsRow {
                    step: 1,
                    epoch: 0,
                    loss_d: Some(0.25),
                    loss_g_adv: Some(0.5),
                    loss_task: Some(0.001),
                    val_mae_deg: None,
                },
                MetricsRow {
                    step: 2,
                    epoch: 0,
                    loss_d: None,
                    loss_g_adv: None,
                    loss_task: Some(0.002),
                    val_mae_deg: Some(12.5),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        log.write(&path).unwrap();
        let back = MetricsLog::read(&path).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.best_val(), Some(12.5));
    }

    #[test]
    fn state_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut blob = StateBlob::<f32>::new(serde_json::json!({"step": 7, "tag": "x"}));
        blob.insert("m", vec![1.0, 2.5, -3.0]);
        blob.insert("v", vec![0.0; 5]);
        blob.write(&path).unwrap();
        let mut back = StateBlob::<f32>::read(&path).unwrap();
        assert_eq!(back.meta["step"], 7);
        assert_eq!(back.take("m").unwrap(), vec![1.0, 2.5, -3.0]);
        assert_eq!(back.take("v").unwrap(), vec![0.0; 5]);
        assert!(back.take("missing").is_err());
        assert!(StateBlob::<f64>::read(&path).is_err());
    }
}
