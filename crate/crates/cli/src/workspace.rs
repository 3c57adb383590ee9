//! On-disk layout of an experiment directory.
//!
//! ```text
//! configs/<hash>.json            resolved configuration
//! checkpoints/score.json         mixture and generators
//! checkpoints/autoencoder.json
//! checkpoints/detectors/<kind>@<generator>.json
//! checkpoints/hardened/<kind>@<generator>.json
//! data/<generator>.json          train/val/test splits
//! results/*.csv                  metrics, first line `# config_hash=<hash>`
//! results/adversarial/<detector>.json
//! results/transfer/<surrogate>__<generator>.json
//! records/<command>.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use reconbench::attacks::AdversarialExample;
use reconbench::autoencoder::AutoEncoder;
use reconbench::checkpoint;
use reconbench::detectors::Detector;
use reconbench::score::GaussianMixture;
use reconbench::world::{Generator, GeneratorData, WorldConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A payload tagged with the hash of the world configuration it was built
/// from, so stale artifacts are caught before they are mixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub world: String,
    pub value: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreCheckpoint {
    pub mixture: GaussianMixture,
    pub generators: Vec<Generator>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub command: String,
    pub config_hash: String,
    /// SHA-256 over the paths and contents of every artifact read.
    pub inputs_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub metrics: serde_json::Value,
    pub artifacts: Vec<String>,
}

pub fn world_hash(world: &WorldConfig) -> String {
    let value = serde_json::to_value(world).expect("world config serializes");
    short_digest(serde_json::to_string(&value).expect("value serializes").as_bytes())
}

fn short_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct Workspace {
    root: PathBuf,
    reads: Mutex<Vec<PathBuf>>,
    writes: Mutex<Vec<PathBuf>>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            reads: Mutex::new(Vec::new()),
            writes: Mutex::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn score_path(&self) -> PathBuf {
        self.path("checkpoints/score.json")
    }

    pub fn ae_path(&self) -> PathBuf {
        self.path("checkpoints/autoencoder.json")
    }

    pub fn data_path(&self, generator: &str) -> PathBuf {
        self.path(format!("data/{generator}.json"))
    }

    pub fn detector_path(&self, id: &str) -> PathBuf {
        self.path(format!("checkpoints/detectors/{id}.json"))
    }

    pub fn hardened_path(&self, id: &str) -> PathBuf {
        self.path(format!("checkpoints/hardened/{id}.json"))
    }

    pub fn adversarial_path(&self, id: &str) -> PathBuf {
        self.path(format!("results/adversarial/{id}.json"))
    }

    pub fn transfer_set_path(&self, surrogate: &str, generator: &str) -> PathBuf {
        self.path(format!("results/transfer/{surrogate}__{generator}.json"))
    }

    pub fn csv_path(&self, name: &str) -> PathBuf {
        self.path(format!("results/{name}.csv"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    pub fn save<T: Serialize>(&self, path: &Path, kind: &str, world: &str, value: &T) -> Result<(), CliError> {
        checkpoint::save(path, kind, &Stamped { world: world.to_string(), value })?;
        self.writes.lock().unwrap().push(path.to_path_buf());
        Ok(())
    }

    /// Loads a stamped artifact. A missing file names `producer`, the command
    /// that writes it; a stamp mismatch asks for a rebuild from `producer`.
    pub fn load<T: DeserializeOwned>(&self, path: &Path, kind: &str, world: &str, producer: &str) -> Result<T, CliError> {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "missing {}; run `reconbench {producer}` first",
                self.rel(path)
            )));
        }
        let stamped: Stamped<T> = checkpoint::load(path, kind)?;
        if stamped.world != world {
            return Err(CliError::Config(format!(
                "{} was built from a different world configuration; rerun `reconbench {producer}`",
                self.rel(path)
            )));
        }
        self.reads.lock().unwrap().push(path.to_path_buf());
        Ok(stamped.value)
    }

    pub fn load_score(&self, world: &str) -> Result<ScoreCheckpoint, CliError> {
        self.load(&self.score_path(), "score", world, "train-score")
    }

    pub fn load_data(&self, world: &str, generator: &str) -> Result<GeneratorData, CliError> {
        self.load(&self.data_path(generator), "dataset", world, "gen-data")
    }

    pub fn load_ae(&self, world: &str) -> Result<AutoEncoder, CliError> {
        self.load(&self.ae_path(), "autoencoder", world, "train-ae")
    }

    pub fn load_detector(&self, world: &str, id: &str) -> Result<Detector, CliError> {
        self.load(&self.detector_path(id), "detector", world, "train-detector")
    }

    pub fn load_adversarial(&self, world: &str, id: &str) -> Result<Vec<AdversarialExample>, CliError> {
        self.load(&self.adversarial_path(id), "adversarial", world, "attack")
    }

    pub fn save_config(&self, json: &str, hash: &str) -> Result<(), CliError> {
        let path = self.path(format!("configs/{hash}.json"));
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, json)?;
        Ok(())
    }

    /// Writes a CSV whose first line is `# config_hash=<hash>`.
    pub fn write_csv<R: Serialize>(&self, name: &str, hash: &str, rows: &[R]) -> Result<PathBuf, CliError> {
        use std::io::Write;
        let path = self.csv_path(name);
        std::fs::create_dir_all(path.parent().unwrap())?;
        let mut file = std::fs::File::create(&path)?;
        writeln!(file, "# config_hash={hash}")?;
        let mut w = csv::Writer::from_writer(file);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.writes.lock().unwrap().push(path.clone());
        Ok(path)
    }

    /// Hash of every artifact read so far, in sorted path order.
    pub fn inputs_hash(&self) -> Result<String, CliError> {
        let mut paths = self.reads.lock().unwrap().clone();
        paths.sort();
        paths.dedup();
        let mut h = Sha256::new();
        for p in &paths {
            h.update(self.rel(p).as_bytes());
            h.update([0]);
            h.update(std::fs::read(p)?);
        }
        Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn write_record(&self, command: &str, hash: &str, started: u64, metrics: serde_json::Value) -> Result<(), CliError> {
        let mut artifacts: Vec<String> = self.writes.lock().unwrap().iter().map(|p| self.rel(p)).collect();
        artifacts.sort();
        artifacts.dedup();
        let record = ExperimentRecord {
            command: command.to_string(),
            config_hash: hash.to_string(),
            inputs_hash: self.inputs_hash()?,
            started_unix: started,
            finished_unix: unix_now(),
            metrics,
            artifacts,
        };
        let path = self.path(format!("records/{command}.json"));
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, serde_json::to_string_pretty(&record).map_err(|e| CliError::Config(e.to_string()))?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_carries_the_hash_header() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        #[derive(Serialize)]
        struct Row {
            a: u32,
            b: f64,
        }
        let p = ws.write_csv("t", "abc", &[Row { a: 1, b: 0.5 }]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "# config_hash=abc\na,b\n1,0.5\n");
    }

    #[test]
    fn missing_artifact_names_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let err = ws.load_score("w").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("train-score")), "{err}");
    }

    #[test]
    fn stale_stamp_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        ws.save(&ws.ae_path(), "autoencoder", "old", &AutoEncoder::identity(4)).unwrap();
        assert!(ws.load_ae("old").is_ok());
        let err = ws.load_ae("new").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("train-ae")), "{err}");
    }

    #[test]
    fn inputs_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        ws.save(&ws.ae_path(), "autoencoder", "w", &AutoEncoder::identity(4)).unwrap();
        let _: AutoEncoder = ws.load_ae("w").unwrap();
        let h1 = ws.inputs_hash().unwrap();
        ws.save(&ws.ae_path(), "autoencoder", "w", &AutoEncoder::identity(5)).unwrap();
        assert_ne!(h1, ws.inputs_hash().unwrap());
    }
}
