//! Versioned JSON container for every persisted model and dataset.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "reconbench-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container<T> {
    pub format: String,
    pub version: u32,
    /// What the payload is, e.g. `"generators"` or `"detector"`.
    pub kind: String,
    pub payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

pub fn to_string<T: Serialize>(kind: &str, payload: &T) -> Result<String> {
    Ok(serde_json::to_string(&Container {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        payload,
    })?)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{kind}: unreadable container ({e})")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("{kind}: unknown format '{}'", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("{kind}: unsupported version {} (expected {VERSION})", header.version)));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a '{kind}' checkpoint, found '{}'", header.kind)));
    }
    let c: Container<T> = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{kind}: malformed payload ({e})")))?;
    Ok(c.payload)
}

/// Writes atomically through a sibling temporary file.
pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, to_string(kind, payload)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{kind}: cannot read {} ({e})", path.display())))?;
    from_str(kind, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};
    use crate::score::{DenoiserNet, GaussianMixture};
    use proptest::prelude::*;

    #[test]
    fn denoiser_round_trips_bit_exactly() {
        let net = DenoiserNet::new(5, &[7, 3], &mut stream(1, 1)).preconditioned(0.31).unwrap();
        let back: DenoiserNet = from_str("denoiser", &to_string("denoiser", &net).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn header_mismatches_are_reported() {
        let m = GaussianMixture::standard(2);
        let text = to_string("mixture", &m).unwrap();
        assert!(matches!(from_str::<GaussianMixture>("detector", &text), Err(Error::Checkpoint(_))));
        let bumped = text.replace("\"version\":1", "\"version\":9");
        assert!(matches!(from_str::<GaussianMixture>("mixture", &bumped), Err(Error::Checkpoint(_))));
        assert!(matches!(from_str::<GaussianMixture>("mixture", &text[..text.len() / 2]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_str::<GaussianMixture>("mixture", "{\"format\":\"x\",\"version\":1,\"kind\":\"mixture\"}"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/m.json");
        let m = GaussianMixture::random(3, 2, 0.5, 0.1, &mut stream(0, 0));
        save(&path, "mixture", &m).unwrap();
        assert_eq!(load::<GaussianMixture>(&path, "mixture").unwrap(), m);
        assert!(matches!(load::<GaussianMixture>(&dir.path().join("missing.json"), "mixture"), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(seed in any::<u64>(), scale in -300i32..300) {
            let v: Vec<f64> = normal_vec(&mut stream(seed, 0), 16).into_iter().map(|x| x * 10f64.powi(scale)).collect();
            let back: Vec<f64> = from_str("v", &to_string("v", &v).unwrap()).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
