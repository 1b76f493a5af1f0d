//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so save→load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "diffrec-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    body: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

pub fn to_string<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope { format: FORMAT.to_string(), version: VERSION, kind: kind.to_string(), body };
    Ok(serde_json::to_string(&env)?)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text)?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", header.version)));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a '{kind}' checkpoint, found '{}'", header.kind)));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.body)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_string(kind, body)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    from_str(kind, &fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn floats_round_trip_bitwise(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..64)) {
            let a = Array2::from_shape_vec((1, values.len()), values).unwrap();
            let text = to_string("test", &a).unwrap();
            let back: Array2<f64> = from_str("test", &text).unwrap();
            for (x, y) in a.iter().zip(back.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let text = to_string("sigma-vae", &1u32).unwrap();
        assert!(matches!(from_str::<u32>("vq-vae", &text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load::<u32>(Path::new("/nonexistent/ckpt.json"), "x").unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
