//! Versioned JSON checkpoints for models and generators.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload: value,
    };
    let text = serde_json::to_string(&env)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            env.format_version
        )));
    }
    if env.kind != kind {
        return Err(Error::Config(format!(
            "{}: checkpoint holds a {} but a {kind} was requested",
            path.display(),
            env.kind
        )));
    }
    Ok(serde_json::from_value(env.payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::generator::{GeneratorArch, ShadowGenerator};
    use crate::models::task::{TaskArch, TaskModel};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = TaskModel::new(TaskArch::new(1, 16, 2), 4).unwrap();
        let p = dir.path().join("m.json");
        save(&p, "task_model", &m).unwrap();
        let back: TaskModel = load(&p, "task_model").unwrap();
        assert_eq!(m, back);

        let g = ShadowGenerator::new(GeneratorArch::new(1, 16), 2).unwrap();
        let p = dir.path().join("sub/g.json");
        save(&p, "generator", &g).unwrap();
        assert_eq!(g, load::<ShadowGenerator>(&p, "generator").unwrap());
        assert!(load::<TaskModel>(&p, "task_model").is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, r#"{"format_version":99,"kind":"task_model","payload":{}}"#).unwrap();
        let err = load::<TaskModel>(&p, "task_model").unwrap_err();
        assert!(err.to_string().contains("99"));
    }
}
