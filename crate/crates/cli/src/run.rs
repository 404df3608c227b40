//! Config resolution and output-directory bookkeeping shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use avcap::data::{read_jsonl, validate_samples, Sample};
use avcap::TaskSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult, WithPath};

pub const RESOLVED: &str = "config.resolved.json";
pub const DONE: &str = "DONE";

/// Defaults, then the JSON config file, then explicit flags.
///
/// `flags` is the serialized argument struct: its `config` entry names the
/// file and `null` entries mean "not given".
pub fn resolve<T: Serialize + DeserializeOwned + Default>(flags: &impl Serialize) -> CliResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(T::default()).expect("defaults serialize") else {
        unreachable!("configs are structs")
    };
    let Value::Object(mut flags) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flags are structs")
    };
    if let Some(Value::String(path)) = flags.remove("config") {
        let path = PathBuf::from(path);
        let text = fs::read_to_string(&path).at(&path)?;
        let file: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: not a JSON object: {e}", path.display())))?;
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(CliError::usage(format!("{}: unknown config key `{k}`", path.display())));
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

pub fn require(path: &Path, flag: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(CliError::usage(format!("missing required --{flag}")));
    }
    Ok(())
}

pub fn to_pretty(value: &impl Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("outputs serialize");
    v.push(b'\n');
    v
}

/// An output directory that records its configuration up front and a
/// `DONE` marker once every artifact is written.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, command: &str, config: &impl Serialize) -> CliResult<Self> {
        require(out, "out")?;
        fs::create_dir_all(out).at(out)?;
        let done = out.join(DONE);
        if done.exists() {
            fs::remove_file(&done).at(&done)?;
        }
        let record = serde_json::json!({ "command": command, "config": config });
        let dir = RunDir { path: out.to_path_buf() };
        dir.write(RESOLVED, &to_pretty(&record))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, bytes).at(&p)
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        self.write(name, &to_pretty(value))
    }

    pub fn finish(self) -> CliResult<()> {
        self.write(DONE, b"ok\n")
    }
}

pub fn load_spec(data: &Path) -> CliResult<TaskSpec> {
    require(data, "data")?;
    let p = data.join("spec.json");
    let text = fs::read_to_string(&p).at(&p)?;
    let spec: TaskSpec = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    spec.validate().at(&p)?;
    Ok(spec)
}

pub fn load_split(data: &Path, spec: &TaskSpec, split: &str) -> CliResult<Vec<Sample>> {
    if !["train", "val", "test"].contains(&split) {
        return Err(CliError::usage(format!("unknown split `{split}` (expected train, val, test)")));
    }
    let p = data.join(format!("{split}.jsonl"));
    let samples = read_jsonl(&p).at(&p)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("{}: no samples", p.display())));
    }
    validate_samples(&samples, spec).at(&p)?;
    Ok(samples)
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}
