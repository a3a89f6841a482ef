//! Run directory layout. Every file starts with the run metadata: `# key=value`
//! lines in CSVs, a `metadata` object in JSON, a header line in JSONL.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ionnet::analysis::write_csv_with_metadata;
use ionnet::config::LoadedConfig;
use ionnet::protocol::EventLog;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metadata of one run, in a fixed order.
pub fn run_metadata(loaded: &LoadedConfig, command: &str) -> Vec<(String, String)> {
    let c = &loaded.config;
    let overrides: Vec<String> = loaded.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    vec![
        ("tool".into(), "ionnet".into()),
        ("tool_version".into(), TOOL_VERSION.into()),
        ("command".into(), command.into()),
        ("config_digest".into(), c.digest()),
        ("scenario".into(), c.scenario.name().into()),
        ("seed".into(), c.seed.to_string()),
        ("engine".into(), format!("{:?}", c.link.engine).to_lowercase()),
        ("channel".into(), format!("{:?}", c.link.channel_mode).to_lowercase()),
        ("coherence_model".into(), c.coherence.model.name().into()),
        ("overrides".into(), overrides.join(";")),
    ]
}

pub struct RunDir {
    root: PathBuf,
    metadata: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(root: &Path, metadata: Vec<(String, String)>) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), metadata })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    fn open(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> Result<(), CliError> {
        let mut f = self.open(name)?;
        write_csv_with_metadata(&mut f, &self.metadata, rows).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        f.flush().map_err(|e| CliError::Runtime(format!("{name}: {e}")))
    }

    /// CSV with extra metadata lines after the run metadata.
    pub fn write_csv_with<S: Serialize>(&self, name: &str, extra: &[(String, String)], rows: &[S]) -> Result<(), CliError> {
        let mut meta = self.metadata.clone();
        meta.extend_from_slice(extra);
        let mut f = self.open(name)?;
        write_csv_with_metadata(&mut f, &meta, rows).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
        f.flush().map_err(|e| CliError::Runtime(format!("{name}: {e}")))
    }

    fn metadata_json(&self) -> Value {
        Value::Object(self.metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect::<Map<_, _>>())
    }

    /// `summary.json`: the metadata object followed by the fields of `body`.
    pub fn write_summary(&self, body: Value) -> Result<Value, CliError> {
        let mut obj = Map::new();
        obj.insert("metadata".into(), self.metadata_json());
        if let Value::Object(m) = body {
            obj.extend(m);
        }
        let v = Value::Object(obj);
        let mut f = self.open("summary.json")?;
        serde_json::to_writer_pretty(&mut f, &v).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(f).and_then(|_| f.flush()).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(v)
    }

    /// `events.jsonl`: per log a header line `{"header": {...}}`, then one event per line.
    pub fn write_events(&self, logs: &[EventLog]) -> Result<(), CliError> {
        let mut f = self.open("events.jsonl")?;
        let io = |e: std::io::Error| CliError::Runtime(format!("events.jsonl: {e}"));
        for (job, log) in logs.iter().enumerate() {
            let mut header = self.metadata_json();
            header.as_object_mut().expect("object").insert("job".into(), json!(job));
            serde_json::to_writer(&mut f, &json!({ "header": header })).map_err(|e| CliError::Runtime(e.to_string()))?;
            f.write_all(b"\n").map_err(io)?;
            log.write_jsonl(&mut f).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}
