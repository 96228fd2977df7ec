use std::path::Path;

use serde_json::{json, Value};

/// Everything that can end a command early.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or input files.
    Config(String),
    /// A library error, classified by [`CliError::exit_code`].
    Core(splitfc::Error),
    /// Filesystem failure on an output path.
    Io(String),
    /// `--verify` found the codec output non-reproducible.
    Verify(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }

    /// 2 for configuration problems, 3 for an infeasible budget, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Core(e) => match root(e) {
                splitfc::Error::Infeasible { .. } => 3,
                splitfc::Error::InvalidArgument(_)
                | splitfc::Error::Shape(_)
                | splitfc::Error::NonFinite { .. }
                | splitfc::Error::Layout(_)
                | splitfc::Error::Dataset(_)
                | splitfc::Error::SearchSpace(_) => 2,
                _ => 1,
            },
            Self::Io(_) | Self::Verify(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, mut body) = match self {
            Self::Config(m) => ("config", json!({ "message": m })),
            Self::Io(m) => ("io", json!({ "message": m })),
            Self::Verify(m) => ("verify", json!({ "message": m })),
            Self::Core(e) => core_json(e),
        };
        body["kind"] = json!(kind);
        body["exit_code"] = json!(self.exit_code());
        json!({ "error": body })
    }
}

fn root(e: &splitfc::Error) -> &splitfc::Error {
    match e {
        splitfc::Error::Training { source, .. } => root(source),
        other => other,
    }
}

fn core_json(e: &splitfc::Error) -> (&'static str, Value) {
    let mut body = json!({ "message": e.to_string() });
    if let splitfc::Error::Training { t, k, .. } = e {
        body["iteration"] = json!(t);
        body["device"] = json!(k);
    }
    let kind = match root(e) {
        splitfc::Error::Infeasible {
            required,
            available,
            shortfall,
        } => {
            body["required_bits"] = json!(required);
            body["available_bits"] = json!(available);
            body["shortfall_bits"] = json!(shortfall);
            "infeasible"
        }
        splitfc::Error::InvalidArgument(_) => "invalid_argument",
        splitfc::Error::Shape(_) => "shape",
        splitfc::Error::NonFinite { .. } => "non_finite",
        splitfc::Error::Layout(_) => "layout",
        splitfc::Error::Dataset(_) => "dataset",
        splitfc::Error::SearchSpace(_) => "search_space",
        splitfc::Error::Truncated { .. } | splitfc::Error::Version(_) | splitfc::Error::Malformed(_) => "payload",
        splitfc::Error::Io(_) => "io",
        splitfc::Error::Training { .. } => "training",
    };
    (kind, body)
}

impl From<splitfc::Error> for CliError {
    fn from(e: splitfc::Error) -> Self {
        Self::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) | Self::Io(m) | Self::Verify(m) => f.write_str(m),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}
