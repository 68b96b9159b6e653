//! Error classes and their exit codes. Every failure is reported on stderr
//! as one line: `error class=<name> code=<n> msg=<json string>`.

use twinstage_core::datasets::DatasetError;
use twinstage_core::eval_stats::StatsError;
use twinstage_core::model_zoo::{ArchiveError, ModelError};
use twinstage_core::protocols::ProtocolError;
use twinstage_core::schedule::ScheduleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Internal,
    Usage,
    InvalidConfig,
    MissingArchive,
    Data,
    Training,
    Io,
    RunDirExists,
    Archive,
}

impl ErrorClass {
    pub fn code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::InvalidConfig => 3,
            ErrorClass::MissingArchive => 4,
            ErrorClass::Data => 5,
            ErrorClass::Training => 6,
            ErrorClass::Io => 7,
            ErrorClass::RunDirExists => 8,
            ErrorClass::Archive => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Internal => "internal",
            ErrorClass::Usage => "usage",
            ErrorClass::InvalidConfig => "invalid_config",
            ErrorClass::MissingArchive => "missing_archive",
            ErrorClass::Data => "data",
            ErrorClass::Training => "training",
            ErrorClass::Io => "io",
            ErrorClass::RunDirExists => "run_dir_exists",
            ErrorClass::Archive => "archive",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self { class, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::InvalidConfig, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn archive_class(e: &ArchiveError) -> ErrorClass {
    match e {
        ArchiveError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorClass::MissingArchive,
        ArchiveError::Io { .. } => ErrorClass::Io,
        _ => ErrorClass::Archive,
    }
}

fn model_class(e: &ModelError) -> ErrorClass {
    match e {
        ModelError::Archive(a) => archive_class(a),
        _ => ErrorClass::InvalidConfig,
    }
}

fn dataset_class(e: &DatasetError) -> ErrorClass {
    match e {
        DatasetError::Io { .. } => ErrorClass::Io,
        _ => ErrorClass::Data,
    }
}

fn protocol_class(e: &ProtocolError) -> ErrorClass {
    match e {
        ProtocolError::NoValley(_) | ProtocolError::Diverged { .. } => ErrorClass::Training,
        ProtocolError::Model(m) => model_class(m),
        ProtocolError::Archive(a) => archive_class(a),
        ProtocolError::Schedule(_) => ErrorClass::InvalidConfig,
        ProtocolError::Ssl(_) => ErrorClass::Training,
        ProtocolError::Data(d) => dataset_class(d),
        _ => ErrorClass::Data,
    }
}

/// Class of the outermost recognised error in the chain.
pub fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.class;
        }
        if let Some(e) = cause.downcast_ref::<ProtocolError>() {
            return protocol_class(e);
        }
        if let Some(e) = cause.downcast_ref::<ArchiveError>() {
            return archive_class(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_class(e);
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return dataset_class(e);
        }
        if let Some(e) = cause.downcast_ref::<StatsError>() {
            return match e {
                StatsError::Io { .. } => ErrorClass::Io,
                StatsError::Data(d) => dataset_class(d),
                _ => ErrorClass::Data,
            };
        }
        if cause.downcast_ref::<ScheduleError>().is_some() {
            return ErrorClass::InvalidConfig;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ErrorClass::Io;
        }
    }
    ErrorClass::Internal
}

/// The single stderr line for `err`.
pub fn render(class: ErrorClass, message: &str) -> String {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!(
        "error class={} code={} msg={}",
        class.name(),
        class.code(),
        serde_json::to_string(&flat).expect("strings serialize")
    )
}
