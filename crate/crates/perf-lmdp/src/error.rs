use std::path::Path;

/// Failures split by exit status: configuration problems exit with 1,
/// numerical or output failures during a run exit with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    /// Several configuration problems found in one pass.
    #[error("config errors:\n  {}", .0.join("\n  "))]
    ConfigList(Vec<String>),
    #[error("numerical failure: {0}")]
    Numerical(#[from] perf_lmdp_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigList(_) => 1,
            CliError::Numerical(_) | CliError::Io(_) => 2,
        }
    }

    /// Unreadable input file.
    pub fn missing(path: &Path, e: std::io::Error) -> Self {
        CliError::Config(format!("cannot read {}: {}", path.display(), e))
    }

    /// Output failure during a run.
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {}", path.display(), e))
    }

    /// Reclassifies a core error raised while loading inputs.
    pub fn load(e: perf_lmdp_core::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
