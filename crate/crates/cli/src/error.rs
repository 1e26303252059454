use std::path::Path;

use hoi_refine::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_SCENE_FAILURES: i32 = 5;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} scenes failed")]
    SceneFailures { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::SceneFailures { .. } => EXIT_SCENE_FAILURES,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument { .. } => EXIT_CONFIG,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::WeightsFormat(_)
        | Error::ArchitectureMismatch { .. }
        | Error::UnknownTemplate(_)
        | Error::SceneGeneration { .. } => EXIT_DATA,
        Error::NonFinite { .. }
        | Error::NonFiniteLatent { .. }
        | Error::NonFiniteLoss { .. }
        | Error::GradientOverflow { .. }
        | Error::DegenerateRotation(_) => EXIT_NUMERICAL,
        Error::Iteration { source, .. } => core_exit_code(source),
        _ => EXIT_OTHER,
    }
}
