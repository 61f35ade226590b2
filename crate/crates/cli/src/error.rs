use ppf_core::PpfError;
use ppf_nn::NnError;

/// Process exit statuses.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const CONFIG: i32 = 4;
    pub const NUMERIC: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Core(PpfError),
}

fn nn_code(e: &NnError) -> i32 {
    match e {
        NnError::Io(_) => exit::IO,
        NnError::Numeric(_) | NnError::State(_) => exit::NUMERIC,
        NnError::Shape { .. } | NnError::Config(_) | NnError::Format(_) => exit::CONFIG,
    }
}

fn core_code(e: &PpfError) -> i32 {
    match e {
        PpfError::Nn(n) => nn_code(n),
        PpfError::Io(_) => exit::IO,
        PpfError::Input(_) => exit::USAGE,
        PpfError::Config(_) | PpfError::Parse { .. } | PpfError::Format(_) => exit::CONFIG,
        PpfError::Numeric(_) | PpfError::Metric(_) | PpfError::Domain(_) | PpfError::Training(_) => exit::NUMERIC,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Io(_) => exit::IO,
            CliError::Core(e) => core_code(e),
        }
    }
}

/// Exit status for an error chain: the first recognised cause decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<PpfError>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<NnError>() {
            return nn_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    1
}
