use std::fmt;
use std::path::Path;

use hlspower::dataset::DatasetError;

/// Failure class, reported as `error[<category>]` and mapped to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Io,
    Validation,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Io => "io",
            Category::Validation => "validation",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Io => 3,
            Category::Validation => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            category: Category::Validation,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Failure {
            category: Category::Io,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.name(), self.message)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let category = match e {
            DatasetError::Io { .. } => Category::Io,
            _ => Category::Validation,
        };
        Failure {
            category,
            message: e.to_string(),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::validation(e.to_string())
            }
        }
    )*};
}

validation_from!(
    hlspower::dfg::DfgError,
    hlspower::activity::TraceError,
    hlspower::interp::InterpError,
    hlspower::sample::SampleError,
    hlspower::model::ModelError,
    hlspower::train::TrainError,
    hlspower::synth::SynthError,
    hlspower::dse::DseError
);
