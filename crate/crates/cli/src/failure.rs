use std::fmt::{self, Display};

/// Command failure carrying its exit code: usage/configuration problems
/// exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| Failure::Usage(e.to_string()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}
