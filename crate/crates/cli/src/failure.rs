use std::fmt;
use std::process::ExitCode;

use mmtrust::ErrorKind;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Input(String),
    Runtime(String),
}

impl Failure {
    /// Wraps a library error with `context` (a path or turn id).
    pub fn core(context: impl fmt::Display, e: impl Into<mmtrust::Error>) -> Self {
        let e = e.into();
        let message = format!("{context}: {e}");
        match e.kind() {
            ErrorKind::Input => Failure::Input(message),
            ErrorKind::Runtime => Failure::Runtime(message),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
            Failure::Runtime(_) => 4,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Input(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}
