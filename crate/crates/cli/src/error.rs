use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Config or input problems found before or while loading; one message each.
    Validation(Vec<String>),
    Core(debias_core::Error),
    /// Results that came out non-finite.
    Numerical(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_VALIDATION,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "cli.invalid_config",
            CliError::Core(e) => e.code(),
            CliError::Numerical(_) => "cli.non_finite_result",
            CliError::Io(_) => "cli.io",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msgs) => write!(f, "{}", msgs.join("; ")),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Numerical(m) => write!(f, "non-finite values in {m}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<debias_core::Error> for CliError {
    fn from(e: debias_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => CliError::Io(io),
                _ => unreachable!(),
            }
        } else {
            CliError::Validation(vec![e.to_string()])
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.into())
        } else {
            CliError::Validation(vec![e.to_string()])
        }
    }
}
