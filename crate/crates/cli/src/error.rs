use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing flags; reported with usage text.
    #[error("{0}")]
    Usage(String),
    /// A well-formed request whose settings are invalid.
    #[error("{0}")]
    Validation(String),
    /// The run itself failed.
    #[error(transparent)]
    Runtime(ulip_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ulip_core::Error> for CliError {
    fn from(e: ulip_core::Error) -> Self {
        use ulip_core::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::UnknownSetName(_)
            | E::FractionTooSmall { .. }
            | E::BadArchitecture(_)
            | E::UnknownCategory(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}
