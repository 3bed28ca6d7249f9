use thiserror::Error;

/// CLI failure, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Fit(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 3,
            CliError::Fit(_) => 4,
        }
    }
}

impl From<cpmas::Error> for CliError {
    fn from(e: cpmas::Error) -> Self {
        use cpmas::Error as E;
        let msg = e.to_string();
        match e {
            E::Parse { .. } | E::Data(_) | E::Underdetermined { .. } | E::Io(_) => {
                CliError::Data(msg)
            }
            E::DegenerateJacobian { .. } => CliError::Fit(msg),
            _ => CliError::Config(msg),
        }
    }
}
