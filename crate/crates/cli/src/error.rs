use std::path::PathBuf;

use dedr_core::error::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {}: run `dedr {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },
    #[error("artifact {} is unusable ({reason}): rerun `dedr {producer}`", path.display())]
    StaleArtifact {
        path: PathBuf,
        reason: String,
        producer: String,
    },
    #[error(transparent)]
    Core(#[from] dedr_core::Error),
}

impl CliError {
    /// 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::StaleArtifact { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Core(dedr_core::Error::Argument("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::Core(dedr_core::Error::Integrity("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(dedr_core::Error::Numeric("nan".into())).exit_code(),
            4
        );
        let missing = CliError::MissingArtifact {
            path: "w/models/distilled_T.ckpt".into(),
            producer: "distill".into(),
        };
        assert_eq!(missing.exit_code(), 3);
        assert!(missing.to_string().contains("dedr distill"));
    }
}
