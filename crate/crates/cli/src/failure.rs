use std::process::ExitCode;

/// Marks an error as caused by bad input (flags, config, files) rather than
/// by the computation itself.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
pub struct Usage(pub anyhow::Error);

pub trait OrUsage<T> {
    fn or_usage(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrUsage<T> for Result<T, E> {
    fn or_usage(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(Usage(e.into())))
    }
}

pub fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(Usage(anyhow::anyhow!("{msg}")))
}

/// 0 success, 1 domain failure, 2 usage or validation error.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    if err.chain().any(|e| e.is::<Usage>()) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
