use std::fmt;
use std::process::ExitCode;

/// A failed subcommand together with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad input files, flags or plan: exit 2.
    Input(anyhow::Error),
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Input(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Input(e) | Failure::Runtime(e)) = self;
        // Several error types already embed their source in their own
        // message; skip a cause the previous message ends with.
        let mut prev = String::new();
        for (i, cause) in e.chain().enumerate() {
            let msg = cause.to_string();
            if i > 0 && prev.ends_with(&msg) {
                continue;
            }
            if i > 0 {
                f.write_str(": ")?;
            }
            f.write_str(&msg)?;
            prev = msg;
        }
        Ok(())
    }
}

pub trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}
