use std::fmt;

use precofact::Error;

/// A failure reported as one `category: detail` line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub category: String,
    pub detail: String,
}

pub const EXIT_NOT_FOUND: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_FLAGS: i32 = 5;

impl CliError {
    pub fn flags(detail: impl Into<String>) -> Self {
        Self {
            code: EXIT_FLAGS,
            category: "flag-contract".into(),
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            category: "config".into(),
            detail: detail.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = e.category();
        let code = match category {
            "data-not-found" => EXIT_NOT_FOUND,
            "config" => EXIT_CONFIG,
            "io" | "training" => 1,
            _ => EXIT_DATA,
        };
        Self {
            code,
            category: category.into(),
            detail: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the report on one line
        let detail = self.detail.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "{}: {detail}", self.category)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
