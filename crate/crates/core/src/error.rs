use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing asset: {}", .0.display())]
    MissingAsset(PathBuf),

    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("image {path} has side {found}, expected {expected}", path = .path.display())]
    ImageSide {
        path: PathBuf,
        found: usize,
        expected: usize,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{} is outside the grid", fmt_point(*.0))]
    OutsideGrid((f64, f64)),

    #[error("{} is outside the world bounds", fmt_point(*.0))]
    OutsideWorld((f64, f64)),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_point((x, y): (f64, f64)) -> String {
    format!("({x:.1}, {y:.1})")
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingAsset(_)
                | Error::Malformed { .. }
                | Error::ImageSide { .. }
                | Error::Format(_)
                | Error::OutsideGrid(_)
                | Error::OutsideWorld(_)
                | Error::Io { .. }
                | Error::Csv(_)
        )
    }
}
