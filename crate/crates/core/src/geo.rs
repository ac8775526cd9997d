use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Planar world coordinate in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Web-map zoom level. Two levels down quadruples the side a tile covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Zoom(pub u8);

impl Zoom {
    pub const Z18: Zoom = Zoom(18);
    pub const Z16: Zoom = Zoom(16);
    pub const Z14: Zoom = Zoom(14);

    /// Fine to coarse.
    pub const PYRAMID: [Zoom; 3] = [Zoom::Z18, Zoom::Z16, Zoom::Z14];
}

impl fmt::Display for Zoom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Zoom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim().trim_start_matches(['z', 'Z']);
        s.parse::<u8>()
            .map(Zoom)
            .map_err(|_| Error::Invalid(format!("bad zoom level {s:?}")))
    }
}

pub(crate) fn format_zooms(zooms: &[Zoom]) -> String {
    zooms.iter().map(Zoom::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_zooms(s: &str) -> Result<Vec<Zoom>, Error> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}
