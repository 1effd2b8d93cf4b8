use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_PALETTE: &str = include_str!("../../assets/palette.txt");

/// Colours a printer can reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintablePalette {
    colors: Vec<[f64; 3]>,
}

impl PrintablePalette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::Invalid("palette is empty".into()));
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Invalid("palette colours must lie in [0, 1]".into()));
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Parses `r g b` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut colors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| parse_err(format!("{t:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let [r, g, b] = vals[..] else {
                return Err(parse_err(format!(
                    "expected 3 values, found {}",
                    vals.len()
                )));
            };
            colors.push([r, g, b]);
        }
        Self::new(colors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The bundled 30-colour lightness × hue grid.
    pub fn default_palette() -> Self {
        Self::parse(DEFAULT_PALETTE, Path::new("palette.txt")).expect("bundled palette parses")
    }
}

impl Default for PrintablePalette {
    fn default() -> Self {
        Self::default_palette()
    }
}
