//! FSL-style `bvals` / `bvecs` text files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scheme::GradientScheme;
use crate::tensor::{BValue, UnitDirection};

/// Largest `|‖g‖ − 1|` silently renormalized on read.
const NORM_TOLERANCE: f64 = 1e-3;

/// One line: `n_b0` zeros, then the b-value once per direction.
pub fn format_bvals(s: &GradientScheme) -> String {
    let b = s.b().value();
    let vals: Vec<String> =
        (0..s.n_b0()).map(|_| "0".to_string()).chain(s.directions().iter().map(|_| format!("{b}"))).collect();
    vals.join(" ") + "\n"
}

/// Three lines (x, y, z components), b=0 columns as zeros.
pub fn format_bvecs(s: &GradientScheme) -> String {
    let mut out = String::new();
    for axis in 0..3 {
        let vals: Vec<String> = (0..s.n_b0())
            .map(|_| "0".to_string())
            .chain(s.directions().iter().map(|g| format!("{}", g.to_array()[axis])))
            .collect();
        out += &vals.join(" ");
        out.push('\n');
    }
    out
}

fn numbers(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::GradientTable(format!("{what}: cannot parse {t:?}"))))
        .collect()
}

/// Parses a single-shell table. Columns with b = 0 count as b=0 images;
/// every other column must share one b-value.
pub fn parse_gradient_table(bvals: &str, bvecs: &str) -> Result<GradientScheme> {
    let b = numbers(bvals, "bvals")?;
    let rows: Vec<Vec<f64>> =
        bvecs.lines().filter(|l| !l.trim().is_empty()).map(|l| numbers(l, "bvecs")).collect::<Result<_>>()?;
    if rows.len() != 3 {
        return Err(Error::GradientTable(format!("bvecs needs 3 rows, found {}", rows.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != b.len()) {
        return Err(Error::ColumnCountMismatch { bvals: b.len(), bvecs: r.len() });
    }
    let mut shell: Option<f64> = None;
    let mut n_b0 = 0;
    let mut dirs = Vec::new();
    for (i, &bv) in b.iter().enumerate() {
        let bval = BValue::new(bv)?.value();
        if bval == 0.0 {
            n_b0 += 1;
            continue;
        }
        match shell {
            None => shell = Some(bval),
            Some(s) if s != bval => {
                return Err(Error::GradientTable(format!("multiple shells ({s} and {bval}) are not supported")))
            }
            _ => {}
        }
        let (x, y, z) = (rows[0][i], rows[1][i], rows[2][i]);
        let norm = (x * x + y * y + z * z).sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::NonUnitDirection { x, y, z, norm });
        }
        // already-unit vectors are kept verbatim so round trips are exact
        dirs.push(UnitDirection::new(x, y, z).or_else(|_| UnitDirection::normalize(x, y, z))?);
    }
    let b = shell.ok_or(Error::ZeroB)?;
    GradientScheme::new(BValue::new(b)?, dirs, n_b0)
}

pub fn write_gradient_table(s: &GradientScheme, bvals: &Path, bvecs: &Path) -> Result<()> {
    std::fs::write(bvals, format_bvals(s)).map_err(Error::at(bvals))?;
    std::fs::write(bvecs, format_bvecs(s)).map_err(Error::at(bvecs))
}

pub fn read_gradient_table(bvals: &Path, bvecs: &Path) -> Result<GradientScheme> {
    let a = std::fs::read_to_string(bvals).map_err(Error::at(bvals))?;
    let b = std::fs::read_to_string(bvecs).map_err(Error::at(bvecs))?;
    parse_gradient_table(&a, &b)
}
