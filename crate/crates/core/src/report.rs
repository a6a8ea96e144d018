//! CSV helpers and the sectioned diagnostics report.

use std::io::Write;

use crate::error::Result;

/// Formats like C's `%.17g`: 17 significant digits, trailing zeros dropped,
/// exponent form when the decimal exponent is below -4 or at least 17.
pub fn fmt_g17(x: f64) -> String {
    const P: i32 = 17;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One named CSV block of a diagnostics file.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Section {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<I, S>(&mut self, cells: I) -> &mut Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let row: Vec<String> = cells.into_iter().map(Into::into).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
        self
    }
}

/// Conservation defects, sign census, mirror residuals and rate-bound checks,
/// each as a `# name` line followed by a CSV table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsReport {
    pub sections: Vec<Section>,
}

impl DiagnosticsReport {
    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, s) in self.sections.iter().enumerate() {
            if k > 0 {
                writeln!(w)?;
            }
            writeln!(w, "# {}", s.name)?;
            writeln!(w, "{}", s.header.join(","))?;
            for row in &s.rows {
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}
