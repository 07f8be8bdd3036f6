//! Result tables, printed as aligned text or written as CSV.

use std::io::Write;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.headers.len(), "row width differs from the header");
        self.rows.push(row);
    }

    /// Column-aligned text; numbers are right-aligned, everything else left.
    pub fn to_aligned(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.headers[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(s, &w)| {
                    if s.parse::<f64>().is_ok() {
                        format!("{s:>w$}")
                    } else {
                        format!("{s:<w$}")
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &self.headers);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.headers)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> csv::Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.iter().map(String::from).collect();
        let rows = rd
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<csv::Result<_>>()?;
        Ok(Self { headers, rows })
    }
}

/// Fixed-precision cell for a metric; infinity prints as `inf`.
pub fn num(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.4}")
    }
}
