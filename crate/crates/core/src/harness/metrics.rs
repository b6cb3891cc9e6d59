//! Per-response metrics rows and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mle,
    Standard,
    Dual,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mle, Method::Standard, Method::Dual];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Standard => "standard",
            Method::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// One evaluation of one agent. Token metrics are `None` on envs without text.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub seed: u64,
    /// Candidate count; 0 for the MLE baseline.
    pub l: usize,
    /// Mean dull similarity (lower is better).
    pub cs: Option<f64>,
    pub se: Option<f64>,
    /// Mean response length in tokens.
    pub rl: Option<f64>,
    pub aq: Option<f64>,
    pub avg_return: f64,
}

pub const METRICS_HEADER: [&str; 8] = ["method", "seed", "L", "CS", "SE", "RL", "AQ", "avg_return"];

/// `%g`-style rendering with 6 significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt_sig6)
}

pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by_key(|r| (r.method, r.seed, r.l));
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no metrics rows to emit".into()));
    }
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Numeric(format!("csv encoding failed: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in &sorted {
        w.write_record([
            r.method.as_str().to_string(),
            r.seed.to_string(),
            r.l.to_string(),
            opt(r.cs),
            opt(r.se),
            opt(r.rl),
            opt(r.aq),
            fmt_sig6(r.avg_return),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii output"))
}

/// Writes rows sorted by (method, seed, L) under the fixed header.
pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let origin = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(&origin, 0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::parse(&origin, 1, e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::parse(&origin, 1, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(&origin, line, e.to_string()))?;
        let num = |k: usize| -> Result<Option<f64>> {
            match &rec[k] {
                "NA" => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::parse(&origin, line, format!("bad number `{v}`"))),
            }
        };
        rows.push(MetricsRow {
            method: Method::parse(&rec[0]).ok_or_else(|| Error::parse(&origin, line, "unknown method"))?,
            seed: rec[1].parse().map_err(|_| Error::parse(&origin, line, "bad seed"))?,
            l: rec[2].parse().map_err(|_| Error::parse(&origin, line, "bad L"))?,
            cs: num(3)?,
            se: num(4)?,
            rl: num(5)?,
            aq: num(6)?,
            avg_return: num(7)?.ok_or_else(|| Error::parse(&origin, line, "avg_return is required"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_matches_printf_g() {
        let cases = [
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (100.0, "100"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_sig6(x), want, "{x}");
        }
    }
}
