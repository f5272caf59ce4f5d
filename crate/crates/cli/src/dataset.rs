//! Plain-text dataset files.
//!
//! Line 1 is `n d C`; each following line is `label v1 .. vd`. Lines starting
//! with `#` and blank lines are skipped. Values are written in the shortest
//! form that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use dualtune_core::data::LabeledDataset;
use dualtune_core::Tensor;

use crate::error::{CliError, Result};
use crate::output::write_atomic;

pub fn to_text(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {} {}", ds.len(), ds.input_dim(), ds.class_count());
    for (i, &label) in ds.labels().iter().enumerate() {
        let _ = write!(out, "{label}");
        for v in ds.features().row(i) {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str, path: &Path) -> Result<LabeledDataset> {
    let err = |line: usize, msg: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing `n d C` header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [n, d, c] = fields.as_slice() else {
        return Err(err(
            hline,
            format!("header needs three integers, found {:?}", header),
        ));
    };
    let parse_count = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| err(hline, format!("{what} {s:?} is not a non-negative integer")))
    };
    let (n, d, c) = (
        parse_count(n, "sample count")?,
        parse_count(d, "input dim")?,
        parse_count(c, "class count")?,
    );

    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for (lineno, line) in lines {
        if labels.len() == n {
            return Err(err(
                lineno,
                format!("more than the {n} rows declared in the header"),
            ));
        }
        let mut parts = line.split_whitespace();
        let label = parts.next().expect("line is non-empty");
        let label: usize = label.parse().map_err(|_| {
            err(
                lineno,
                format!("label {label:?} is not a non-negative integer"),
            )
        })?;
        if label >= c {
            return Err(err(
                lineno,
                format!("label {label} out of range for {c} classes"),
            ));
        }
        let before = values.len();
        for tok in parts {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(lineno, format!("value {tok:?} is not a number")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("value {tok:?} is not finite")));
            }
            values.push(v);
        }
        if values.len() - before != d {
            return Err(err(
                lineno,
                format!("expected {d} values, found {}", values.len() - before),
            ));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(err(
            hline,
            format!("header declares {n} rows, file has {}", labels.len()),
        ));
    }
    let features = Tensor::matrix(n, d, values)?;
    Ok(LabeledDataset::new(features, labels, c)?)
}

pub fn load(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    from_text(&text, path)
}

pub fn save(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_text(ds).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualtune_core::data::{generate_synthetic, SyntheticSpec};

    fn parse(text: &str) -> Result<LabeledDataset> {
        from_text(text, Path::new("t.txt"))
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = SyntheticSpec {
            class_count: 3,
            samples_per_class: 4,
            input_dim: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let back = parse(&to_text(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn header_comments_and_extremes() {
        let text = "# comment\n\n3 2 3\n0 1e-300 -0.0\n# mid\n2 0.1 1.7976931348623157e308\n1 -5 5";
        let ds = parse(text).unwrap();
        assert_eq!(ds.labels(), &[0, 2, 1]);
        assert_eq!(ds.features().row(0), &[1e-300, -0.0]);
        assert_eq!(ds.features().get(1, 1), f64::MAX);
        assert_eq!(parse(&to_text(&ds)).unwrap(), ds);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("", 1),
            ("2 2", 1),
            ("1 2 2\n0 1.0", 2),
            ("1 2 2\n5 1.0 2.0", 2),
            ("1 2 2\n0 1.0 x", 2),
            ("1 2 2\n0 1.0 NaN", 2),
            ("2 1 2\n0 1.0", 1),
            ("1 1 2\n0 1.0\n1 2.0", 3),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(CliError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }
}
