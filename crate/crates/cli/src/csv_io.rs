//! CSV datasets.
//!
//! A header row must name `study`, `arm` and `outcome`; every other column is
//! a covariate, kept in file order. Study 0 rows are target-population units
//! and leave `arm` and `outcome` empty. Arms are `1` (treated) or `0`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use tate_core::{validate_dataset, Arm, Dataset, Error as CoreError, Observation};

use crate::error::{CliError, Result};

/// A validated dataset together with its covariate column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dataset: Dataset,
    pub covariates: Vec<String>,
}

pub fn load_csv(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file)
}

fn parse_err(line: u64, column: &str, message: String) -> CliError {
    CliError::Parse { line, column: column.to_string(), message }
}

pub fn read_csv<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(si), Some(ai), Some(oi)) = (find("study"), find("arm"), find("outcome")) else {
        return Err(parse_err(1, "header", "header row must name `study`, `arm` and `outcome` columns".into()));
    };
    let cov_idx: Vec<usize> = (0..headers.len()).filter(|i| ![si, ai, oi].contains(i)).collect();
    let covariates: Vec<String> = cov_idx.iter().map(|&i| headers[i].to_string()).collect();
    for (k, name) in covariates.iter().enumerate() {
        if name.is_empty() || covariates[..k].contains(name) {
            return Err(parse_err(1, name, "covariate names must be non-empty and distinct".into()));
        }
    }

    let mut obs = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let study = cell(si)
            .parse::<usize>()
            .map_err(|_| parse_err(line, "study", format!("`{}` is not a study id", cell(si))))?;
        let arm = match cell(ai) {
            "" => None,
            "1" => Some(Arm::Treat),
            "0" => Some(Arm::Control),
            other => return Err(parse_err(line, "arm", format!("`{other}` is not 0, 1 or empty"))),
        };
        let real = |i: usize, column: &str| {
            cell(i).parse::<f64>().map_err(|_| parse_err(line, column, format!("`{}` is not a number", cell(i))))
        };
        let outcome = if cell(oi).is_empty() { None } else { Some(real(oi, "outcome")?) };
        let x = cov_idx.iter().zip(&covariates).map(|(&i, name)| real(i, name)).collect::<Result<Vec<_>>>()?;
        obs.push(Observation { study, arm, outcome, covariates: x });
        lines.push(line);
    }
    let m = obs.iter().map(|o| o.study).max().ok_or(CoreError::EmptyInput)?;
    let dataset = validate_dataset(obs, m).map_err(|e| with_line(e, &lines))?;
    Ok(Table { dataset, covariates })
}

/// Replaces a validation error's record index by its line in the file.
fn with_line(e: CoreError, lines: &[u64]) -> CliError {
    let row = match &e {
        CoreError::StudyOutOfRange { row, .. }
        | CoreError::MissingArm { row }
        | CoreError::TargetHasOutcome { row }
        | CoreError::DimensionMismatch { row, .. }
        | CoreError::NonFinite { row, .. } => Some(*row),
        _ => None,
    };
    match row.and_then(|r| lines.get(r)) {
        Some(&line) => CliError::Row { line, source: e },
        None => CliError::Core(e),
    }
}

/// Writes the canonical form: columns `study, arm, outcome, covariates...`,
/// numbers in shortest round-trip notation.
pub fn write_csv<W: Write>(writer: W, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["study", "arm", "outcome"];
    header.extend(table.covariates.iter().map(String::as_str));
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for u in table.dataset.units() {
        rec.clear();
        rec.push(u.study.to_string());
        rec.push(match u.arm {
            Some(Arm::Treat) => "1".into(),
            Some(Arm::Control) => "0".into(),
            None => String::new(),
        });
        rec.push(u.outcome.map(|y| y.to_string()).unwrap_or_default());
        rec.extend(u.covariates.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io("<csv output>", e))?;
    Ok(())
}

pub fn save_csv(path: &Path, table: &Table) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<Table> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn minimal_file() {
        let t = read("study,arm,outcome,x1\n0,,,0.5\n1,1,2.0,0.1\n1,0,1.0,-0.2\n0,,,1.5\n").unwrap();
        assert_eq!((t.dataset.m(), t.dataset.n(), t.dataset.p()), (1, 4, 1));
        assert_eq!(t.covariates, ["x1"]);
    }

    #[test]
    fn columns_in_any_order() {
        let t = read("age,outcome,study,arm\n40,,0,\n41,3.5,1,1\n39,2.5,1,0\n").unwrap();
        assert_eq!(t.covariates, ["age"]);
        assert_eq!(t.dataset.outcome_of(1), Some(3.5));
        assert_eq!(t.dataset.covariates_of(2), &[39.0]);
    }

    #[test]
    fn target_with_outcome_names_its_line() {
        let err = read("study,arm,outcome,x1\n1,1,2,0\n1,0,1,0\n0,,4.0,1\n").unwrap_err();
        match err {
            CliError::Row { line, source: CoreError::TargetHasOutcome { .. } } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_cell_names_column() {
        let err = read("study,arm,outcome,age\n0,,,old\n").unwrap_err();
        match err {
            CliError::Parse { line, column, .. } => assert_eq!((line, column.as_str()), (2, "age")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read("study,arm,outcome\n1,2,3\n"), Err(CliError::Parse { .. })));
    }

    #[test]
    fn missing_header_columns() {
        assert!(matches!(read("0,,,1\n1,1,2,0\n"), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn study_without_an_arm() {
        let err = read("study,arm,outcome,x\n0,,,1\n1,1,2,0\n1,0,1,0\n2,1,1,0\n").unwrap_err();
        assert!(matches!(err, CliError::Core(CoreError::EmptyArm { study: 2, .. })));
    }

    #[test]
    fn canonical_rewrite() {
        let text = "outcome, study ,arm,z\n,0,,1e-1\n2,1,1,0.30\n1,1,0,-0\n";
        let t = read(text).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &t).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "study,arm,outcome,z\n0,,,0.1\n1,1,2,0.3\n1,0,1,-0\n");
    }
}
