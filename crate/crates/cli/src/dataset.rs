//! Long-format CSV: `subject,time,replicate,rater,value`, indices 1-based.

use std::io::{Read, Write};
use std::path::Path;

use ccc_fiducial::{Observation, RatingDataset};

use crate::CliError;

pub const HEADER: [&str; 5] = ["subject", "time", "replicate", "rater", "value"];

/// Parse and validate a dataset. Row numbers in messages count the header
/// as line 1.
pub fn parse_dataset<R: Read>(reader: R) -> Result<RatingDataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::parse(format!("header: {e}")))?
        .clone();
    if header.iter().ne(HEADER) {
        return Err(CliError::parse(format!(
            "line 1: expected header `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut obs = Vec::new();
    for rec in rdr.deserialize::<Observation>() {
        let o = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::parse(format!("line {line}: {e}"))
        })?;
        if !o.value.is_finite() {
            return Err(CliError::parse(format!(
                "non-finite value for subject {}, time {}, replicate {}, rater {}",
                o.subject, o.time, o.replicate, o.rater
            )));
        }
        obs.push(o);
    }
    Ok(RatingDataset::from_observations(&obs)?)
}

pub fn read_dataset(path: &Path) -> Result<RatingDataset, CliError> {
    let f =
        std::fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    parse_dataset(std::io::BufReader::new(f))
}

pub fn write_dataset<W: Write>(data: &RatingDataset, writer: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    for o in data.observations() {
        w.serialize(o).map_err(|e| CliError::io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccc_fiducial::Family;

    const SMALL: &str = "subject,time,replicate,rater,value
1,1,1,1,0.5
1,1,1,2,0.7
1,2,1,1,0.4
1,2,1,2,0.6
2,1,1,1,1.5
2,1,1,2,1.2
2,2,1,1,1.1
2,2,1,2,1.3
";

    #[test]
    fn small_file_dims() {
        let d = parse_dataset(SMALL.as_bytes()).unwrap();
        let dims = d.dims();
        assert_eq!(
            (dims.subjects, dims.times, dims.replicates, dims.raters),
            (2, 2, 1, 2)
        );
        assert_eq!(d.value(1, 0, 0, 1), 1.2);
    }

    #[test]
    fn duplicate_cell_is_unbalanced() {
        let text = SMALL.replace("2,2,1,2,1.3", "2,2,1,1,1.3");
        let e = parse_dataset(text.as_bytes()).unwrap_err();
        assert_eq!(e.kind(), "unbalanced_design");
        assert!(
            e.to_string()
                .contains("subject=2, time=2, replicate=1, rater=1"),
            "{e}"
        );
    }

    #[test]
    fn bad_rows_name_their_line() {
        let text = SMALL.replace("1,2,1,1,0.4", "1,2,x,1,0.4");
        let e = parse_dataset(text.as_bytes()).unwrap_err();
        assert_eq!(e.kind(), "parse_error");
        assert!(e.to_string().contains("line 4"), "{e}");
        let e = parse_dataset("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn fractional_poisson_values_are_domain_errors() {
        let text = SMALL.replace("0.5", "2.5");
        let d = parse_dataset(text.as_bytes()).unwrap();
        let e = d.validate_family(Family::Poisson).unwrap_err();
        assert_eq!(e.kind(), "domain_error");
    }

    #[test]
    fn round_trip() {
        let d = parse_dataset(SMALL.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(parse_dataset(buf.as_slice()).unwrap(), d);
    }
}
