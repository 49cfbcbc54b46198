use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::geometry::{Point, PointCloud};

/// Renders one point per line with 17 significant digits, which is enough
/// to round-trip every f64 exactly.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    out
}

pub fn parse_xyz(text: &str) -> Result<PointCloud, DataError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut p: Point = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = f.parse().map_err(|_| DataError::Parse {
                line: i + 1,
                message: format!("invalid number {f:?}"),
            })?;
            if !p[a].is_finite() {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("non-finite coordinate {f:?}"),
                });
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    Ok(PointCloud::new(points)?)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_xyz(&text).map_err(|e| match e {
        DataError::Parse { line, message } => DataError::ParseFile {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    fs::write(path, format_xyz(cloud)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_fields_is_a_parse_error_at_that_line() {
        let err = parse_xyz("0 0 0\n1 2\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_input_is_empty_cloud() {
        let err = parse_xyz("").unwrap_err();
        assert_eq!(err.to_string(), "empty cloud");
    }

    #[test]
    fn bad_number_reported() {
        assert!(matches!(parse_xyz("1 x 3\n"), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 nan\n"), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let cloud = PointCloud::new(vec![[0.1, -2.5e-300, 1.0 / 3.0], [1e300, 0.0, -0.0]]).unwrap();
        write_xyz(&path, &cloud).unwrap();
        assert_eq!(read_xyz(&path).unwrap(), cloud);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert!(matches!(
            read_xyz(&dir.path().join("missing.xyz")),
            Err(DataError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(
            pts in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..50)
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            prop_assert_eq!(parse_xyz(&format_xyz(&cloud)).unwrap(), cloud);
        }
    }
}
