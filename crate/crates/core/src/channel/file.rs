//! Channel-set text format.
//!
//! ```text
//! {"format_version":1,"U":2,"M":4,"N":64,"W_ris":8,"H_ris":8,"sample_count":600,"train_count":500}
//! [[re,im],[re,im],...]      <- H, N*M entries, row-major
//! [[re,im],...]              <- G of sample 0, U*N entries
//! [[re,im],...]              <- D of sample 0, U*M entries
//! ...                        <- G, D for the remaining samples
//! ```
//!
//! One JSON value per line. Doubles are written in shortest round-trip form,
//! so `load(save(ds)) == ds` bit for bit. `train_count` is optional and
//! defaults to `sample_count`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelDataset, Geometry};
use crate::error::{Error, Result};
use crate::numerics::{ComplexMatrix, C64};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    #[serde(rename = "U")]
    users: usize,
    #[serde(rename = "M")]
    bs_antennas: usize,
    #[serde(rename = "N")]
    ris_elements: usize,
    #[serde(rename = "W_ris")]
    ris_width: usize,
    #[serde(rename = "H_ris")]
    ris_height: usize,
    sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_count: Option<usize>,
}

fn matrix_line(m: &ComplexMatrix) -> String {
    let pairs: Vec<[f64; 2]> = m.as_slice().iter().map(|z| [z.re, z.im]).collect();
    serde_json::to_string(&pairs).expect("finite doubles always serialize")
}

pub fn save_dataset(ds: &ChannelDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let geo = ds.geometry();
    let header = Header {
        format_version: FORMAT_VERSION,
        users: geo.users,
        bs_antennas: geo.bs_antennas,
        ris_elements: geo.ris_elements(),
        ris_width: geo.ris_width,
        ris_height: geo.ris_height,
        sample_count: ds.len(),
        train_count: Some(ds.train_count()),
    };
    for s in ds.samples() {
        if !s.g.is_finite() || !s.d.is_finite() {
            return Err(Error::InvalidArgument(
                "dataset contains non-finite entries".into(),
            ));
        }
    }
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    out.push_str(&matrix_line(ds.h()));
    out.push('\n');
    for s in ds.samples() {
        out.push_str(&matrix_line(&s.g));
        out.push('\n');
        out.push_str(&matrix_line(&s.d));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next line and its starting byte offset.
    fn next_line(&mut self, field: &str) -> Result<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(Error::Parse {
                offset: self.pos,
                field: field.to_string(),
                message: "unexpected end of file".into(),
            });
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Ok((start, line.strip_suffix('\r').unwrap_or(line)))
    }
}

fn json_error(start: usize, line: &str, field: &str, e: serde_json::Error) -> Error {
    // serde_json columns are 1-based byte positions within the line
    let col = e.column().saturating_sub(1).min(line.len());
    Error::Parse {
        offset: start + col,
        field: field.to_string(),
        message: e.to_string(),
    }
}

fn parse_matrix(
    lines: &mut Lines<'_>,
    field: &str,
    rows: usize,
    cols: usize,
) -> Result<ComplexMatrix> {
    let (start, line) = lines.next_line(field)?;
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(line).map_err(|e| json_error(start, line, field, e))?;
    if pairs.len() != rows * cols {
        return Err(Error::Parse {
            offset: start,
            field: field.to_string(),
            message: format!(
                "expected {} entries ({rows}x{cols}), found {}",
                rows * cols,
                pairs.len()
            ),
        });
    }
    let data = pairs.into_iter().map(|[re, im]| C64::new(re, im)).collect();
    ComplexMatrix::from_vec(rows, cols, data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes)
}

pub(crate) fn parse_dataset(bytes: &[u8]) -> Result<ChannelDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        field: "file".into(),
        message: "invalid UTF-8".into(),
    })?;
    let mut lines = Lines { text, pos: 0 };
    let (start, line) = lines.next_line("header")?;
    let header: Header =
        serde_json::from_str(line).map_err(|e| json_error(start, line, "header", e))?;
    let header_err = |field: &str, message: String| Error::Parse {
        offset: start,
        field: field.into(),
        message,
    };
    if header.format_version != FORMAT_VERSION {
        return Err(header_err(
            "format_version",
            format!("unsupported version {}", header.format_version),
        ));
    }
    if header.ris_width * header.ris_height != header.ris_elements {
        return Err(header_err(
            "N",
            format!(
                "N={} but W_ris*H_ris={}",
                header.ris_elements,
                header.ris_width * header.ris_height
            ),
        ));
    }
    let train_count = header.train_count.unwrap_or(header.sample_count);
    if train_count > header.sample_count {
        return Err(header_err("train_count", "exceeds sample_count".into()));
    }
    let geometry = Geometry::new(
        header.ris_width,
        header.ris_height,
        header.users,
        header.bs_antennas,
    )
    .map_err(|e| header_err("header", e.to_string()))?;
    let (u, m, n) = (header.users, header.bs_antennas, header.ris_elements);

    let h = parse_matrix(&mut lines, "H", n, m)?;
    let mut pairs = Vec::with_capacity(header.sample_count);
    for i in 0..header.sample_count {
        let g = parse_matrix(&mut lines, &format!("G[{i}]"), u, n)?;
        let d = parse_matrix(&mut lines, &format!("D[{i}]"), u, m)?;
        pairs.push((g, d));
    }
    if !text[lines.pos..].trim().is_empty() {
        return Err(Error::Parse {
            offset: lines.pos,
            field: "trailer".into(),
            message: "unexpected data after the last sample".into(),
        });
    }
    ChannelDataset::new(geometry, h, pairs, train_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_dataset, ChannelSpec};

    fn small() -> ChannelDataset {
        let spec = ChannelSpec {
            ris_width: 4,
            ris_height: 3,
            bs_antennas: 4,
            train_samples: 3,
            test_samples: 2,
            ..ChannelSpec::default()
        };
        synthesize_dataset(&spec, 17).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ch.txt");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.train_count(), 3);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ch.txt");
        save_dataset(&ds, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() * 2 / 3];
        match parse_dataset(cut) {
            Err(Error::Parse { field, offset, .. }) => {
                assert!(field.starts_with('G') || field.starts_with('D'), "{field}");
                assert!(offset <= cut.len());
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_hand_written_file() {
        let text = "{\"format_version\":1,\"U\":1,\"M\":1,\"N\":1,\"W_ris\":1,\"H_ris\":1,\"sample_count\":1}\n\
                    [[0.5,-0.25]]\n\
                    [[1.0,0.0]]\n\
                    [[0.0,2.0]]\n";
        let ds = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.train_count(), 1);
        let s = &ds.samples()[0];
        assert_eq!(s.h[(0, 0)], C64::new(0.5, -0.25));
        assert_eq!(s.g[(0, 0)], C64::new(1.0, 0.0));
        assert_eq!(s.d[(0, 0)], C64::new(0.0, 2.0));
    }

    #[test]
    fn malformed_entry_reports_offset_and_field() {
        let text = "{\"format_version\":1,\"U\":1,\"M\":1,\"N\":1,\"W_ris\":1,\"H_ris\":1,\"sample_count\":1}\n\
                    [[0.5,-0.25]]\n\
                    [[1.0,oops]]\n\
                    [[0.0,2.0]]\n";
        match parse_dataset(text.as_bytes()) {
            Err(Error::Parse { field, offset, .. }) => {
                assert_eq!(field, "G[0]");
                let g_line = text.find("[[1.0").unwrap();
                assert!(offset >= g_line && offset < g_line + 12, "offset {offset}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_entry_count_names_field() {
        let text = "{\"format_version\":1,\"U\":1,\"M\":2,\"N\":1,\"W_ris\":1,\"H_ris\":1,\"sample_count\":0}\n[[0.5,-0.25]]\n";
        match parse_dataset(text.as_bytes()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "H"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let text = "{\"format_version\":2,\"U\":1,\"M\":1,\"N\":1,\"W_ris\":1,\"H_ris\":1,\"sample_count\":0}\n[[1,0]]\n";
        assert!(
            matches!(parse_dataset(text.as_bytes()), Err(Error::Parse { ref field, .. }) if field == "format_version")
        );
        assert!(
            matches!(parse_dataset(b"{\"U\":1}"), Err(Error::Parse { ref field, .. }) if field == "header")
        );
    }
}
