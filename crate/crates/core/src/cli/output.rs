use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mmd::Batch;

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Full-precision decimal form of `v`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn prompt_header(width: usize) -> Vec<String> {
    if width == 1 {
        vec!["prompt".to_string()]
    } else {
        (0..width).map(|j| format!("prompt{j}")).collect()
    }
}

/// `z0..z{d-1}` columns, followed by prompt columns when present.
pub fn samples_csv(batch: &Batch) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..batch.dim()).map(|j| format!("z{j}")).collect();
    if let Some(p) = batch.prompts() {
        header.extend(prompt_header(p.ncols()));
    }
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..batch.len() {
        let mut record: Vec<String> = batch.row(i).iter().map(|v| format_value(*v)).collect();
        if let Some(p) = batch.prompt(i) {
            record.extend(p.iter().map(|v| format_value(*v)));
        }
        w.write_record(&record).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Parses [`samples_csv`] output; columns named `z*` are latent, `prompt*`
/// are prompt embeddings.
pub fn parse_samples_csv(bytes: &[u8]) -> Result<Batch> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_error)?.clone();
    let mut latent = Vec::new();
    let mut prompt = Vec::new();
    for (j, name) in header.iter().enumerate() {
        let name = name.trim();
        if name.starts_with('z') {
            latent.push(j);
        } else if name.starts_with("prompt") {
            prompt.push(j);
        } else {
            return Err(Error::InvalidParameter(format!(
                "unexpected column {name:?}"
            )));
        }
    }
    if latent.is_empty() {
        return Err(Error::InvalidParameter("no z columns".into()));
    }
    let mut z = Vec::new();
    let mut p = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(csv_error)?;
        let parse = |j: usize| -> Result<f64> {
            let field = record.get(j).unwrap_or("").trim();
            field.parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("row {}: cannot parse {field:?}", rows + 1))
            })
        };
        for &j in &latent {
            z.push(parse(j)?);
        }
        for &j in &prompt {
            p.push(parse(j)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let data = Array2::from_shape_vec((rows, latent.len()), z).expect("shape");
    if prompt.is_empty() {
        Batch::new(data)
    } else {
        Batch::with_prompts(
            data,
            Array2::from_shape_vec((rows, prompt.len()), p).expect("shape"),
        )
    }
}

pub fn read_samples_csv(path: &Path) -> Result<Batch> {
    parse_samples_csv(&std::fs::read(path)?)
}

/// CSV from a header and rows of preformatted fields.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2",
];
const REFERENCE_COLOR: &str = "#ff7f0e";

/// Scatter of the first two coordinates: references plus one series per
/// method.
pub fn scatter_svg(references: &Batch, series: &[(&str, &Batch)]) -> String {
    let size = 600.0;
    let margin = 40.0;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let all = std::iter::once(references).chain(series.iter().map(|(_, b)| *b));
    for b in all.clone() {
        for i in 0..b.len() {
            for c in 0..2.min(b.dim()) {
                lo[c] = lo[c].min(b.row(i)[c]);
                hi[c] = hi[c].max(b.row(i)[c]);
            }
        }
    }
    for c in 0..2 {
        if !lo[c].is_finite() || hi[c] - lo[c] < 1e-12 {
            lo[c] = lo[c].min(0.0) - 1.0;
            hi[c] = hi[c].max(0.0) + 1.0;
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let px = |v: f64| margin + (v - lo[0]) / span * (size - 2.0 * margin);
    let py = |v: f64| size - margin - (v - lo[1]) / span * (size - 2.0 * margin);
    let coord = |b: &Batch, i: usize| {
        let r = b.row(i);
        (r[0], if b.dim() > 1 { r[1] } else { 0.0 })
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (s, (name, batch)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<g class="generated" data-method="{name}" fill="{color}" fill-opacity="0.5">"#
        );
        for i in 0..batch.len() {
            let (x, y) = coord(batch, i);
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(
        svg,
        r#"<g class="reference" fill="{REFERENCE_COLOR}" stroke="black" stroke-width="0.5">"#
    );
    for i in 0..references.len() {
        let (x, y) = coord(references, i);
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#,
            px(x),
            py(y)
        );
    }
    let _ = writeln!(svg, "</g>");
    let names = std::iter::once(("reference", REFERENCE_COLOR)).chain(
        series
            .iter()
            .enumerate()
            .map(|(s, (n, _))| (*n, PALETTE[s % PALETTE.len()])),
    );
    for (row, (name, color)) in names.enumerate() {
        let y = 20.0 + 16.0 * row as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="20" cy="{y}" r="4" fill="{color}"/><text x="30" y="{}" font-size="12" font-family="sans-serif">{name}</text>"#,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective config with `output_dir` cleared.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Present only when timings were requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<PhaseTiming>>,
    pub files: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Files produced by one command, written together at the end.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    /// Writes every file into `dir`. A missing `dir` is staged in a sibling
    /// directory and renamed into place, so a failed write leaves nothing
    /// behind.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        if dir.exists() {
            return self.write_into(dir);
        }
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)?;
        let stem = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let staging = parent.join(format!(".{stem}.partial-{}", std::process::id()));
        let result = std::fs::create_dir_all(&staging)
            .map_err(Error::from)
            .and_then(|_| self.write_into(&staging))
            .and_then(|_| std::fs::rename(&staging, dir).map_err(Error::from));
        if result.is_err() {
            let _ = std::fs::remove_dir_all(&staging);
        }
        result?;
        Ok(self.files.iter().map(|(n, _)| dir.join(n)).collect())
    }

    fn write_into(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes)?;
            out.push(path);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip_bitwise() {
        let rows = vec![
            vec![0.1, -1.0 / 3.0],
            vec![1e-300, 12345.678901234567],
            vec![-0.0, f64::MIN_POSITIVE],
        ];
        let b = Batch::from_rows(&rows).unwrap();
        let bytes = samples_csv(&b).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("z0,z1\n"));
        assert_eq!(parse_samples_csv(&bytes).unwrap(), b);

        let prompts = Array2::from_shape_vec((3, 1), vec![1.0, 6.0, 1.0]).unwrap();
        let with = Batch::with_prompts(b.data().clone(), prompts).unwrap();
        let bytes = samples_csv(&with).unwrap();
        assert!(String::from_utf8(bytes.clone())
            .unwrap()
            .starts_with("z0,z1,prompt\n"));
        assert_eq!(parse_samples_csv(&bytes).unwrap(), with);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_samples_csv(b"z0,z1\n1.0,abc\n").is_err());
        assert!(parse_samples_csv(b"z0,z1\n").is_err());
        assert!(parse_samples_csv(b"x,y\n1,2\n").is_err());
        assert!(parse_samples_csv(b"z0,z1\n1.0\n").is_err());
    }

    #[test]
    fn svg_has_both_series() {
        let refs = Batch::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let gen = Batch::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let svg = scatter_svg(&refs, &[("mmd", &gen)]);
        assert!(svg.contains(r#"class="reference""#));
        assert!(svg.contains(r#"data-method="mmd""#));
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert_eq!(svg, scatter_svg(&refs, &[("mmd", &gen)]));
    }

    #[test]
    fn staged_write_is_all_or_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut set = OutputSet::default();
        set.add("a.txt", b"a".to_vec());
        set.add("b.txt", b"b".to_vec());
        set.write(&dir).unwrap();
        assert_eq!(std::fs::read(dir.join("b.txt")).unwrap(), b"b");

        let mut bad = OutputSet::default();
        bad.add("ok.txt", b"x".to_vec());
        bad.add("missing/sub.txt", b"y".to_vec());
        let target = tmp.path().join("bad");
        assert!(bad.write(&target).is_err());
        assert!(!target.exists());
        let leftovers: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
