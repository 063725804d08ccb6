// ASCII and binary point-cloud files.
//
// ASCII: one header line naming the columns (optionally prefixed by '#'),
// then whitespace-separated rows.
// Binary: "PCLD", version u16, point count u64, column count u8 and one u8
// code per column, then rows of little-endian f32 values with labels as u16.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCLD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ascii,
    Binary,
}

impl CloudFormat {
    /// `.pcld` files are binary; everything else is read as ASCII.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pcld") => CloudFormat::Binary,
            _ => CloudFormat::Ascii,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    X,
    Y,
    Z,
    R,
    G,
    B,
    Label,
}

impl Column {
    fn parse(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "x" => Column::X,
            "y" => Column::Y,
            "z" => Column::Z,
            "r" => Column::R,
            "g" => Column::G,
            "b" => Column::B,
            "label" | "l" => Column::Label,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Column::X => "x",
            Column::Y => "y",
            Column::Z => "z",
            Column::R => "r",
            Column::G => "g",
            Column::B => "b",
            Column::Label => "label",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [
            Column::X,
            Column::Y,
            Column::Z,
            Column::R,
            Column::G,
            Column::B,
            Column::Label,
        ]
        .get(c as usize)
        .copied()
    }

    fn is_attr(self) -> bool {
        matches!(self, Column::R | Column::G | Column::B)
    }
}

fn validate_columns(cols: &[Column]) -> Result<()> {
    for need in [Column::X, Column::Y, Column::Z] {
        if !cols.contains(&need) {
            return Err(Error::Format(format!("missing '{}' column", need.name())));
        }
    }
    for (i, c) in cols.iter().enumerate() {
        if cols[..i].contains(c) {
            return Err(Error::Format(format!("duplicate '{}' column", c.name())));
        }
    }
    Ok(())
}

/// Assembles a cloud from rows of raw column values.
struct Builder {
    columns: Vec<Column>,
    attr_cols: Vec<Column>,
    cloud: PointCloud,
    labels: Vec<usize>,
}

impl Builder {
    fn new(columns: Vec<Column>) -> Result<Self> {
        validate_columns(&columns)?;
        let attr_cols: Vec<Column> = columns.iter().copied().filter(|c| c.is_attr()).collect();
        let mut cloud = PointCloud::new(Vec::new());
        cloud.attr_names = attr_cols.iter().map(|c| c.name().to_string()).collect();
        Ok(Self {
            columns,
            attr_cols,
            cloud,
            labels: Vec::new(),
        })
    }

    fn push(&mut self, values: &[f64], line: usize) -> Result<()> {
        let mut p = [0.0; 3];
        let mut attrs = [0.0; 3];
        for (&col, &v) in self.columns.iter().zip(values) {
            match col {
                Column::X => p[0] = v,
                Column::Y => p[1] = v,
                Column::Z => p[2] = v,
                Column::Label => {
                    if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
                        return Err(Error::Parse {
                            line,
                            msg: format!("label {v} is not a class id"),
                        });
                    }
                    self.labels.push(v as usize);
                }
                c => {
                    let slot = self.attr_cols.iter().position(|&a| a == c).unwrap();
                    attrs[slot] = v;
                }
            }
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "non-finite coordinate".into(),
            });
        }
        self.cloud.xyz.push(p);
        self.cloud.attrs.extend_from_slice(&attrs[..self.attr_cols.len()]);
        Ok(())
    }

    fn finish(mut self) -> PointCloud {
        if self.columns.contains(&Column::Label) {
            self.cloud.labels = Some(self.labels);
        }
        // Colors given on a 0..255 scale are brought to [0, 1].
        if !self.attr_cols.is_empty() && self.cloud.attrs.iter().any(|&v| v > 1.0) {
            for v in &mut self.cloud.attrs {
                *v /= 255.0;
            }
        }
        self.cloud
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Ascii => read_ascii(BufReader::new(fs::File::open(path)?)),
        CloudFormat::Binary => read_binary(BufReader::new(fs::File::open(path)?)),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    cloud.validate(None)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        CloudFormat::Ascii => write_ascii(cloud, &mut w)?,
        CloudFormat::Binary => write_binary(cloud, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn columns_of(cloud: &PointCloud) -> Result<Vec<Column>> {
    let mut cols = vec![Column::X, Column::Y, Column::Z];
    for name in &cloud.attr_names {
        match Column::parse(name) {
            Some(c) if c.is_attr() => cols.push(c),
            _ => return Err(Error::Format(format!("attribute '{name}' has no file column"))),
        }
    }
    if cloud.labels.is_some() {
        cols.push(Column::Label);
    }
    validate_columns(&cols)?;
    Ok(cols)
}

fn row_values<'a>(cloud: &'a PointCloud, cols: &'a [Column], i: usize) -> impl Iterator<Item = (Column, f64)> + 'a {
    let mut attr = 0;
    let cols = cols.to_vec();
    cols.into_iter().map(move |c| {
        let v = match c {
            Column::X => cloud.xyz[i][0],
            Column::Y => cloud.xyz[i][1],
            Column::Z => cloud.xyz[i][2],
            Column::Label => cloud.labels.as_ref().unwrap()[i] as f64,
            _ => {
                let v = cloud.attrs_of(i)[attr];
                attr += 1;
                v
            }
        };
        (c, v)
    })
}

pub(crate) fn read_ascii<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate();
    let mut builder = None;
    for (idx, line) in lines.by_ref() {
        let line = line?;
        let trimmed = line.trim().trim_start_matches('#').trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut cols = Vec::new();
        for name in trimmed.split_whitespace() {
            cols.push(Column::parse(name).ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("unknown column '{name}' in header"),
            })?);
        }
        builder = Some(Builder::new(cols)?);
        break;
    }
    let mut builder = builder.ok_or_else(|| Error::Format("missing header line".into()))?;
    let width = builder.columns.len();
    let mut values = Vec::with_capacity(width);
    for (idx, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        values.clear();
        for tok in trimmed.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("'{tok}': {e}"),
            })?);
        }
        if values.len() != width {
            return Err(Error::Format(format!(
                "line {}: expected {width} columns, found {}",
                idx + 1,
                values.len()
            )));
        }
        builder.push(&values, idx + 1)?;
    }
    Ok(builder.finish())
}

fn write_ascii<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    let cols = columns_of(cloud)?;
    let header: Vec<&str> = cols.iter().map(|c| c.name()).collect();
    writeln!(w, "{}", header.join(" "))?;
    for i in 0..cloud.len() {
        let mut first = true;
        for (c, v) in row_values(cloud, &cols, i) {
            if !first {
                write!(w, " ")?;
            }
            first = false;
            if c == Column::Label {
                write!(w, "{}", v as usize)?;
            } else {
                write!(w, "{v}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_binary<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    let cols = columns_of(cloud)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    w.write_all(&[cols.len() as u8])?;
    for c in &cols {
        w.write_all(&[c.code()])?;
    }
    for i in 0..cloud.len() {
        for (c, v) in row_values(cloud, &cols, i) {
            if c == Column::Label {
                let l = u16::try_from(v as usize)
                    .map_err(|_| Error::Format(format!("label {v} exceeds u16")))?;
                w.write_all(&l.to_le_bytes())?;
            } else {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_binary<R: Read>(mut r: R) -> Result<PointCloud> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected PCLD".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(read_exact(&mut r, "point count")?) as usize;
    let [ncols] = read_exact::<_, 1>(&mut r, "column count")?;
    let mut cols = Vec::with_capacity(ncols as usize);
    for _ in 0..ncols {
        let [code] = read_exact::<_, 1>(&mut r, "column descriptor")?;
        cols.push(Column::from_code(code).ok_or_else(|| Error::Format(format!("unknown column code {code}")))?);
    }
    let mut builder = Builder::new(cols.clone())?;
    let mut values = vec![0.0; cols.len()];
    for i in 0..n {
        for (slot, c) in values.iter_mut().zip(&cols) {
            *slot = if *c == Column::Label {
                u16::from_le_bytes(read_exact(&mut r, "label")?) as f64
            } else {
                f32::from_le_bytes(read_exact(&mut r, "value")?) as f64
            };
        }
        builder.push(&values, i + 1)?;
    }
    Ok(builder.finish())
}
