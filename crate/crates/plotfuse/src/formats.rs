//! Series file formats: `csv_wide`, `ts_uea_like` and `npz_like`.
//!
//! * `csv_wide` holds one series: one row per step, one column per channel,
//!   an optional header and an optional trailing `label` column of 0/1 step
//!   labels (recognized by its header name).
//! * `ts_uea_like` holds one instance per data line: channels separated by
//!   `:`, values by `,`, class label last. `@` lines carry metadata, `#` lines
//!   are comments, `?` marks a missing value.
//! * `npz_like` is a zip of `.npy` arrays: `values_{i}` (`f8 [L, C]`),
//!   optional `step_labels_{i}` (`u1 [L]`) and optional `class_labels`
//!   (`i8 [n]`, `-1` for none).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Seek, Write};
use std::path::Path;

use npyz::npz::{NpzArchive, NpzWriter};
use npyz::WriterBuilder;
use plotfuse_core::data::{check_channel_schema, ingest_rows, IngestReport, NanPolicy};
use plotfuse_core::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesFormat {
    CsvWide,
    TsUeaLike,
    NpzLike,
}

impl SeriesFormat {
    /// Guess from the file extension (`.csv`, `.ts`, `.npz`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::CsvWide),
            "ts" => Some(Self::TsUeaLike),
            "npz" => Some(Self::NpzLike),
            _ => None,
        }
    }
}

/// Instances read from one file plus what ingestion changed.
#[derive(Clone, Debug, Default)]
pub struct Loaded {
    pub instances: Vec<SeriesInstance>,
    /// Imputed rows per instance index, only for instances that had any.
    pub imputed: BTreeMap<usize, IngestReport>,
    /// Class names in index order, when the file declares them.
    pub class_names: Vec<String>,
}

pub fn load_series(path: &Path, format: SeriesFormat, policy: NanPolicy) -> Result<Loaded> {
    let bytes = read(path)?;
    let loaded = match format {
        SeriesFormat::CsvWide => read_csv_wide(path, &bytes, policy)?,
        SeriesFormat::TsUeaLike => read_ts(path, &bytes, policy)?,
        SeriesFormat::NpzLike => read_npz(path, Cursor::new(bytes), policy)?,
    };
    check_channel_schema(&loaded.instances).map_err(|e| Error::format(path, None, e.to_string()))?;
    Ok(loaded)
}

pub fn save_series(path: &Path, format: SeriesFormat, instances: &[SeriesInstance]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        SeriesFormat::CsvWide => {
            let [one] = instances else {
                return Err(Error::format(path, None, "csv_wide holds exactly one series"));
            };
            crate::error::write(path, &csv_wide_bytes(one)?)
        }
        SeriesFormat::TsUeaLike => crate::error::write(path, ts_text(instances).as_bytes()),
        SeriesFormat::NpzLike => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            write_npz(BufWriter::new(f), instances).map_err(|e| Error::io(path, e))
        }
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() || t == "?" || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    t.parse().ok()
}

/// Rows with their 1-based source lines, then the policy applied.
fn finish_rows(path: &Path, rows: &[Vec<f64>], lines: &[usize], policy: NanPolicy) -> Result<(Tensor, IngestReport)> {
    if policy == NanPolicy::Reject {
        if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::format(path, Some(lines[i]), "missing or non-finite value (nan_policy = reject)"));
        }
    }
    ingest_rows(rows, policy).map_err(|e| Error::format(path, None, e.to_string()))
}

fn read_csv_wide(path: &Path, bytes: &[u8], policy: NanPolicy) -> Result<Loaded> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes);
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::format(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let parsed: Vec<Option<f64>> = rec.iter().map(parse_cell).collect();
        if rows.is_empty() && header.is_none() && parsed.iter().any(Option::is_none) {
            header = Some(rec.iter().map(|s| s.trim().to_string()).collect());
            width = Some(rec.len());
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(Error::format(path, Some(line), format!("{} fields, expected {w}", rec.len())));
            }
            _ => width = Some(rec.len()),
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (j, v) in parsed.into_iter().enumerate() {
            row.push(v.ok_or_else(|| {
                Error::format(path, Some(line), format!("field {} is not a number: {:?}", j + 1, &rec[j]))
            })?);
        }
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(Error::format(path, None, "no data rows"));
    }
    let has_label = header.as_ref().and_then(|h| h.last()).is_some_and(|n| n.eq_ignore_ascii_case("label"));
    let mut labels = None;
    if has_label {
        let mut l = Vec::with_capacity(rows.len());
        for (row, &line) in rows.iter_mut().zip(&lines) {
            let v = row.pop().unwrap_or(f64::NAN);
            if v != 0.0 && v != 1.0 {
                return Err(Error::format(path, Some(line), format!("label must be 0 or 1, got {v}")));
            }
            l.push(v as u8);
        }
        labels = Some(l);
    }
    if rows[0].is_empty() {
        return Err(Error::format(path, None, "no channel columns"));
    }
    let (values, report) = finish_rows(path, &rows, &lines, policy)?;
    let mut inst = SeriesInstance::new(values, labels, None).map_err(|e| Error::format(path, None, e.to_string()))?;
    if let Some(mut h) = header {
        if has_label {
            h.pop();
        }
        inst = inst.with_channel_names(h);
    }
    let mut imputed = BTreeMap::new();
    if !report.imputed_rows.is_empty() {
        imputed.insert(0, report);
    }
    Ok(Loaded { instances: vec![inst], imputed, class_names: Vec::new() })
}

fn csv_wide_bytes(s: &SeriesInstance) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let c = s.channels();
    let mut header: Vec<String> = match &s.channel_names {
        Some(n) if n.len() == c => n.clone(),
        _ => (0..c).map(|i| format!("ch{i}")).collect(),
    };
    if s.step_labels().is_some() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Format { path: "<csv>".into(), line: None, message: e.to_string() };
    w.write_record(&header).map_err(csv_err)?;
    let d = s.values().data();
    for t in 0..s.len() {
        let mut rec: Vec<String> = d[t * c..(t + 1) * c].iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = s.step_labels() {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format { path: "<csv>".into(), line: None, message: e.to_string() })
}

fn read_ts(path: &Path, bytes: &[u8], policy: NanPolicy) -> Result<Loaded> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(path, None, e.to_string()))?;
    let mut class_names: Vec<String> = Vec::new();
    let mut has_class = false;
    let mut in_data = false;
    let mut instances = Vec::new();
    let mut imputed = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(meta) = s.strip_prefix('@') {
            let mut parts = meta.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            match key.as_str() {
                "classlabel" => {
                    has_class = parts.next().is_some_and(|v| v.eq_ignore_ascii_case("true"));
                    class_names = parts.map(str::to_string).collect();
                }
                "data" => in_data = true,
                _ => {}
            }
            continue;
        }
        if !in_data {
            return Err(Error::format(path, Some(line), "data line before @data"));
        }
        let mut fields: Vec<&str> = s.split(':').collect();
        let class = if has_class {
            let name = fields.pop().unwrap_or("").trim();
            let k = match class_names.iter().position(|c| c == name) {
                Some(k) => k,
                None if class_names.is_empty() => name
                    .parse()
                    .map_err(|_| Error::format(path, Some(line), format!("undeclared class label {name:?}")))?,
                None => return Err(Error::format(path, Some(line), format!("undeclared class label {name:?}"))),
            };
            Some(k)
        } else {
            None
        };
        let mut channels = Vec::with_capacity(fields.len());
        for f in &fields {
            let vals = f
                .split(',')
                .map(|v| parse_cell(v).ok_or_else(|| Error::format(path, Some(line), format!("not a number: {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            channels.push(vals);
        }
        let len = channels.first().map_or(0, Vec::len);
        if len == 0 || channels.iter().any(|c| c.len() != len) {
            return Err(Error::format(path, Some(line), "channels of an instance must have equal, positive length"));
        }
        let rows: Vec<Vec<f64>> = (0..len).map(|t| channels.iter().map(|c| c[t]).collect()).collect();
        let (values, report) = finish_rows(path, &rows, &vec![line; len], policy)?;
        if !report.imputed_rows.is_empty() {
            imputed.insert(instances.len(), report);
        }
        instances.push(
            SeriesInstance::new(values, None, class).map_err(|e| Error::format(path, Some(line), e.to_string()))?,
        );
    }
    if instances.is_empty() {
        return Err(Error::format(path, None, "no instances"));
    }
    Ok(Loaded { instances, imputed, class_names })
}

fn ts_text(instances: &[SeriesInstance]) -> String {
    let n_classes = instances.iter().filter_map(|s| s.class_label).max().map(|m| m + 1);
    let c = instances.first().map_or(0, SeriesInstance::channels);
    let mut out = format!("@dimensions {c}\n@univariate {}\n", c == 1);
    match n_classes {
        Some(k) => {
            let names: Vec<String> = (0..k).map(|i| i.to_string()).collect();
            out += &format!("@classLabel true {}\n", names.join(" "));
        }
        None => out += "@classLabel false\n",
    }
    out += "@data\n";
    for s in instances {
        let d = s.values().data();
        let chans: Vec<String> = (0..c)
            .map(|ci| (0..s.len()).map(|t| format!("{:?}", d[t * c + ci])).collect::<Vec<_>>().join(","))
            .collect();
        out += &chans.join(":");
        if n_classes.is_some() {
            out += &format!(":{}", s.class_label.map_or("0".into(), |k| k.to_string()));
        }
        out.push('\n');
    }
    out
}

/// Read one `.npy` payload as f64 values plus its shape.
pub fn npy_to_f64<R: Read>(file: npyz::NpyFile<R>) -> std::io::Result<(Vec<usize>, Vec<f64>)> {
    if file.order() != npyz::Order::C {
        return Err(std::io::Error::other("fortran-ordered arrays are not supported"));
    }
    let shape: Vec<usize> = file.shape().iter().map(|&s| s as usize).collect();
    let descr = file.dtype().descr();
    let values = match descr.trim_matches('\'').trim_start_matches(['<', '>', '|', '=']) {
        "f8" => file.into_vec::<f64>()?,
        "f4" => file.into_vec::<f32>()?.into_iter().map(f64::from).collect(),
        "i8" => file.into_vec::<i64>()?.into_iter().map(|v| v as f64).collect(),
        "i4" => file.into_vec::<i32>()?.into_iter().map(f64::from).collect(),
        "u1" => file.into_vec::<u8>()?.into_iter().map(f64::from).collect(),
        "b1" => file.into_vec::<bool>()?.into_iter().map(|b| b as u8 as f64).collect(),
        other => return Err(std::io::Error::other(format!("unsupported dtype {other}"))),
    };
    Ok((shape, values))
}

fn read_npz<R: Read + Seek>(path: &Path, reader: R, policy: NanPolicy) -> Result<Loaded> {
    let bad = |m: String| Error::format(path, None, m);
    let mut npz = NpzArchive::new(reader).map_err(|e| bad(e.to_string()))?;
    let mut idx: Vec<usize> = npz.array_names().filter_map(|n| n.strip_prefix("values_")?.parse().ok()).collect();
    idx.sort_unstable();
    if idx.is_empty() {
        return Err(bad("archive holds no values_{i} arrays".into()));
    }
    let mut get = |name: &str| -> Result<Option<(Vec<usize>, Vec<f64>)>> {
        match npz.by_name(name).map_err(|e| bad(format!("{name}: {e}")))? {
            Some(f) => npy_to_f64(f).map(Some).map_err(|e| bad(format!("{name}: {e}"))),
            None => Ok(None),
        }
    };
    let classes = get("class_labels")?.map(|(_, v)| v);
    let mut instances = Vec::new();
    let mut imputed = BTreeMap::new();
    for (k, &i) in idx.iter().enumerate() {
        if i != k {
            return Err(bad(format!("values_{k} is missing")));
        }
        let (shape, v) = get(&format!("values_{i}"))?.expect("listed above");
        let [len, c] = shape[..] else {
            return Err(bad(format!("values_{i} must be 2-d [len, channels], got {shape:?}")));
        };
        let rows: Vec<Vec<f64>> = v.chunks(c.max(1)).map(<[f64]>::to_vec).collect();
        if rows.len() != len || c == 0 {
            return Err(bad(format!("values_{i} has an empty axis")));
        }
        let lines: Vec<usize> = (0..len).collect();
        let (values, report) = finish_rows(path, &rows, &lines, policy).map_err(|e| match e {
            Error::Format { line: Some(r), .. } => bad(format!("values_{i} row {r} has a non-finite value")),
            e => e,
        })?;
        if !report.imputed_rows.is_empty() {
            imputed.insert(i, report);
        }
        let labels = get(&format!("step_labels_{i}"))?.map(|(_, v)| v.into_iter().map(|x| x as u8).collect());
        let class = match &classes {
            Some(c) => {
                let v = *c.get(i).ok_or_else(|| bad(format!("class_labels has no entry {i}")))?;
                (v >= 0.0).then_some(v as usize)
            }
            None => None,
        };
        instances.push(SeriesInstance::new(values, labels, class).map_err(|e| bad(format!("instance {i}: {e}")))?);
    }
    Ok(Loaded { instances, imputed, class_names: Vec::new() })
}

fn write_npz<W: Write + Seek>(w: W, instances: &[SeriesInstance]) -> std::io::Result<()> {
    let mut npz = NpzWriter::new(w);
    let opts = || zip::write::FileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (i, s) in instances.iter().enumerate() {
        let mut a = npz
            .array::<f64>(&format!("values_{i}"), opts())?
            .default_dtype()
            .shape(&[s.len() as u64, s.channels() as u64])
            .begin_nd()?;
        a.extend(s.values().data().iter().copied())?;
        a.finish()?;
        if let Some(l) = s.step_labels() {
            let mut a = npz
                .array::<u8>(&format!("step_labels_{i}"), opts())?
                .default_dtype()
                .shape(&[l.len() as u64])
                .begin_nd()?;
            a.extend(l.iter().copied())?;
            a.finish()?;
        }
    }
    if instances.iter().any(|s| s.class_label.is_some()) {
        let mut a =
            npz.array::<i64>("class_labels", opts())?.default_dtype().shape(&[instances.len() as u64]).begin_nd()?;
        a.extend(instances.iter().map(|s| s.class_label.map_or(-1, |k| k as i64)))?;
        a.finish()?;
    }
    npz.zip_writer().finish()?;
    Ok(())
}

/// A standalone `.npy` file of an f64 array.
pub fn save_npy(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    {
        let shape: Vec<u64> = t.shape().iter().map(|&s| s as u64).collect();
        let mut w = npyz::WriteOptions::<f64>::new()
            .default_dtype()
            .shape(&shape)
            .writer(&mut buf)
            .begin_nd()
            .map_err(|e| Error::io(path, e))?;
        w.extend(t.data().iter().copied()).map_err(|e| Error::io(path, e))?;
        w.finish().map_err(|e| Error::io(path, e))?;
    }
    crate::error::write(path, &buf)
}

pub fn load_npy(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let f = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::format(path, None, e.to_string()))?;
    let (shape, data) = npy_to_f64(f).map_err(|e| Error::format(path, None, e.to_string()))?;
    Ok(Tensor::new(&shape, data)?)
}
