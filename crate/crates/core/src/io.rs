//! Plain-text formats: feature and matrix CSVs, `key = value` files and the
//! on-disk layout of a synthetic dataset.
//!
//! ```text
//! <dir>/gen_params.txt          generator parameters and latent vectors
//! <dir>/pairs.csv               pair,a,b,file
//! <dir>/pairs/pair_000.csv      i,j   (j is NONE when frame i has no match)
//! <dir>/video_000/features.csv  header f0..f{D-1}, one frame per line
//! <dir>/video_000/labels.csv    frame,label,progress,segment
//! <dir>/video_000/program.txt   action id of each segment, space separated
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::priors::FeatureSequence;
use crate::synth::{PairAlignment, Prototypes, SynthDataset, SynthParams, Video};

/// One `key = value` entry with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are skipped
/// and a repeated key is an error.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<KeyValue>> {
    let mut out: Vec<KeyValue> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(parse_error(path, line, format!("expected `key = value`, got `{content}`")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(parse_error(path, line, "empty key"));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(parse_error(path, line, format!("key `{key}` already set on line {}", prev.line)));
        }
        out.push(KeyValue {
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<KeyValue>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

/// Parses a scalar value, naming the key on failure.
pub fn parse_value<T: FromStr>(kv: &KeyValue, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    kv.value
        .parse()
        .map_err(|e| parse_error(path, kv.line, format!("bad value `{}` for `{}`: {e}", kv.value, kv.key)))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(headers).trim(csv::Trim::All).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    parse_error(path, line, e.to_string())
}

/// Reads every record as numbers; all records must have the same width.
fn read_numeric(path: &Path, headers: bool) -> Result<Array2<f64>> {
    let mut reader = csv_reader(path, headers)?;
    let mut width = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_error(path, line, format!("expected {w} fields, found {}", record.len())));
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, line, format!("field {} is not a number: `{field}`", c + 1)))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("field {} is not finite", c + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| parse_error(path, 0, "no data rows"))?;
    Ok(Array2::from_shape_vec((rows, width), values).expect("row widths checked"))
}

fn format_row(out: &mut String, row: impl Iterator<Item = f64>) {
    for (k, v) in row.enumerate() {
        if k > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("writing to a String");
    }
    out.push('\n');
}

/// Features CSV: a header row, then one frame per line.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::new(read_numeric(path, true)?)
}

pub fn write_features(path: &Path, x: &FeatureSequence) -> Result<()> {
    let mut out = (0..x.dim()).map(|d| format!("f{d}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in x.frames().rows() {
        format_row(&mut out, row.iter().copied());
    }
    write_file(path, &out)
}

/// Header-less numeric matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    read_numeric(path, false)
}

pub fn write_matrix(path: &Path, a: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in a.rows() {
        format_row(&mut out, row.iter().copied());
    }
    write_file(path, &out)
}

/// Writes `header` followed by `rows` of already formatted fields.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

fn video_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("video_{k:03}"))
}

fn pair_file(k: usize) -> String {
    format!("pairs/pair_{k:03}.csv")
}

fn join_floats(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn gen_params_text(ds: &SynthDataset) -> String {
    let p = &ds.params;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
    kv("seed", p.seed.to_string());
    kv("n_videos", p.n_videos.to_string());
    kv("n_actions", p.n_actions.to_string());
    kv("dim", p.dim.to_string());
    kv("frames_per_video", p.frames_per_video.to_string());
    kv("length_jitter", p.length_jitter.to_string());
    kv("noise", p.noise.to_string());
    kv("warp", p.warp.to_string());
    kv("drift", p.drift.to_string());
    kv("phase_dims", p.phase_dims.to_string());
    kv("style", p.style.to_string());
    kv("background_rate", p.background_rate.to_string());
    kv("permute", p.permute.to_string());
    kv("repeat", p.repeat.to_string());
    for (a, row) in ds.prototypes.actions.rows().into_iter().enumerate() {
        kv(&format!("prototype.{a}"), join_floats(row.iter().copied()));
    }
    for (a, row) in ds.prototypes.drifts.rows().into_iter().enumerate() {
        kv(&format!("phase_direction.{a}"), join_floats(row.iter().copied()));
    }
    kv("background", join_floats(ds.prototypes.background.iter().copied()));
    out
}

/// Writes `ds` under `root`, creating directories as needed.
pub fn write_dataset(root: &Path, ds: &SynthDataset) -> Result<()> {
    write_file(&root.join("gen_params.txt"), &gen_params_text(ds))?;
    for (k, v) in ds.videos.iter().enumerate() {
        let dir = video_dir(root, k);
        write_features(&dir.join("features.csv"), &v.features)?;
        write_table(
            &dir.join("labels.csv"),
            &["frame", "label", "progress", "segment"],
            (0..v.len()).map(|i| vec![i.to_string(), v.labels[i].to_string(), v.progress[i].to_string(), v.segment[i].to_string()]),
        )?;
        let program = v.program.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ");
        write_file(&dir.join("program.txt"), &format!("{program}\n"))?;
    }
    write_table(
        &root.join("pairs.csv"),
        &["pair", "a", "b", "file"],
        ds.pairs
            .iter()
            .enumerate()
            .map(|(k, p)| vec![k.to_string(), p.a.to_string(), p.b.to_string(), pair_file(k)]),
    )?;
    for (k, p) in ds.pairs.iter().enumerate() {
        write_table(
            &root.join(pair_file(k)),
            &["i", "j"],
            p.map.iter().enumerate().map(|(i, j)| {
                vec![i.to_string(), j.map_or_else(|| "NONE".to_string(), |j| j.to_string())]
            }),
        )?;
    }
    Ok(())
}

fn parse_vector(kv: &KeyValue, path: &Path, dim: usize) -> Result<Array1<f64>> {
    let v = kv
        .value
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_error(path, kv.line, format!("bad vector for `{}`: {e}", kv.key)))?;
    if v.len() != dim {
        return Err(parse_error(path, kv.line, format!("`{}` has {} entries, expected {dim}", kv.key, v.len())));
    }
    Ok(Array1::from(v))
}

fn read_gen_params(path: &Path) -> Result<(SynthParams, Prototypes)> {
    let entries = read_key_values(path)?;
    let mut p = SynthParams::default();
    for kv in &entries {
        match kv.key.as_str() {
            "seed" => p.seed = parse_value(kv, path)?,
            "n_videos" => p.n_videos = parse_value(kv, path)?,
            "n_actions" => p.n_actions = parse_value(kv, path)?,
            "dim" => p.dim = parse_value(kv, path)?,
            "frames_per_video" => p.frames_per_video = parse_value(kv, path)?,
            "length_jitter" => p.length_jitter = parse_value(kv, path)?,
            "noise" => p.noise = parse_value(kv, path)?,
            "warp" => p.warp = parse_value(kv, path)?,
            "drift" => p.drift = parse_value(kv, path)?,
            "phase_dims" => p.phase_dims = parse_value(kv, path)?,
            "style" => p.style = parse_value(kv, path)?,
            "background_rate" => p.background_rate = parse_value(kv, path)?,
            "permute" => p.permute = parse_value(kv, path)?,
            "repeat" => p.repeat = parse_value(kv, path)?,
            k if k == "background" || k.starts_with("prototype.") || k.starts_with("phase_direction.") => {}
            k => return Err(parse_error(path, kv.line, format!("unknown key `{k}`"))),
        }
    }
    let find = |key: &str| {
        entries
            .iter()
            .find(|kv| kv.key == key)
            .ok_or_else(|| parse_error(path, 0, format!("missing key `{key}`")))
    };
    let mut actions = Array2::zeros((p.n_actions, p.dim));
    for a in 0..p.n_actions {
        actions.row_mut(a).assign(&parse_vector(find(&format!("prototype.{a}"))?, path, p.dim)?);
    }
    let mut drifts = Array2::zeros((p.n_actions * p.phase_dims, p.dim));
    for k in 0..drifts.nrows() {
        drifts.row_mut(k).assign(&parse_vector(find(&format!("phase_direction.{k}"))?, path, p.dim)?);
    }
    let background = parse_vector(find("background")?, path, p.dim)?;
    Ok((
        p,
        Prototypes {
            actions,
            drifts,
            background,
        },
    ))
}

fn read_labels(path: &Path, len: usize) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    let mut reader = csv_reader(path, true)?;
    let (mut labels, mut progress, mut segment) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(parse_error(path, line, format!("expected 4 fields, found {}", record.len())));
        }
        let field = |c: usize| -> &str { &record[c] };
        let bad = |c: usize| parse_error(path, line, format!("bad field {}: `{}`", c + 1, &record[c]));
        let frame: usize = field(0).parse().map_err(|_| bad(0))?;
        if frame != labels.len() {
            return Err(parse_error(path, line, format!("expected frame {}, found {frame}", labels.len())));
        }
        labels.push(field(1).parse().map_err(|_| bad(1))?);
        progress.push(field(2).parse().map_err(|_| bad(2))?);
        segment.push(field(3).parse().map_err(|_| bad(3))?);
    }
    if labels.len() != len {
        return Err(parse_error(path, 0, format!("{} labels for {len} frames", labels.len())));
    }
    Ok((labels, progress, segment))
}

fn read_program(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_error(path, 1, format!("bad action id `{t}`"))))
        .collect()
}

fn read_pair_map(path: &Path, len: usize) -> Result<Vec<Option<usize>>> {
    let mut reader = csv_reader(path, true)?;
    let mut map = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(parse_error(path, line, format!("expected 2 fields, found {}", record.len())));
        }
        let i: usize = record[0].parse().map_err(|_| parse_error(path, line, format!("bad frame `{}`", &record[0])))?;
        if i != map.len() {
            return Err(parse_error(path, line, format!("expected frame {}, found {i}", map.len())));
        }
        map.push(match &record[1] {
            "NONE" => None,
            j => Some(j.parse().map_err(|_| parse_error(path, line, format!("bad match `{j}`")))?),
        });
    }
    if map.len() != len {
        return Err(parse_error(path, 0, format!("{} entries for {len} frames", map.len())));
    }
    Ok(map)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<SynthDataset> {
    let (params, prototypes) = read_gen_params(&root.join("gen_params.txt"))?;
    let mut videos = Vec::with_capacity(params.n_videos);
    for k in 0..params.n_videos {
        let dir = video_dir(root, k);
        let features = read_features(&dir.join("features.csv"))?;
        let (labels, progress, segment) = read_labels(&dir.join("labels.csv"), features.len())?;
        let program = read_program(&dir.join("program.txt"))?;
        videos.push(Video {
            features,
            labels,
            progress,
            segment,
            program,
        });
    }
    let pairs_path = root.join("pairs.csv");
    let mut reader = csv_reader(&pairs_path, true)?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&pairs_path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(parse_error(&pairs_path, line, format!("expected 4 fields, found {}", record.len())));
        }
        let index = |c: usize| -> Result<usize> {
            let v: usize = record[c]
                .parse()
                .map_err(|_| parse_error(&pairs_path, line, format!("bad field {}: `{}`", c + 1, &record[c])))?;
            if c > 0 && v >= videos.len() {
                return Err(parse_error(&pairs_path, line, format!("video {v} does not exist")));
            }
            Ok(v)
        };
        let (a, b) = (index(1)?, index(2)?);
        let map = read_pair_map(&root.join(&record[3]), videos[a].len())?;
        pairs.push(PairAlignment { a, b, map });
    }
    Ok(SynthDataset {
        params,
        prototypes,
        videos,
        pairs,
    })
}
