//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.txt       key=value header
//! <dir>/labels.csv         id,label,frame_mask
//! <dir>/videos/<id>.bin    u32 T, C, H, W then T*C*H*W f32, little-endian
//! <dir>/masks/<id>.mask    one '0' or '1' per frame
//! <dir>/boxes/<id>.csv     frame_index,x,y,w,h
//! ```
//!
//! Privacy datasets store each image as a one-frame video under `images/`
//! and write the attribute vector as a bit string in the label column.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::synth::{DatasetKind, PrivacyDataset, VideoDataset};
use super::{PrivacyImage, Video};
use crate::binio::{put_f32s, put_u32, read_file, read_text, write_file, Reader};
use crate::error::{Error, Result};
use crate::imgproc::Rect;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub resolution: usize,
    pub frames: usize,
    pub class_count: usize,
    pub count: usize,
}

impl Manifest {
    fn render(&self) -> String {
        format!(
            "version={}\nkind={}\nresolution={}\nT={}\nclass_count={}\ncount={}\n",
            self.version, self.kind, self.resolution, self.frames, self.class_count, self.count
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = read_text(&path)?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("expected key=value, got `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k).cloned().ok_or_else(|| Error::format(&path, format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(&path, format!("key `{k}` is not an integer")))
        };
        let m = Manifest {
            version: num("version")? as u32,
            kind: get("kind")?,
            resolution: num("resolution")?,
            frames: num("T")?,
            class_count: num("class_count")?,
            count: num("count")?,
        };
        if m.version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Action => "action",
        DatasetKind::Anomaly => "anomaly",
    }
}

pub fn encode_frames(frames: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + frames.len() * 4);
    for &d in frames.shape() {
        put_u32(&mut buf, d as u32);
    }
    put_f32s(&mut buf, frames.data());
    buf
}

pub fn decode_frames(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, path);
    let shape: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let data = r.f32s(shape.iter().product())?;
    r.finish()?;
    Ok(Tensor::from_vec(&shape, data))
}

pub fn write_boxes(path: &Path, boxes: &[Vec<Rect>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame_index", "x", "y", "w", "h"]).map_err(|e| csv_err(path, e))?;
    for (t, frame) in boxes.iter().enumerate() {
        for b in frame {
            w.serialize((t, b.x, b.y, b.w, b.h)).map_err(|e| csv_err(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_file(path, &bytes)
}

/// Reads a boxes CSV into per-frame lists for `frames` frames.
pub fn read_boxes(path: &Path, frames: usize) -> Result<Vec<Vec<Rect>>> {
    let mut out = vec![Vec::new(); frames];
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in r.deserialize::<(usize, usize, usize, usize, usize)>() {
        let (t, x, y, w, h) = row.map_err(|e| csv_err(path, e))?;
        if t >= frames {
            return Err(Error::format(path, format!("frame index {t} beyond {frames} frames")));
        }
        out[t].push(Rect::new(x, y, w, h));
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str, path: &Path) -> Result<Vec<bool>> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::format(path, format!("invalid bit `{c}`"))),
        })
        .collect()
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_video_dataset(dir: &Path, ds: &VideoDataset) -> Result<()> {
    prepare_dir(dir)?;
    let (frames, _, res, _) = ds.dims().unwrap_or((0, 3, 0, 0));
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: kind_name(ds.kind).into(),
        resolution: res,
        frames,
        class_count: ds.class_count,
        count: ds.len(),
    };
    write_file(&dir.join("manifest.txt"), manifest.render().as_bytes())?;
    let labels_path = dir.join("labels.csv");
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels
        .write_record(["video_id", "label", "frame_mask"])
        .map_err(|e| csv_err(&labels_path, e))?;
    for v in &ds.videos {
        write_file(&dir.join("videos").join(format!("{}.bin", v.id)), &encode_frames(&v.frames))?;
        let mask_rel = match &v.frame_mask {
            Some(mask) => {
                let rel = format!("masks/{}.mask", v.id);
                write_file(&dir.join(&rel), mask_string(mask).as_bytes())?;
                rel
            }
            None => String::new(),
        };
        if !v.boxes.is_empty() {
            write_boxes(&dir.join("boxes").join(format!("{}.csv", v.id)), &v.boxes)?;
        }
        labels
            .write_record([v.id.as_str(), &v.label.to_string(), &mask_rel])
            .map_err(|e| csv_err(&labels_path, e))?;
    }
    let bytes = labels.into_inner().map_err(|e| Error::format(&labels_path, e.to_string()))?;
    write_file(&labels_path, &bytes)
}

fn label_rows(dir: &Path) -> Result<(PathBuf, Vec<(String, String, String)>)> {
    let path = dir.join("labels.csv");
    if !path.exists() {
        return Err(Error::Dataset(format!("{} has no labels.csv", dir.display())));
    }
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&path)
        .map_err(|e| csv_err(&path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push((field(0), field(1), field(2)));
    }
    Ok((path, rows))
}

pub fn read_video_dataset(dir: &Path) -> Result<VideoDataset> {
    let manifest = Manifest::read(dir)?;
    let kind = match manifest.kind.as_str() {
        "action" => DatasetKind::Action,
        "anomaly" => DatasetKind::Anomaly,
        other => return Err(Error::Dataset(format!("{}: `{other}` is not a video dataset", dir.display()))),
    };
    let (labels_path, rows) = label_rows(dir)?;
    let mut videos = Vec::with_capacity(rows.len());
    for (id, label, mask_rel) in rows {
        let vpath = dir.join("videos").join(format!("{id}.bin"));
        let frames = decode_frames(&read_file(&vpath)?, &vpath)?;
        let label: usize = label
            .parse()
            .map_err(|_| Error::format(&labels_path, format!("bad label `{label}` for `{id}`")))?;
        let mut v = Video::new(id.clone(), frames, label)?;
        if !mask_rel.is_empty() {
            let mpath = dir.join(&mask_rel);
            let mask = parse_bits(&read_text(&mpath)?, &mpath)?;
            if mask.len() != v.num_frames() {
                return Err(Error::format(&mpath, format!("{} mask bits for {} frames", mask.len(), v.num_frames())));
            }
            v.frame_mask = Some(mask);
        }
        let bpath = dir.join("boxes").join(format!("{id}.csv"));
        if bpath.exists() {
            v.boxes = read_boxes(&bpath, v.num_frames())?;
        }
        videos.push(v);
    }
    if videos.len() != manifest.count {
        return Err(Error::Dataset(format!(
            "{}: manifest lists {} videos, labels.csv has {}",
            dir.display(),
            manifest.count,
            videos.len()
        )));
    }
    Ok(VideoDataset {
        kind,
        class_count: manifest.class_count,
        videos,
    })
}

pub fn write_privacy_dataset(dir: &Path, ds: &PrivacyDataset) -> Result<()> {
    prepare_dir(dir)?;
    let res = ds.images.first().map(|i| i.image.shape()[1]).unwrap_or(0);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: "privacy".into(),
        resolution: res,
        frames: 1,
        class_count: ds.attributes,
        count: ds.len(),
    };
    write_file(&dir.join("manifest.txt"), manifest.render().as_bytes())?;
    let labels_path = dir.join("labels.csv");
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels
        .write_record(["video_id", "label", "frame_mask"])
        .map_err(|e| csv_err(&labels_path, e))?;
    for img in &ds.images {
        let s = img.image.shape();
        let frames = img.image.clone().reshape(&[1, s[0], s[1], s[2]]);
        write_file(&dir.join("images").join(format!("{}.bin", img.id)), &encode_frames(&frames))?;
        if !img.boxes.is_empty() {
            write_boxes(&dir.join("boxes").join(format!("{}.csv", img.id)), &[img.boxes.clone()])?;
        }
        labels
            .write_record([img.id.as_str(), &mask_string(&img.labels), ""])
            .map_err(|e| csv_err(&labels_path, e))?;
    }
    let bytes = labels.into_inner().map_err(|e| Error::format(&labels_path, e.to_string()))?;
    write_file(&labels_path, &bytes)
}

pub fn read_privacy_dataset(dir: &Path) -> Result<PrivacyDataset> {
    let manifest = Manifest::read(dir)?;
    if manifest.kind != "privacy" {
        return Err(Error::Dataset(format!("{}: `{}` is not a privacy dataset", dir.display(), manifest.kind)));
    }
    let (labels_path, rows) = label_rows(dir)?;
    let mut images = Vec::with_capacity(rows.len());
    for (id, bits, _) in rows {
        let ipath = dir.join("images").join(format!("{id}.bin"));
        let frames = decode_frames(&read_file(&ipath)?, &ipath)?;
        let s = frames.shape().to_vec();
        if s[0] != 1 {
            return Err(Error::format(&ipath, "privacy image must hold exactly one frame"));
        }
        let labels = parse_bits(&bits, &labels_path)?;
        if labels.len() != manifest.class_count {
            return Err(Error::format(
                &labels_path,
                format!("`{id}` has {} attributes, expected {}", labels.len(), manifest.class_count),
            ));
        }
        let bpath = dir.join("boxes").join(format!("{id}.csv"));
        let boxes = if bpath.exists() {
            read_boxes(&bpath, 1)?.remove(0)
        } else {
            Vec::new()
        };
        images.push(PrivacyImage {
            id,
            image: frames.reshape(&s[1..]),
            labels,
            boxes,
        });
    }
    if images.len() != manifest.count {
        return Err(Error::Dataset(format!(
            "{}: manifest lists {} images, labels.csv has {}",
            dir.display(),
            manifest.count,
            images.len()
        )));
    }
    Ok(PrivacyDataset {
        attributes: manifest.class_count,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{
        generate_toy_anomaly_dataset, generate_toy_privacy_dataset, AnomalyConfig, PrivacyConfig,
    };

    #[test]
    fn anomaly_dataset_round_trips_bit_exactly() {
        let cfg = AnomalyConfig {
            normal_videos: 2,
            anomalous_videos: 2,
            frames: 40,
            event_min: 8,
            event_max: 12,
            resolution: 16,
            ..AnomalyConfig::default()
        };
        let ds = generate_toy_anomaly_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_video_dataset(dir.path(), &ds).unwrap();
        let back = read_video_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let m = Manifest::read(dir.path()).unwrap();
        assert_eq!((m.frames, m.resolution, m.class_count), (40, 16, 2));
    }

    #[test]
    fn privacy_dataset_round_trips_bit_exactly() {
        let cfg = PrivacyConfig {
            images: 5,
            resolution: 16,
            ..PrivacyConfig::default()
        };
        let ds = generate_toy_privacy_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_privacy_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_privacy_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_video_is_a_format_error() {
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![0.25f32; 4]);
        let mut bytes = encode_frames(&t);
        bytes.pop();
        assert!(matches!(decode_frames(&bytes, Path::new("x.bin")), Err(Error::Format { .. })));
    }
}
