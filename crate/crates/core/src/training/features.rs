//! Clip-feature extraction and the per-video feature file.
//!
//! A feature file holds the magic `PRVDFEAT`, the length-prefixed video id,
//! `u32` segment count `S`, `u32` width `C`, then `S * C` little-endian `f32`
//! values in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use super::anon::encode_clips;
use crate::baselines::{ToyBoxProvider, Transform};
use crate::binio::{put_f32s, put_str, put_u32, read_file, write_file, Reader};
use crate::data::synth::VideoDataset;
use crate::data::{sample_clip, CLIP_LENGTH};
use crate::error::{Error, Result};
use crate::models::{Anonymizer, UtilityEncoder};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PRVDFEAT";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[S, C]`.
    pub features: Tensor<f32>,
}

/// What sits in front of `f_T` during extraction.
#[derive(Clone, Copy, Debug)]
pub enum FeatureMode<'a> {
    Raw,
    Anonymized(&'a Anonymizer<f32>),
    Baseline(Transform),
}

/// `floor(T / 16)` consecutive non-overlapping clips per video, each mapped
/// through the mode's transform and `f_T`. Videos shorter than one clip are
/// skipped with a warning.
pub fn extract_features(
    mode: FeatureMode<'_>,
    ft: &UtilityEncoder<f32>,
    ds: &VideoDataset,
) -> Result<BTreeMap<String, FeatureSequence>> {
    let mut out = BTreeMap::new();
    for v in &ds.videos {
        let s = v.num_frames() / CLIP_LENGTH;
        if s == 0 {
            log::warn!("video `{}` has {} frames, fewer than one clip; skipped", v.id, v.num_frames());
            continue;
        }
        let source = match mode {
            FeatureMode::Baseline(t) => {
                let mut v2 = v.clone();
                v2.frames = t.apply(&v.frames, &ToyBoxProvider::from_video(v))?;
                v2
            }
            _ => v.clone(),
        };
        let clips = (0..s)
            .map(|j| Ok(sample_clip(&source, j * CLIP_LENGTH, CLIP_LENGTH, 1)?.frames))
            .collect::<Result<Vec<_>>>()?;
        let fa = match mode {
            FeatureMode::Anonymized(fa) => Some(fa),
            _ => None,
        };
        let (emb, _) = encode_clips(fa, ft, &clips)?;
        out.insert(
            v.id.clone(),
            FeatureSequence {
                video_id: v.id.clone(),
                features: emb,
            },
        );
    }
    Ok(out)
}

pub fn encode_feature_file(seq: &FeatureSequence) -> Vec<u8> {
    let s = seq.features.shape();
    let mut buf = Vec::with_capacity(24 + seq.features.len() * 4);
    buf.extend_from_slice(MAGIC);
    put_str(&mut buf, &seq.video_id);
    put_u32(&mut buf, s[0] as u32);
    put_u32(&mut buf, s[1] as u32);
    put_f32s(&mut buf, seq.features.data());
    buf
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    if seq.features.ndim() != 2 {
        return Err(Error::Shape(format!("features must be [S, C], got {:?}", seq.features.shape())));
    }
    write_file(path, &encode_feature_file(seq))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(MAGIC)?;
    let video_id = r.string()?;
    let s = r.u32()? as usize;
    let c = r.u32()? as usize;
    let data = r.f32s(s * c)?;
    r.finish()?;
    Ok(FeatureSequence {
        video_id,
        features: Tensor::from_vec(&[s, c], data),
    })
}

/// One `<video_id>.feat` file per sequence.
pub fn write_feature_dir(dir: &Path, features: &BTreeMap<String, FeatureSequence>) -> Result<()> {
    for (id, seq) in features {
        write_feature_file(&dir.join(format!("{id}.feat")), seq)?;
    }
    Ok(())
}

/// Reads the feature files of `ids` from `dir`.
pub fn read_feature_dir<'a>(dir: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, FeatureSequence>> {
    let mut out = BTreeMap::new();
    for id in ids {
        let path = dir.join(format!("{id}.feat"));
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: "extract-features".into(),
            });
        }
        let seq = read_feature_file(&path)?;
        if seq.video_id != id {
            return Err(Error::format(&path, format!("holds features of `{}`", seq.video_id)));
        }
        out.insert(id.to_string(), seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_toy_anomaly_dataset, AnomalyConfig};
    use crate::models::{AnonymizerConfig, UtilityEncoderConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segment_count_modes_and_file_round_trip() {
        let ds = generate_toy_anomaly_dataset(
            &AnomalyConfig {
                normal_videos: 1,
                anomalous_videos: 1,
                resolution: 16,
                frames: 40,
                event_min: 8,
                event_max: 16,
                ..AnomalyConfig::default()
            },
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ft = UtilityEncoder::<f32>::new(
            UtilityEncoderConfig {
                resolution: 16,
                widths: [2, 2],
                feature_dim: 5,
                ..UtilityEncoderConfig::default()
            },
            &mut rng,
        );
        let fa = Anonymizer::<f32>::new(
            AnonymizerConfig {
                resolution: 16,
                widths: [2, 2, 2],
                ..AnonymizerConfig::default()
            },
            &mut rng,
        );
        let raw = extract_features(FeatureMode::Raw, &ft, &ds).unwrap();
        let anon = extract_features(FeatureMode::Anonymized(&fa), &ft, &ds).unwrap();
        let again = extract_features(FeatureMode::Anonymized(&fa), &ft, &ds).unwrap();
        let id = &ds.videos[0].id;
        assert_eq!(raw[id].features.shape(), &[2, 5]);
        assert_ne!(raw[id], anon[id]);
        assert_eq!(anon, again);

        let dir = tempfile::tempdir().unwrap();
        write_feature_dir(dir.path(), &anon).unwrap();
        let back = read_feature_dir(dir.path(), anon.keys().map(String::as_str)).unwrap();
        assert_eq!(back, anon);
        let bytes = std::fs::read(dir.path().join(format!("{id}.feat"))).unwrap();
        assert_eq!(bytes, encode_feature_file(&anon[id]));
        assert!(matches!(
            read_feature_dir(dir.path(), ["missing"]),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
