//! Plain-text dataset dump for debugging.
//!
//! ```text
//! promptkd-dataset num_classes=10 images_per_class=200 seed=0 side=16
//! train 0 0.125 -1.5 ...
//! test 9 ...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a parsed manifest
//! reproduces the pixels exactly.

use std::fmt::Write as _;

use super::{Dataset, Image};
use crate::error::{Error, Result};

const HEADER_TAG: &str = "promptkd-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub split: SplitTag,
    pub class: usize,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub seed: u64,
    pub side: usize,
    pub records: Vec<ManifestRecord>,
}

pub fn write_manifest(d: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_TAG} num_classes={} images_per_class={} seed={} side={}",
        d.spec.num_classes, d.spec.images_per_class, d.spec.seed, d.spec.image_side
    );
    for (tag, set) in [("train", &d.train), ("test", &d.test)] {
        for s in set {
            let _ = write!(out, "{tag} {}", s.label);
            for p in s.image.pixels() {
                let _ = write!(out, " {p}");
            }
            out.push('\n');
        }
    }
    out
}

fn header_field<T: std::str::FromStr>(fields: &[&str], key: &str) -> Result<T> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Data(format!("manifest header lacks {key}")))?
        .parse()
        .map_err(|_| Error::Data(format!("manifest header field {key} is malformed")))
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty manifest".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&HEADER_TAG) {
        return Err(Error::Data("missing manifest header".into()));
    }
    let num_classes: usize = header_field(&fields, "num_classes")?;
    let images_per_class = header_field(&fields, "images_per_class")?;
    let seed = header_field(&fields, "seed")?;
    let side: usize = header_field(&fields, "side")?;
    let pixels = side
        .checked_mul(side)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::Data(format!("bad image side {side}")))?;

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: &str| Error::Data(format!("manifest line {}: {msg}", lineno + 2));
        let mut parts = line.split_whitespace();
        let split = match parts.next() {
            Some("train") => SplitTag::Train,
            Some("test") => SplitTag::Test,
            _ => return Err(at("unknown split tag")),
        };
        let class: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| at("bad class index"))?;
        if class >= num_classes {
            return Err(at("class index out of range"));
        }
        let values = parts
            .map(|v| v.parse::<f32>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| at("bad pixel value"))?;
        if values.len() != pixels {
            return Err(at(&format!("expected {pixels} pixels, found {}", values.len())));
        }
        records.push(ManifestRecord {
            split,
            class,
            image: Image::new(side, values)?,
        });
    }
    Ok(Manifest {
        num_classes,
        images_per_class,
        seed,
        side,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, DatasetSpec};

    #[test]
    fn round_trip_is_exact() {
        let d = generate_synthetic_dataset(&DatasetSpec {
            num_classes: 4,
            images_per_class: 2,
            test_per_class: 1,
            image_side: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        let m = parse_manifest(&write_manifest(&d)).unwrap();
        assert_eq!(m.num_classes, 4);
        assert_eq!(m.records.len(), 12);
        let train: Vec<_> = m.records.iter().filter(|r| r.split == SplitTag::Train).collect();
        for (r, s) in train.iter().zip(&d.train) {
            assert_eq!(r.image, s.image);
            assert_eq!(r.class, s.label);
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let h = "promptkd-dataset num_classes=4 images_per_class=1 seed=0 side=1\n";
        assert!(parse_manifest(&format!("{h}train 0 0.5\n")).is_ok());
        assert!(parse_manifest(&format!("{h}train 9 0.5\n")).is_err());
        assert!(parse_manifest(&format!("{h}valid 0 0.5\n")).is_err());
        assert!(parse_manifest(&format!("{h}train 0 0.5 0.5\n")).is_err());
        assert!(parse_manifest(&format!("{h}train 0 NaN\n")).is_err());
        assert!(parse_manifest("nonsense").is_err());
    }
}
