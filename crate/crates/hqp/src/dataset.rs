//! Dataset files: a JSON header line followed by one JSON record per scene.
//!
//! The header carries the format version, the split, the generator
//! configuration and its digest. Pixels are either stored inline (base64 RGB)
//! or omitted and re-rendered from each scene's recorded seed on load. Boxes,
//! labels, proposals and the corruption flag are always stored explicitly.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hqp_core::data::{gen_scene, Dataset, GenConfig, GroundTruth, Scene, Split};
use hqp_core::image::Image;
use hqp_core::proposals::Proposal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const DATASET_FORMAT: &str = "hqp-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelMode {
    /// Pixels stored in every record.
    Inline,
    /// Pixels re-rendered from the scene seed.
    Seed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    pixels: PixelMode,
    count: usize,
    gen_digest: String,
    gen: GenConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    seed: u64,
    corrupted: bool,
    gts: Vec<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proposals: Option<Vec<Proposal>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

pub fn gen_digest(gen: &GenConfig) -> String {
    crate::sha256_hex(serde_json::to_string(gen).expect("config serializes").as_bytes())
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset, mode: PixelMode) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        split: ds.split,
        pixels: mode,
        count: ds.scenes.len(),
        gen_digest: gen_digest(&ds.gen),
        gen: ds.gen.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in &ds.scenes {
        let rec = Record {
            id: s.id,
            seed: s.seed,
            corrupted: s.corrupted,
            gts: s.gts.clone(),
            proposals: s.proposals.clone(),
            image: (mode == PixelMode::Inline).then(|| B64.encode(&s.image.pixels)),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn save_dataset(path: &Path, ds: &Dataset, mode: PixelMode) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_dataset(std::io::BufWriter::new(f), ds, mode).map_err(io_err(path))
}

fn scene_from_record(rec: Record, gen: &GenConfig, mode: PixelMode) -> std::result::Result<Scene, String> {
    let size = gen.image_size;
    let image = match (mode, rec.image) {
        (PixelMode::Inline, Some(b)) => {
            let pixels = B64.decode(b.as_bytes()).map_err(|e| format!("bad image encoding: {e}"))?;
            if pixels.len() != size * size * 3 {
                return Err(format!("image has {} bytes, expected {}", pixels.len(), size * size * 3));
            }
            Image {
                height: size,
                width: size,
                pixels,
            }
        }
        (PixelMode::Inline, None) => return Err("missing image".into()),
        (PixelMode::Seed, _) => gen_scene(gen, rec.id, rec.seed, &mut ChaCha8Rng::seed_from_u64(rec.seed)).image,
    };
    if rec.gts.is_empty() {
        return Err("scene has no ground truth".into());
    }
    for g in &rec.gts {
        let b = g.bbox;
        if g.class >= gen.n_classes || !(b.w > 0.0 && b.h > 0.0) || ![b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) {
            return Err(format!("invalid ground truth {g:?}"));
        }
    }
    Ok(Scene {
        id: rec.id,
        seed: rec.seed,
        image,
        gts: rec.gts,
        proposals: rec.proposals,
        corrupted: rec.corrupted,
    })
}

/// Reads a dataset; `label` names the source in errors.
pub fn read_dataset<R: BufRead>(reader: R, label: &Path) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: label.to_path_buf(),
        line,
        message,
    };
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(io_err(label))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let probe: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(parse_err(1, "not a dataset file".into()));
    }
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    header.gen.validate()?;
    if gen_digest(&header.gen) != header.gen_digest {
        return Err(parse_err(1, "generator digest does not match the stored configuration".into()));
    }
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line_no = i + 1;
        let text = line.map_err(io_err(label))?;
        if text.trim().is_empty() {
            continue;
        }
        let index = scenes.len();
        let record_err = |record: String, message: String| Error::Record {
            path: label.to_path_buf(),
            record,
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&text).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("id").and_then(|x| x.as_u64()));
            let name = id.map_or(format!("#{index}"), |id| format!("id {id}"));
            record_err(name, e.to_string())
        })?;
        let id = rec.id;
        let scene = scene_from_record(rec, &header.gen, header.pixels).map_err(|m| record_err(format!("id {id}"), m))?;
        scenes.push(scene);
    }
    if scenes.len() != header.count {
        return Err(parse_err(1, format!("header announces {} scenes, file holds {}", header.count, scenes.len())));
    }
    Ok(Dataset {
        split: header.split,
        gen: header.gen,
        scenes,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_dataset(std::io::BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hqp_core::proposals::{attach_proposals, EmulatorConfig};

    fn small() -> Dataset {
        let gen = GenConfig {
            n_scenes: 6,
            image_size: 16,
            ..Default::default()
        };
        let mut ds = Dataset::generate(&gen, Split::Train, 10);
        attach_proposals(&mut ds, &EmulatorConfig::default(), 3);
        ds
    }

    fn round_trip(ds: &Dataset, mode: PixelMode) -> (Vec<u8>, Dataset) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, ds, mode).unwrap();
        let back = read_dataset(buf.as_slice(), Path::new("mem")).unwrap();
        (buf, back)
    }

    #[test]
    fn both_modes_round_trip() {
        let ds = small();
        let (inline, a) = round_trip(&ds, PixelMode::Inline);
        let (seeded, b) = round_trip(&ds, PixelMode::Seed);
        assert_eq!(a, ds);
        assert_eq!(b, ds);
        assert!(seeded.len() < inline.len());
    }

    #[test]
    fn corrupted_flags_survive() {
        let ds = small();
        let noisy = hqp_core::data::corrupt_dataset(&ds, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(round_trip(&noisy, PixelMode::Seed).1, noisy);
    }

    #[test]
    fn bad_record_is_named() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds, PixelMode::Seed).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let broken = text.replacen("\"class\":", "\"klass\":", 1);
        let err = read_dataset(broken.as_bytes(), Path::new("d.jsonl")).unwrap_err();
        match err {
            Error::Record { record, line, .. } => {
                assert_eq!(record, "id 10");
                assert_eq!(line, 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn other_versions_are_refused() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds, PixelMode::Seed).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\"version\":1", "\"version\":0", 1);
        assert!(matches!(
            read_dataset(text.as_bytes(), Path::new("d")),
            Err(Error::UnsupportedVersion { found: 0, .. })
        ));
    }
}
