//! Proposal fixture files.
//!
//! One proposal per line, comma separated:
//!
//! ```text
//! # scene_id,cx,cy,w,h[,score]
//! 17,0.41,0.52,0.2,0.31,0.98
//! 17,0.75,0.25,0.1,0.1
//! ```
//!
//! Coordinates are normalized center/size. Blank lines and lines starting with
//! `#` are ignored. Lines that do not describe a valid box are skipped and
//! reported, so a file with a few bad rows still loads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use hqp_core::data::Dataset;
use hqp_core::geom::BoxCxCyWH;
use hqp_core::proposals::{Proposal, ProposalSource};

use crate::error::{io_err, Error, Result};

const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalFile {
    pub proposals: BTreeMap<u64, Vec<Proposal>>,
    pub rejected: Vec<Rejection>,
}

impl ProposalFile {
    pub fn len(&self) -> usize {
        self.proposals.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_record(fields: &csv::StringRecord) -> std::result::Result<(u64, Proposal), String> {
    if !(5..=6).contains(&fields.len()) {
        return Err(format!("expected 5 or 6 fields, found {}", fields.len()));
    }
    let id: u64 = fields[0].parse().map_err(|_| format!("bad scene id {:?}", &fields[0]))?;
    let mut v = [0.0; 5];
    for (k, slot) in v.iter_mut().enumerate() {
        let s = fields.get(k + 1).unwrap_or("");
        *slot = if k == 4 && fields.len() == 5 {
            f64::NAN
        } else {
            s.parse().map_err(|_| format!("bad number {s:?}"))?
        };
    }
    let [cx, cy, w, h, score] = v;
    if ![cx, cy, w, h].iter().all(|x| x.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    if w <= 0.0 || h <= 0.0 {
        return Err("non-positive size".into());
    }
    let b = BoxCxCyWH::new(cx, cy, w, h);
    let c = b.to_xyxy();
    if c.x0 < -BOUND_TOL || c.y0 < -BOUND_TOL || c.x1 > 1.0 + BOUND_TOL || c.y1 > 1.0 + BOUND_TOL {
        return Err("box leaves the unit square".into());
    }
    let score = if fields.len() == 6 {
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("score {score} outside [0, 1]"));
        }
        Some(score)
    } else {
        None
    };
    Ok((
        id,
        Proposal {
            bbox: b,
            source: ProposalSource::Fixture,
            score,
        },
    ))
}

/// Reads a fixture; `label` names the source in errors.
pub fn read_proposals<R: Read>(reader: R, label: &Path) -> Result<ProposalFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = ProposalFile::default();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
            path: label.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match parse_record(&record) {
            Ok((id, p)) => out.proposals.entry(id).or_default().push(p),
            Err(reason) => out.rejected.push(Rejection { line, reason }),
        }
    }
    Ok(out)
}

pub fn load_proposals(path: &Path) -> Result<ProposalFile> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_proposals(std::io::BufReader::new(f), path)
}

pub fn write_proposals<W: Write>(mut w: W, proposals: &BTreeMap<u64, Vec<Proposal>>) -> std::io::Result<()> {
    writeln!(w, "# scene_id,cx,cy,w,h[,score]")?;
    for (id, props) in proposals {
        for p in props {
            let b = p.bbox;
            write!(w, "{id},{},{},{},{}", b.cx, b.cy, b.w, b.h)?;
            match p.score {
                Some(s) => writeln!(w, ",{s}")?,
                None => writeln!(w)?,
            }
        }
    }
    w.flush()
}

pub fn save_proposals(path: &Path, proposals: &BTreeMap<u64, Vec<Proposal>>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_proposals(std::io::BufWriter::new(f), proposals).map_err(io_err(path))
}

/// Proposals currently attached to the scenes of `ds`, keyed by scene id.
pub fn collect_proposals(ds: &Dataset) -> BTreeMap<u64, Vec<Proposal>> {
    ds.scenes
        .iter()
        .filter_map(|s| s.proposals.clone().map(|p| (s.id, p)))
        .collect()
}

/// Replaces every scene's proposals with the fixture's. Scenes missing from
/// the fixture get an empty list. Returns the number of scenes covered.
pub fn attach_fixture(ds: &mut Dataset, fixture: &ProposalFile) -> usize {
    let mut covered = 0;
    for s in &mut ds.scenes {
        let props = fixture.proposals.get(&s.id).cloned().unwrap_or_default();
        covered += usize::from(!props.is_empty());
        s.proposals = Some(props);
    }
    covered
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> ProposalFile {
        read_proposals(s.as_bytes(), Path::new("mem")).unwrap()
    }

    #[test]
    fn empty_file_is_empty_map() {
        let f = read("");
        assert!(f.proposals.is_empty() && f.rejected.is_empty());
    }

    #[test]
    fn one_malformed_line_is_rejected() {
        let f = read("# header\n1,0.5,0.5,0.2,0.2\n1,0.5,oops,0.2,0.2\n\n2,0.3,0.3,0.1,0.1,0.9\n");
        assert_eq!(f.len(), 2);
        assert_eq!(f.rejected.len(), 1);
        assert_eq!(f.rejected[0].line, 3);
        assert_eq!(f.proposals[&2][0].score, Some(0.9));
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        let f = read("1,0.5,0.5,0,0.2\n1,0.95,0.5,0.2,0.2\n1,0.5,0.5,0.2,0.2,1.5\n1,2\n");
        assert_eq!(f.len(), 0);
        assert_eq!(f.rejected.iter().map(|r| r.line).collect::<Vec<_>>(), [1, 2, 3, 4]);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = BTreeMap::new();
        m.insert(
            4,
            vec![
                Proposal::emulated(BoxCxCyWH::new(0.1 + 0.2, 1.0 / 3.0, 0.2, 0.4)),
                Proposal {
                    bbox: BoxCxCyWH::new(0.5, 0.5, 0.25, 0.125),
                    source: ProposalSource::Fixture,
                    score: Some(0.123456789),
                },
            ],
        );
        let mut buf = Vec::new();
        write_proposals(&mut buf, &m).unwrap();
        let back = read_proposals(buf.as_slice(), Path::new("mem")).unwrap();
        let a: Vec<_> = m[&4].iter().map(|p| (p.bbox, p.score)).collect();
        let b: Vec<_> = back.proposals[&4].iter().map(|p| (p.bbox, p.score)).collect();
        assert_eq!(a, b);
    }
}
