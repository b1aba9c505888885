//! JSON-lines sequence files.
//!
//! Each sequence starts with a header line
//! `{"format":"egocast-seq","version":1,"skeleton":{..},"fps":30.0,"activity":..}`
//! followed by one line per frame
//! `{"i":0,"t":0.0,"p":[x,y,z],"y":[w,x,y,z],"q":[[x,y,z],..] or null,"v":[..]}`.
//! `q` null or absent means the ground-truth body is withheld; `v` is optional.
//! All sequences in one file share a skeleton. Floats use shortest round-trip
//! formatting, so reading and rewriting a file reproduces it byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{BodyPose, HeadsetPose, PoseFrame, PoseSequence, SkeletonSpec, UnitQuat, Vec3};

pub const FORMAT_TAG: &str = "egocast-seq";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on `|‖y‖ − 1|` when reading headset rotations.
pub const FILE_QUAT_TOL: f64 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    skeleton: SkeletonSpec,
    fps: f64,
    activity: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    i: usize,
    t: f64,
    p: Vec3,
    y: [f64; 4],
    #[serde(default)]
    q: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Vec<f64>>,
}

pub fn write_sequences_to<W: Write>(mut out: W, sequences: &[PoseSequence]) -> Result<()> {
    if let Some(first) = sequences.first() {
        if sequences.iter().any(|s| s.skeleton() != first.skeleton()) {
            return Err(Error::Format("sequences in one file must share a skeleton".into()));
        }
    }
    for seq in sequences {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            skeleton: seq.skeleton().clone(),
            fps: seq.fps(),
            activity: seq.activity().map(str::to_string),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for f in seq.frames() {
            let line = FrameLine {
                i: f.index,
                t: f.timestamp,
                p: f.headset.position,
                y: f.headset.rotation.as_array(),
                q: f.body.as_ref().map(|b| b.joints().to_vec()),
                v: f.visual_feature.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_sequences(path: &Path, sequences: &[PoseSequence]) -> Result<()> {
    write_sequences_to(BufWriter::new(File::create(path)?), sequences)
}

struct Pending {
    header: Header,
    frames: Vec<PoseFrame>,
    line: usize,
}

impl Pending {
    fn finish(self, path: &Path) -> Result<PoseSequence> {
        let line = self.line;
        PoseSequence::new(self.header.skeleton, self.frames, self.header.activity)
            .and_then(|s| s.with_fps(self.header.fps))
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("invalid sequence: {e}"),
            })
    }
}

/// Reads sequences; `path` is used only in diagnostics.
pub fn read_sequences_from<R: BufRead>(reader: R, path: &Path) -> Result<Vec<PoseSequence>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut current: Option<Pending> = None;
    let mut skeleton: Option<SkeletonSpec> = None;
    for (n, text) in reader.lines().enumerate() {
        let line = n + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| parse_err(line, format!("malformed JSON: {e}")))?;
        if value.get("format").is_some() {
            let header: Header =
                serde_json::from_value(value).map_err(|e| parse_err(line, format!("bad header: {e}")))?;
            if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
                return Err(parse_err(
                    line,
                    format!("unsupported format {} version {}", header.format, header.version),
                ));
            }
            match &skeleton {
                Some(s) if *s != header.skeleton => {
                    return Err(Error::Format(format!(
                        "{}:{line}: skeleton differs from earlier sequences",
                        path.display()
                    )))
                }
                _ => skeleton = Some(header.skeleton.clone()),
            }
            if let Some(done) = current.take() {
                out.push(done.finish(path)?);
            }
            current = Some(Pending {
                header,
                frames: Vec::new(),
                line,
            });
            continue;
        }
        let pending = current
            .as_mut()
            .ok_or_else(|| parse_err(line, "frame line before any header".into()))?;
        let f: FrameLine = serde_json::from_value(value).map_err(|e| parse_err(line, format!("bad frame: {e}")))?;
        let rotation = UnitQuat::from_unit(f.y, FILE_QUAT_TOL)
            .map_err(|_| parse_err(line, format!("frame {}: headset rotation {:?} is not unit norm", f.i, f.y)))?;
        let body = match f.q {
            Some(q) => {
                if q.len() != pending.header.skeleton.joint_count() {
                    return Err(parse_err(
                        line,
                        format!(
                            "frame {}: {} joints, skeleton has {}",
                            f.i,
                            q.len(),
                            pending.header.skeleton.joint_count()
                        ),
                    ));
                }
                Some(BodyPose::new(q).map_err(|e| parse_err(line, format!("frame {}: {e}", f.i)))?)
            }
            None => None,
        };
        pending.frames.push(PoseFrame {
            index: f.i,
            timestamp: f.t,
            headset: HeadsetPose {
                position: f.p,
                rotation,
            },
            body,
            visual_feature: f.v,
        });
    }
    if let Some(done) = current.take() {
        out.push(done.finish(path)?);
    }
    Ok(out)
}

pub fn read_sequences(path: &Path) -> Result<Vec<PoseSequence>> {
    read_sequences_from(BufReader::new(File::open(path)?), path)
}
