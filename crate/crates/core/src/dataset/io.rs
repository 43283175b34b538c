use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{TrackBox, VideoSequence};

pub const FRAMES_DIR: &str = "frames";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame: usize,
    boxes: Vec<TrackBox>,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{t:06}.png"))
}

/// Writes `<root>/<id>/frames/NNNNNN.png` and `<root>/<id>/annotations.jsonl`.
pub fn save_sequence(seq: &VideoSequence, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&seq.id);
    fs::create_dir_all(dir.join(FRAMES_DIR))?;
    for (t, frame) in seq.frames.iter().enumerate() {
        frame.save(frame_path(&dir, t))?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for (t, boxes) in seq.annotations.iter().enumerate() {
        let rec = FrameRecord {
            frame: t,
            boxes: boxes.clone(),
        };
        let line = serde_json::to_string(&rec).expect("plain record serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(dir)
}

/// Reads a sequence directory written by [`save_sequence`].
///
/// Frame records must be numbered 0, 1, 2, … in order and every record
/// needs a matching PNG. Boxes must have positive area and lie inside the
/// frame.
pub fn load_sequence(dir: &Path) -> Result<VideoSequence> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if !ann_path.is_file() {
        return Err(Error::MissingFile(ann_path));
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let reader = BufReader::new(fs::File::open(&ann_path)?);
    let mut frames = Vec::new();
    let mut annotations = Vec::new();
    let format_err = |line: usize, message: String| Error::Format {
        path: ann_path.clone(),
        line,
        message,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| format_err(lineno, e.to_string()))?;
        if rec.frame != annotations.len() {
            return Err(format_err(
                lineno,
                format!("expected frame {}, found {}", annotations.len(), rec.frame),
            ));
        }
        let path = frame_path(dir, rec.frame);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let img = image::open(&path)?.to_rgb8();
        for b in &rec.boxes {
            if b.bbox.area() == 0 || b.bbox.width() < 0 || b.bbox.height() < 0 {
                return Err(format_err(lineno, format!("track {} has an empty box", b.track)));
            }
            if !b.bbox.inside(img.width(), img.height()) {
                return Err(format_err(
                    lineno,
                    format!(
                        "track {} box {:?} outside {}x{} frame",
                        b.track,
                        b.bbox,
                        img.width(),
                        img.height()
                    ),
                ));
            }
        }
        if let Some(first) = frames.first() {
            let first: &image::RgbImage = first;
            if first.dimensions() != img.dimensions() {
                return Err(format_err(lineno, "frame size differs from frame 0".into()));
            }
        }
        frames.push(img);
        annotations.push(rec.boxes);
    }
    Ok(VideoSequence {
        id,
        frames,
        annotations,
    })
}

/// Sequence directories under `root` (those holding an annotations file),
/// sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(ANNOTATIONS_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
