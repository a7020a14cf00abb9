//! Dataset layout on disk, one directory per sequence:
//!
//! ```text
//! <dir>/meta            key=value lines, version first
//! <dir>/frames/%05d.ppm binary P6, 8-bit RGB
//! <dir>/annot.jsonl     one JSON record per (frame, person)
//! ```
//!
//! Reals are written as decimals with nine significant digits, so files
//! regenerate byte-identically from the same seed and survive a
//! save/load/save cycle unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{FrameAnnot, PersonAnnot, RenderedSequence, Result, SeqMeta, SynthError, NUM_JOINTS};
use crate::geometry::Camera;

/// Nine significant digits, plain decimal in ordinary magnitudes and
/// scientific form outside them. Formatting is applied twice when rounding
/// bumps the exponent (999.9999999 -> 1000.0), so the output re-formats to
/// itself after a parse.
pub fn fmt_g9(v: f64) -> String {
    fn once(v: f64) -> String {
        if v == 0.0 {
            return "0.0".into();
        }
        let mut e = v.abs().log10().floor() as i32;
        let lead = v.abs() / 10f64.powi(e);
        if lead >= 10.0 {
            e += 1;
        } else if lead < 1.0 {
            e -= 1;
        }
        if !(-5..=8).contains(&e) {
            return format!("{:.8e}", v);
        }
        format!("{:.*}", (8 - e).max(0) as usize, v)
    }
    let first = once(v);
    let reparsed: f64 = first.parse().expect("own float format");
    if reparsed == v {
        first
    } else {
        once(reparsed)
    }
}

fn write_meta(meta: &SeqMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version={}", meta.version);
    let _ = writeln!(s, "fps={}", fmt_g9(meta.fps));
    let _ = writeln!(s, "width={}", meta.width);
    let _ = writeln!(s, "height={}", meta.height);
    let _ = writeln!(s, "frames={}", meta.frames);
    let _ = writeln!(s, "fx={}", fmt_g9(meta.cam.fx));
    let _ = writeln!(s, "fy={}", fmt_g9(meta.cam.fy));
    let _ = writeln!(s, "cx={}", fmt_g9(meta.cam.cx));
    let _ = writeln!(s, "cy={}", fmt_g9(meta.cam.cy));
    let _ = writeln!(s, "seed={}", meta.seed);
    s
}

fn annot_line(frame: usize, a: &PersonAnnot) -> String {
    let mut s = format!(
        "{{\"frame\":{},\"person\":{},\"present\":{},\"joints\":[",
        frame, a.person, a.present
    );
    for (k, j) in a.joints.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "[{},{},{}]", fmt_g9(j[0]), fmt_g9(j[1]), fmt_g9(j[2]));
    }
    s.push_str("],\"vis\":[");
    for (k, &v) in a.vis.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        s.push(if v { '1' } else { '0' });
    }
    s.push_str("]}");
    s
}

pub fn save(seq: &RenderedSequence, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    fs::write(dir.join("meta"), write_meta(&seq.meta))?;

    for (t, frame) in seq.frames.iter().enumerate() {
        let mut ppm = format!("P6\n{} {}\n255\n", seq.meta.width, seq.meta.height).into_bytes();
        ppm.extend_from_slice(frame);
        fs::write(frames_dir.join(format!("{t:05}.ppm")), ppm)?;
    }

    let mut annot = String::new();
    for (t, frame) in seq.annots.iter().enumerate() {
        for a in frame {
            annot.push_str(&annot_line(t, a));
            annot.push('\n');
        }
    }
    fs::write(dir.join("annot.jsonl"), annot)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SynthError {
    SynthError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_meta(path: &Path) -> Result<SeqMeta> {
    let text = fs::read_to_string(path)?;
    let mut meta = SeqMeta {
        version: 0,
        fps: 0.0,
        width: 0,
        height: 0,
        frames: 0,
        cam: Camera {
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
        },
        seed: 0,
    };
    let mut seen_version = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| parse_err(path, line, "expected key=value"))?;
        let bad = |what: &str| parse_err(path, line, format!("bad {what}: {value}"));
        match key {
            "version" => {
                meta.version = value.parse().map_err(|_| bad("version"))?;
                seen_version = true;
                if meta.version != 1 {
                    return Err(SynthError::Version(meta.version));
                }
            }
            "fps" => meta.fps = value.parse().map_err(|_| bad("fps"))?,
            "width" => meta.width = value.parse().map_err(|_| bad("width"))?,
            "height" => meta.height = value.parse().map_err(|_| bad("height"))?,
            "frames" => meta.frames = value.parse().map_err(|_| bad("frames"))?,
            "fx" => meta.cam.fx = value.parse().map_err(|_| bad("fx"))?,
            "fy" => meta.cam.fy = value.parse().map_err(|_| bad("fy"))?,
            "cx" => meta.cam.cx = value.parse().map_err(|_| bad("cx"))?,
            "cy" => meta.cam.cy = value.parse().map_err(|_| bad("cy"))?,
            "seed" => meta.seed = value.parse().map_err(|_| bad("seed"))?,
            other => return Err(parse_err(path, line, format!("unknown key {other}"))),
        }
    }
    if !seen_version {
        return Err(parse_err(path, 1, "missing version"));
    }
    if meta.width == 0 || meta.height == 0 || meta.frames == 0 {
        return Err(parse_err(path, 1, "incomplete meta"));
    }
    Ok(meta)
}

fn read_ppm(path: &Path, w: usize, h: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let header = format!("P6\n{w} {h}\n255\n").into_bytes();
    if bytes.len() < header.len() || bytes[..header.len()] != header[..] {
        return Err(parse_err(path, 1, "unexpected ppm header"));
    }
    let body = &bytes[header.len()..];
    if body.len() != w * h * 3 {
        return Err(parse_err(
            path,
            0,
            format!("{} pixel bytes, expected {}", body.len(), w * h * 3),
        ));
    }
    Ok(body.to_vec())
}

#[derive(Deserialize)]
struct AnnotLine {
    frame: usize,
    person: usize,
    present: bool,
    joints: Vec<[f64; 3]>,
    vis: Vec<u8>,
}

pub fn load(dir: &Path) -> Result<RenderedSequence> {
    let meta = read_meta(&dir.join("meta"))?;
    let mut frames = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        frames.push(read_ppm(
            &dir.join("frames").join(format!("{t:05}.ppm")),
            meta.width,
            meta.height,
        )?);
    }

    let annot_path = dir.join("annot.jsonl");
    let text = fs::read_to_string(&annot_path)?;
    let mut annots: Vec<FrameAnnot> = vec![Vec::new(); meta.frames];
    let mut expect_frame = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let rec: AnnotLine = serde_json::from_str(raw)
            .map_err(|e| parse_err(&annot_path, line, e.to_string()))?;
        if rec.frame >= meta.frames {
            return Err(parse_err(&annot_path, line, "frame out of range"));
        }
        if rec.joints.len() != NUM_JOINTS || rec.vis.len() != NUM_JOINTS {
            return Err(parse_err(&annot_path, line, "wrong joint count"));
        }
        if rec.frame != expect_frame && rec.frame != expect_frame + 1 {
            return Err(parse_err(&annot_path, line, "records out of order"));
        }
        expect_frame = rec.frame;
        let fa = &mut annots[rec.frame];
        if rec.person != fa.len() {
            return Err(parse_err(&annot_path, line, "records out of order"));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        joints.copy_from_slice(&rec.joints);
        let mut vis = [false; NUM_JOINTS];
        for (v, &b) in vis.iter_mut().zip(&rec.vis) {
            *v = b != 0;
        }
        fa.push(PersonAnnot {
            person: rec.person,
            present: rec.present,
            joints,
            vis,
        });
    }
    let people = annots.first().map_or(0, Vec::len);
    if annots.iter().any(|f| f.len() != people) {
        return Err(parse_err(&annot_path, 0, "uneven person count per frame"));
    }
    Ok(RenderedSequence {
        meta,
        frames,
        annots,
    })
}
