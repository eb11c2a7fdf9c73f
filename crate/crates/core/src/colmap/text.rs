use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use super::{
    Camera, CameraModel, ColmapError, ImageRecord, Observation, Point3D, Result, TrackElement,
};

/// Non-comment lines with their 1-based line number and byte offset. Blank
/// lines are kept: an image without observations has an empty second line.
fn data_lines(bytes: &[u8]) -> Vec<(usize, usize, &str)> {
    let mut segments: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, raw) in segments.into_iter().enumerate() {
        let line = std::str::from_utf8(raw).unwrap_or("").trim_end_matches('\r');
        if !line.trim_start().starts_with('#') {
            out.push((i + 1, offset, line));
        }
        offset += raw.len() + 1;
    }
    out
}

fn non_blank(bytes: &[u8]) -> impl Iterator<Item = (usize, usize, &str)> {
    data_lines(bytes)
        .into_iter()
        .filter(|(_, _, l)| !l.trim().is_empty())
}

struct Fields<'a> {
    iter: std::str::SplitWhitespace<'a>,
    file: &'a Path,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(text: &'a str, file: &'a Path, line: usize) -> Self {
        Self {
            iter: text.split_whitespace(),
            file,
            line,
        }
    }

    fn malformed(&self, message: String) -> ColmapError {
        ColmapError::Malformed {
            file: self.file.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .iter
            .next()
            .ok_or_else(|| self.malformed(format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| self.malformed(format!("invalid {what} '{tok}'")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.iter.by_ref().collect()
    }
}

fn duplicate(file: &Path, id: u64) -> ColmapError {
    ColmapError::DuplicateId {
        file: file.to_path_buf(),
        id,
    }
}

pub(super) fn decode_cameras(bytes: &[u8], file: &Path) -> Result<IndexMap<u32, Camera>> {
    let mut out = IndexMap::new();
    for (line, _, text) in non_blank(bytes) {
        let mut f = Fields::new(text, file, line);
        let camera_id: u32 = f.next("camera id")?;
        let model_name: String = f.next("model")?;
        let model = CameraModel::from_name(&model_name).ok_or_else(|| {
            ColmapError::UnknownCameraModel {
                file: file.to_path_buf(),
                camera_id,
                model: model_name.clone(),
            }
        })?;
        let width = f.next("width")?;
        let height = f.next("height")?;
        let params = (0..model.num_params())
            .map(|_| f.next::<f64>("parameter"))
            .collect::<Result<Vec<_>>>()?;
        if !f.rest().is_empty() {
            return Err(f.malformed("too many camera parameters".into()));
        }
        let cam = Camera {
            camera_id,
            model,
            width,
            height,
            params,
        };
        cam.check().map_err(|reason| ColmapError::InvalidCamera {
            file: file.to_path_buf(),
            camera_id,
            reason,
        })?;
        if out.insert(camera_id, cam).is_some() {
            return Err(duplicate(file, camera_id as u64));
        }
    }
    Ok(out)
}

pub(super) fn decode_images(bytes: &[u8], file: &Path) -> Result<IndexMap<u32, ImageRecord>> {
    let lines = data_lines(bytes);
    let mut out = IndexMap::new();
    let mut it = lines.into_iter();
    while let Some((line, offset, header)) = it.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(header, file, line);
        let image_id: u32 = f.next("image id")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = f.next("quaternion")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = f.next("translation")?;
        }
        let camera_id = f.next("camera id")?;
        let name = f.rest().join(" ");
        if name.is_empty() {
            return Err(f.malformed("missing image name".into()));
        }
        let Some((pline, _, points)) = it.next() else {
            return Err(ColmapError::TruncatedRecord {
                file: file.to_path_buf(),
                offset: offset as u64,
            });
        };
        let toks: Vec<&str> = points.split_whitespace().collect();
        let pf = Fields::new("", file, pline);
        if toks.len() % 3 != 0 {
            return Err(pf.malformed("observation list is not a multiple of 3".into()));
        }
        let mut observations = Vec::with_capacity(toks.len() / 3);
        for chunk in toks.chunks(3) {
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| pf.malformed(format!("invalid coordinate '{s}'")))
            };
            let id: i64 = chunk[2]
                .parse()
                .map_err(|_| pf.malformed(format!("invalid point id '{}'", chunk[2])))?;
            observations.push(Observation {
                x: parse_f(chunk[0])?,
                y: parse_f(chunk[1])?,
                point3d_id: (id >= 0).then_some(id as u64),
            });
        }
        let img = ImageRecord {
            image_id,
            camera_id,
            qvec,
            tvec,
            name,
            observations,
        };
        if out.insert(image_id, img).is_some() {
            return Err(duplicate(file, image_id as u64));
        }
    }
    Ok(out)
}

pub(super) fn decode_points(bytes: &[u8], file: &Path) -> Result<IndexMap<u64, Point3D>> {
    let mut out = IndexMap::new();
    for (line, _, text) in non_blank(bytes) {
        let mut f = Fields::new(text, file, line);
        let point_id: u64 = f.next("point id")?;
        let xyz = [f.next("x")?, f.next("y")?, f.next("z")?];
        let color = [f.next("r")?, f.next("g")?, f.next("b")?];
        let error = f.next("error")?;
        let rest = f.rest();
        if rest.len() % 2 != 0 {
            return Err(f.malformed("track list is not a multiple of 2".into()));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let parse = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| f.malformed(format!("invalid track entry '{s}'")))
            };
            track.push(TrackElement {
                image_id: parse(pair[0])?,
                point2d_idx: parse(pair[1])?,
            });
        }
        let p = Point3D {
            point_id,
            xyz,
            color,
            error,
            track,
        };
        if out.insert(point_id, p).is_some() {
            return Err(duplicate(file, point_id));
        }
    }
    Ok(out)
}

// `{}` on f64 prints the shortest representation that parses back exactly.

pub(super) fn encode_cameras(cameras: &IndexMap<u32, Camera>) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("# Camera list with one line of data per camera:\n");
    s.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(s, "# Number of cameras: {}", cameras.len());
    for c in cameras.values() {
        let _ = write!(s, "{} {} {} {}", c.camera_id, c.model.name(), c.width, c.height);
        for p in &c.params {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
    }
    s.into_bytes()
}

pub(super) fn encode_images(images: &IndexMap<u32, ImageRecord>) -> Vec<u8> {
    let mut s = String::new();
    let n_obs: usize = images.values().map(|i| i.observations.len()).sum();
    let mean = if images.is_empty() {
        0.0
    } else {
        n_obs as f64 / images.len() as f64
    };
    s.push_str("# Image list with two lines of data per image:\n");
    s.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    s.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(
        s,
        "# Number of images: {}, mean observations per image: {mean}",
        images.len()
    );
    for img in images.values() {
        let [qw, qx, qy, qz] = img.qvec;
        let [tx, ty, tz] = img.tvec;
        let _ = writeln!(
            s,
            "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}",
            img.image_id, img.camera_id, img.name
        );
        let mut first = true;
        for o in &img.observations {
            if !first {
                s.push(' ');
            }
            first = false;
            let id = o.point3d_id.map(|v| v as i64).unwrap_or(-1);
            let _ = write!(s, "{} {} {id}", o.x, o.y);
        }
        s.push('\n');
    }
    s.into_bytes()
}

pub(super) fn encode_points(points: &IndexMap<u64, Point3D>) -> Vec<u8> {
    let mut s = String::new();
    let track_sum: usize = points.values().map(|p| p.track.len()).sum();
    let mean = if points.is_empty() {
        0.0
    } else {
        track_sum as f64 / points.len() as f64
    };
    s.push_str("# 3D point list with one line of data per point:\n");
    s.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(
        s,
        "# Number of points: {}, mean track length: {mean}",
        points.len()
    );
    for p in points.values() {
        let [x, y, z] = p.xyz;
        let [r, g, b] = p.color;
        let _ = write!(s, "{} {x} {y} {z} {r} {g} {b} {}", p.point_id, p.error);
        for t in &p.track {
            let _ = write!(s, " {} {}", t.image_id, t.point2d_idx);
        }
        s.push('\n');
    }
    s.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_model;
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = tiny_model();
        let file = Path::new("x.txt");
        assert_eq!(decode_cameras(&encode_cameras(&m.cameras), file).unwrap(), m.cameras);
        assert_eq!(decode_images(&encode_images(&m.images), file).unwrap(), m.images);
        assert_eq!(decode_points(&encode_points(&m.points), file).unwrap(), m.points);
    }

    #[test]
    fn image_without_points_line_is_truncated() {
        let text = b"# header\n1 1 0 0 0 0 0 0 1 a.jpg\n50 40 7\n2 1 0 0 0 0 0 0 1 b.jpg";
        let err = decode_images(text, Path::new("images.txt")).unwrap_err();
        let expected = "# header\n1 1 0 0 0 0 0 0 1 a.jpg\n50 40 7\n".len() as u64;
        assert!(matches!(err, ColmapError::TruncatedRecord { offset, .. } if offset == expected));
    }

    #[test]
    fn image_with_no_observations_keeps_empty_line() {
        let text = b"1 1 0 0 0 0 0 0 1 a.jpg\n\n2 1 0 0 0 0 0 0 1 b.jpg\n1 2 -1\n";
        let imgs = decode_images(text, Path::new("images.txt")).unwrap();
        assert_eq!(imgs.len(), 2);
        assert!(imgs[0].observations.is_empty());
        assert_eq!(imgs[1].observations[0].point3d_id, None);
    }

    #[test]
    fn unknown_model_name() {
        let err = decode_cameras(b"4 WEIRD 10 10 1 2 3\n", Path::new("cameras.txt")).unwrap_err();
        assert!(matches!(err, ColmapError::UnknownCameraModel { camera_id: 4, .. }));
    }
}
