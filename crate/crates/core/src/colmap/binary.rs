use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use indexmap::IndexMap;

use super::{
    Camera, CameraModel, ColmapError, ImageRecord, Observation, Point3D, Result, TrackElement,
};

const INVALID_POINT3D: u64 = u64::MAX;

/// Smallest on-disk sizes, used to bound allocations by the bytes actually present.
const MIN_CAMERA: usize = 4 + 4 + 8 + 8;
const MIN_IMAGE: usize = 4 + 7 * 8 + 4 + 1 + 8;
const MIN_POINT: usize = 8 + 3 * 8 + 3 + 8 + 8;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record_start: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], file: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            record_start: 0,
            file,
        }
    }

    fn begin_record(&mut self) {
        self.record_start = self.pos;
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ColmapError::TruncatedRecord {
                file: self.file.to_path_buf(),
                offset: self.record_start as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(LittleEndian::read_i32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn cstr(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == 0) else {
            return Err(ColmapError::TruncatedRecord {
                file: self.file.to_path_buf(),
                offset: self.record_start as u64,
            });
        };
        let s = String::from_utf8_lossy(&rest[..end]).into_owned();
        self.pos += end + 1;
        Ok(s)
    }

    fn capacity(&self, count: u64, min_size: usize) -> usize {
        let fit = (self.bytes.len() - self.pos) / min_size;
        (count as usize).min(fit)
    }

    fn finish(self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest > 0 {
            return Err(ColmapError::TrailingBytes {
                file: self.file.to_path_buf(),
                count: rest,
            });
        }
        Ok(())
    }
}

fn duplicate(file: &Path, id: u64) -> ColmapError {
    ColmapError::DuplicateId {
        file: file.to_path_buf(),
        id,
    }
}

pub(super) fn decode_cameras(bytes: &[u8], file: &Path) -> Result<IndexMap<u32, Camera>> {
    let mut r = Reader::new(bytes, file);
    let count = r.u64()?;
    let mut out = IndexMap::with_capacity(r.capacity(count, MIN_CAMERA));
    for _ in 0..count {
        r.begin_record();
        let camera_id = r.u32()?;
        let model_id = r.i32()?;
        let width = r.u64()?;
        let height = r.u64()?;
        let model = CameraModel::from_id(model_id).ok_or_else(|| ColmapError::UnknownCameraModel {
            file: file.to_path_buf(),
            camera_id,
            model: model_id.to_string(),
        })?;
        let params = (0..model.num_params())
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
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
    r.finish()?;
    Ok(out)
}

pub(super) fn decode_images(bytes: &[u8], file: &Path) -> Result<IndexMap<u32, ImageRecord>> {
    let mut r = Reader::new(bytes, file);
    let count = r.u64()?;
    let mut out = IndexMap::with_capacity(r.capacity(count, MIN_IMAGE));
    for _ in 0..count {
        r.begin_record();
        let image_id = r.u32()?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = r.f64()?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = r.f64()?;
        }
        let camera_id = r.u32()?;
        let name = r.cstr()?;
        let n_obs = r.u64()?;
        let mut observations = Vec::with_capacity(r.capacity(n_obs, 24));
        for _ in 0..n_obs {
            let x = r.f64()?;
            let y = r.f64()?;
            let id = r.u64()?;
            observations.push(Observation {
                x,
                y,
                point3d_id: (id != INVALID_POINT3D).then_some(id),
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
    r.finish()?;
    Ok(out)
}

pub(super) fn decode_points(bytes: &[u8], file: &Path) -> Result<IndexMap<u64, Point3D>> {
    let mut r = Reader::new(bytes, file);
    let count = r.u64()?;
    let mut out = IndexMap::with_capacity(r.capacity(count, MIN_POINT));
    for _ in 0..count {
        r.begin_record();
        let point_id = r.u64()?;
        let xyz = [r.f64()?, r.f64()?, r.f64()?];
        let color = [r.u8()?, r.u8()?, r.u8()?];
        let error = r.f64()?;
        let len = r.u64()?;
        let mut track = Vec::with_capacity(r.capacity(len, 8));
        for _ in 0..len {
            track.push(TrackElement {
                image_id: r.u32()?,
                point2d_idx: r.u32()?,
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
    r.finish()?;
    Ok(out)
}

// Writes into a Vec<u8> cannot fail.
pub(super) fn encode_cameras(cameras: &IndexMap<u32, Camera>) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(cameras.len() as u64).unwrap();
    for c in cameras.values() {
        w.write_u32::<LittleEndian>(c.camera_id).unwrap();
        w.write_i32::<LittleEndian>(c.model.id()).unwrap();
        w.write_u64::<LittleEndian>(c.width).unwrap();
        w.write_u64::<LittleEndian>(c.height).unwrap();
        for p in &c.params {
            w.write_f64::<LittleEndian>(*p).unwrap();
        }
    }
    w
}

pub(super) fn encode_images(images: &IndexMap<u32, ImageRecord>) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(images.len() as u64).unwrap();
    for img in images.values() {
        w.write_u32::<LittleEndian>(img.image_id).unwrap();
        for q in img.qvec {
            w.write_f64::<LittleEndian>(q).unwrap();
        }
        for t in img.tvec {
            w.write_f64::<LittleEndian>(t).unwrap();
        }
        w.write_u32::<LittleEndian>(img.camera_id).unwrap();
        w.extend_from_slice(img.name.as_bytes());
        w.push(0);
        w.write_u64::<LittleEndian>(img.observations.len() as u64)
            .unwrap();
        for o in &img.observations {
            w.write_f64::<LittleEndian>(o.x).unwrap();
            w.write_f64::<LittleEndian>(o.y).unwrap();
            w.write_u64::<LittleEndian>(o.point3d_id.unwrap_or(INVALID_POINT3D))
                .unwrap();
        }
    }
    w
}

pub(super) fn encode_points(points: &IndexMap<u64, Point3D>) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(points.len() as u64).unwrap();
    for p in points.values() {
        w.write_u64::<LittleEndian>(p.point_id).unwrap();
        for v in p.xyz {
            w.write_f64::<LittleEndian>(v).unwrap();
        }
        w.extend_from_slice(&p.color);
        w.write_f64::<LittleEndian>(p.error).unwrap();
        w.write_u64::<LittleEndian>(p.track.len() as u64).unwrap();
        for t in &p.track {
            w.write_u32::<LittleEndian>(t.image_id).unwrap();
            w.write_u32::<LittleEndian>(t.point2d_idx).unwrap();
        }
    }
    w
}
