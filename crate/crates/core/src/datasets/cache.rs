//! Binary scene cache.
//!
//! ```text
//! "UBBRSCN1"
//! u64 scene count
//! per scene:
//!   u64 id length, id bytes (UTF-8)
//!   f64 width, f64 height
//!   u64 box count, then x y w h as f64 per box
//!   u8 has categories, then one i64 per box
//!   u8 has features, then u64 width, u64 height, u64 channels, f64 stride, f64 data
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::Scene;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::io::{atomic_write, put_f64, put_u64, read_all, ByteReader};
use crate::regressor::FeatureMap;

pub const SCENE_CACHE_MAGIC: &[u8; 8] = b"UBBRSCN1";

pub fn write_scene_cache(scenes: &[Scene], path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(SCENE_CACHE_MAGIC)?;
        put_u64(w, scenes.len() as u64)?;
        for s in scenes {
            put_u64(w, s.id.len() as u64)?;
            w.write_all(s.id.as_bytes())?;
            put_f64(w, s.width)?;
            put_f64(w, s.height)?;
            put_u64(w, s.gts.len() as u64)?;
            for g in &s.gts {
                for v in [g.x, g.y, g.w, g.h] {
                    put_f64(w, v)?;
                }
            }
            match &s.categories {
                Some(cats) => {
                    if cats.len() != s.gts.len() {
                        return Err(Error::Format(format!("scene {}: category count mismatch", s.id)));
                    }
                    w.write_all(&[1])?;
                    for c in cats {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
                None => w.write_all(&[0])?,
            }
            match &s.features {
                Some(fm) => {
                    w.write_all(&[1])?;
                    put_u64(w, fm.width() as u64)?;
                    put_u64(w, fm.height() as u64)?;
                    put_u64(w, fm.channels() as u64)?;
                    put_f64(w, fm.stride())?;
                    for &v in fm.data() {
                        put_f64(w, v)?;
                    }
                }
                None => w.write_all(&[0])?,
            }
        }
        Ok(())
    })
}

pub fn read_scene_cache(path: &Path) -> Result<Vec<Scene>> {
    let buf = read_all(path)?;
    let mut r = ByteReader::new(&buf);
    if r.take(SCENE_CACHE_MAGIC.len())? != SCENE_CACHE_MAGIC {
        return Err(Error::Format(format!("{}: not a scene cache", path.display())));
    }
    let count = r.len(1)?;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.len(1)?;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let width = r.f64()?;
        let height = r.f64()?;
        let n = r.len(32)?;
        let mut gts = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y, w, h) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            gts.push(BBox::new(x, y, w, h)?);
        }
        let categories = match r.u8()? {
            0 => None,
            1 => Some((0..n).map(|_| r.i64()).collect::<Result<Vec<_>>>()?),
            t => return Err(Error::Format(format!("bad category tag {t}"))),
        };
        let features = match r.u8()? {
            0 => None,
            1 => {
                let fw = r.u64()? as usize;
                let fh = r.u64()? as usize;
                let fc = r.u64()? as usize;
                let stride = r.f64()?;
                let cells = fw
                    .checked_mul(fh)
                    .and_then(|v| v.checked_mul(fc))
                    .ok_or_else(|| Error::Format("feature map size overflow".into()))?;
                let bytes = r.take(cells.checked_mul(8).ok_or_else(|| Error::Format("feature map size overflow".into()))?)?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Some(FeatureMap::from_data(fw, fh, fc, stride, data)?)
            }
            t => return Err(Error::Format(format!("bad feature tag {t}"))),
        };
        scenes.push(Scene {
            id,
            width,
            height,
            gts,
            categories,
            features,
        });
    }
    r.finish()?;
    Ok(scenes)
}
