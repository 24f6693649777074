use std::path::Path;

use super::npy::{NpyArray, NpyData};
use super::npz::Npz;
use crate::bbox::Bbox;
use crate::error::{format_err, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageLayout {
    /// `H × W`
    Gray,
    /// `H × W × 3`
    Rgb,
    /// `D × H × W`
    Volume,
}

/// A box prompt in original pixel coordinates. Volume boxes also carry an
/// inclusive slice range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseBox {
    pub bbox: Bbox,
    pub z_range: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub layout: ImageLayout,
    /// Raw array shape as stored.
    pub shape: Vec<usize>,
    /// Intensities in storage order.
    pub image: Vec<f32>,
    /// Integer label map over the spatial shape (all slices for volumes).
    pub gts: Option<Vec<u32>>,
    pub boxes: Vec<CaseBox>,
    pub spacing: Option<Vec<f64>>,
    /// How many boxes had to be clipped to the image bounds.
    pub clipped_boxes: usize,
    /// Archive members that are neither imgs, gts, boxes nor spacing.
    pub extra_keys: Vec<String>,
}

fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Validation(msg.into()))
}

impl CaseRecord {
    pub fn height(&self) -> usize {
        match self.layout {
            ImageLayout::Volume => self.shape[1],
            _ => self.shape[0],
        }
    }

    pub fn width(&self) -> usize {
        match self.layout {
            ImageLayout::Volume => self.shape[2],
            _ => self.shape[1],
        }
    }

    /// Number of slices; 1 for 2-D images.
    pub fn depth(&self) -> usize {
        match self.layout {
            ImageLayout::Volume => self.shape[0],
            _ => 1,
        }
    }

    pub fn channels(&self) -> usize {
        if self.layout == ImageLayout::Rgb {
            3
        } else {
            1
        }
    }

    /// One 2-D plane as `[C, H, W]` data, where C is 1 or 3.
    pub fn plane_chw(&self, slice: usize) -> Result<Vec<f32>> {
        let (h, w) = (self.height(), self.width());
        match self.layout {
            ImageLayout::Gray => Ok(self.image.clone()),
            ImageLayout::Rgb => {
                let mut out = vec![0.0; 3 * h * w];
                for (p, px) in self.image.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        out[c * h * w + p] = px[c];
                    }
                }
                Ok(out)
            }
            ImageLayout::Volume => {
                if slice >= self.depth() {
                    return crate::error::contract(format!("slice {slice} out of range for depth {}", self.depth()));
                }
                Ok(self.image[slice * h * w..(slice + 1) * h * w].to_vec())
            }
        }
    }

    /// Labels of one slice (the whole map for 2-D cases).
    pub fn gt_plane(&self, slice: usize) -> Option<&[u32]> {
        let n = self.height() * self.width();
        let gts = self.gts.as_ref()?;
        gts.get(slice * n..(slice + 1) * n)
    }

    /// Binary target for box `i` on one plane. When the label map has one
    /// distinct non-zero label per box, box `i` takes the `i`-th smallest;
    /// otherwise every non-zero label counts.
    pub fn gt_mask_for_box(&self, i: usize, slice: usize) -> Option<Vec<u8>> {
        let plane = self.gt_plane(slice)?;
        let mut labels: Vec<u32> = self.gts.as_ref()?.iter().copied().filter(|&v| v != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        let target = (labels.len() == self.boxes.len() && labels.len() > 1).then(|| labels[i]);
        Some(
            plane
                .iter()
                .map(|&v| u8::from(v != 0 && target.is_none_or(|t| v == t)))
                .collect(),
        )
    }

    /// Builds a validated record from archive members.
    pub fn from_npz(id: impl Into<String>, npz: &Npz) -> Result<Self> {
        let id = id.into();
        let Some(imgs) = npz.get("imgs") else {
            return format_err(0, format!("case '{id}': missing 'imgs' entry"));
        };
        let layout = match imgs.shape.as_slice() {
            [_, _] => ImageLayout::Gray,
            [_, _, 3] => ImageLayout::Rgb,
            [_, _, _] => ImageLayout::Volume,
            s => return validation(format!("case '{id}': unsupported image shape {s:?}")),
        };
        if imgs.shape.iter().any(|&d| d == 0) {
            return validation(format!("case '{id}': empty image {:?}", imgs.shape));
        }
        let mut rec = CaseRecord {
            id,
            layout,
            shape: imgs.shape.clone(),
            image: imgs.data.to_f32(),
            gts: None,
            boxes: Vec::new(),
            spacing: npz.get("spacing").map(|s| s.data.to_f64()),
            clipped_boxes: 0,
            extra_keys: npz
                .arrays
                .keys()
                .filter(|k| !matches!(k.as_str(), "imgs" | "gts" | "boxes" | "spacing"))
                .cloned()
                .collect(),
        };
        if let Some(g) = npz.get("gts") {
            let spatial: Vec<usize> = match layout {
                ImageLayout::Rgb => rec.shape[..2].to_vec(),
                _ => rec.shape.clone(),
            };
            if g.shape != spatial {
                return validation(format!(
                    "case '{}': gts shape {:?} does not match image {:?}",
                    rec.id, g.shape, spatial
                ));
            }
            rec.gts = Some(labels(&rec.id, g)?);
        }
        if let Some(b) = npz.get("boxes") {
            rec.boxes = rec.parse_boxes(b)?;
        }
        Ok(rec)
    }

    fn parse_boxes(&mut self, b: &NpyArray) -> Result<Vec<CaseBox>> {
        let per = match (b.shape.as_slice(), self.layout) {
            ([4], _) | ([_, 4], _) => 4,
            ([6], ImageLayout::Volume) | ([_, 6], ImageLayout::Volume) => 6,
            (s, _) => return validation(format!("case '{}': unsupported boxes shape {s:?}", self.id)),
        };
        let v = b.data.to_f64();
        let (w, h, d) = (self.width() as f64, self.height() as f64, self.depth());
        let mut out = Vec::new();
        for raw in v.chunks_exact(per) {
            let (bbox, z) = if per == 4 {
                (Bbox::new(raw[0], raw[1], raw[2], raw[3]), None)
            } else {
                (Bbox::new(raw[0], raw[1], raw[3], raw[4]), Some((raw[2], raw[5])))
            };
            if !bbox.is_valid() {
                return validation(format!("case '{}': degenerate box {:?}", self.id, bbox.to_array()));
            }
            let clipped = Bbox::new(
                bbox.x_min.clamp(0.0, w),
                bbox.y_min.clamp(0.0, h),
                bbox.x_max.clamp(0.0, w),
                bbox.y_max.clamp(0.0, h),
            );
            if clipped != bbox {
                self.clipped_boxes += 1;
            }
            if !clipped.is_valid() {
                return validation(format!("case '{}': box {:?} lies outside the image", self.id, bbox.to_array()));
            }
            let z_range = match z {
                None => None,
                Some((z0, z1)) => {
                    if z1 < z0 || !z0.is_finite() || !z1.is_finite() {
                        return validation(format!("case '{}': degenerate slice range {z0}..{z1}", self.id));
                    }
                    let last = (d - 1) as f64;
                    Some((z0.clamp(0.0, last).floor() as usize, z1.clamp(0.0, last).ceil() as usize))
                }
            };
            out.push(CaseBox { bbox: clipped, z_range });
        }
        Ok(out)
    }

    /// Serializes back to the on-disk layout: imgs, optional gts (u8 when
    /// every label fits), boxes as f64 and optional spacing.
    pub fn to_npz(&self) -> Npz {
        let mut npz = Npz::new();
        let integral = self.image.iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v));
        let img = if integral {
            NpyData::U8(self.image.iter().map(|&v| v as u8).collect())
        } else {
            NpyData::F32(self.image.clone())
        };
        npz.insert("imgs", NpyArray::new(self.shape.clone(), img));
        if let Some(g) = &self.gts {
            let spatial = if self.layout == ImageLayout::Rgb { self.shape[..2].to_vec() } else { self.shape.clone() };
            let data = if g.iter().all(|&v| v <= 255) {
                NpyData::U8(g.iter().map(|&v| v as u8).collect())
            } else {
                NpyData::I64(g.iter().map(|&v| v as i64).collect())
            };
            npz.insert("gts", NpyArray::new(spatial, data));
        }
        if !self.boxes.is_empty() {
            let volume = self.boxes.iter().any(|b| b.z_range.is_some());
            let mut v = Vec::new();
            for b in &self.boxes {
                let a = b.bbox.to_array();
                match (volume, b.z_range) {
                    (true, z) => {
                        let (z0, z1) = z.unwrap_or((0, self.depth() - 1));
                        v.extend([a[0], a[1], z0 as f64, a[2], a[3], z1 as f64]);
                    }
                    (false, _) => v.extend(a),
                }
            }
            let per = if volume { 6 } else { 4 };
            npz.insert("boxes", NpyArray::new(vec![self.boxes.len(), per], NpyData::F64(v)));
        }
        if let Some(s) = &self.spacing {
            npz.insert("spacing", NpyArray::new(vec![s.len()], NpyData::F64(s.clone())));
        }
        npz
    }
}

fn labels(id: &str, g: &NpyArray) -> Result<Vec<u32>> {
    let bad = || validation(format!("case '{id}': gts must hold non-negative integer labels"));
    match &g.data {
        NpyData::U8(v) => Ok(v.iter().map(|&x| x as u32).collect()),
        NpyData::I64(v) => v.iter().map(|&x| u32::try_from(x).or_else(|_| bad())).collect(),
        other => other
            .to_f64()
            .into_iter()
            .map(|x| if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 { Ok(x as u32) } else { bad() })
            .collect(),
    }
}

/// Reads a case archive; the case id is the file stem.
pub fn read_case_npz(path: &Path) -> Result<CaseRecord> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    CaseRecord::from_npz(id, &Npz::read(path)?)
}

/// All `*.npz` files in a directory, sorted by name.
pub fn list_cases(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(crate::error::io_err(dir))?;
    let mut out: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "npz"))
        .collect();
    out.sort();
    Ok(out)
}
