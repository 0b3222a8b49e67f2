//! Volumes, slice samples, and the preprocessing pipeline.
//!
//! A [`Volume`] is a stack of co-registered intensity slices and binary
//! masks. Preparation for training resizes every slice to the working
//! resolution, normalizes intensities over the volume's non-zero pixels,
//! and restricts sampling to slices whose (resized) mask clears a presence
//! threshold. Volumes are immutable once prepared and safe to share across
//! threads.

pub mod io;
pub mod synth;

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// A single organ volume: `depth` slices of `height`x`width` intensities
/// with aligned binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dataset_id: String,
    pub volume_id: u32,
    /// Modality count of the parent organ (shared by sibling datasets).
    pub z: u16,
    depth: usize,
    height: usize,
    width: usize,
    intensities: Vec<f32>,
    masks: Vec<u8>,
}

impl Volume {
    pub fn new(
        dataset_id: String,
        volume_id: u32,
        z: u16,
        dims: (usize, usize, usize),
        intensities: Vec<f32>,
        masks: Vec<u8>,
    ) -> Result<Self> {
        let (depth, height, width) = dims;
        let n = depth * height * width;
        if intensities.len() != n || masks.len() != n {
            return Err(Error::Dimension(format!(
                "volume {dataset_id}/{volume_id}: {}x{}x{} needs {n} pixels, got {} intensities and {} mask bytes",
                depth, height, width,
                intensities.len(),
                masks.len()
            )));
        }
        if z == 0 {
            return Err(Error::Data(format!(
                "volume {dataset_id}/{volume_id}: modality count must be at least 1"
            )));
        }
        if let Some(bad) = masks.iter().find(|&&m| m > 1) {
            return Err(Error::Data(format!(
                "volume {dataset_id}/{volume_id}: mask byte {bad} is not 0 or 1"
            )));
        }
        Ok(Self { dataset_id, volume_id, z, depth, height, width, intensities, masks })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    fn plane(&self, slice: usize) -> std::ops::Range<usize> {
        let area = self.height * self.width;
        slice * area..(slice + 1) * area
    }

    /// Number of object pixels in one mask slice.
    pub fn mask_pixels(&self, slice: usize) -> usize {
        self.masks[self.plane(slice)].iter().map(|&m| m as usize).sum()
    }

    /// Extract one slice as a training sample.
    pub fn sample(&self, slice: usize) -> Result<SliceSample> {
        if slice >= self.depth {
            return Err(Error::Dimension(format!(
                "slice {slice} out of range for depth {}",
                self.depth
            )));
        }
        let r = self.plane(slice);
        let image =
            Tensor::new(vec![1, self.height, self.width], self.intensities[r.clone()].to_vec())?;
        let mask = Tensor::new(
            vec![1, self.height, self.width],
            self.masks[r].iter().map(|&m| m as f32).collect(),
        )?;
        Ok(SliceSample { image, mask, volume_id: self.volume_id, slice_index: slice })
    }
}

/// One image/mask pair cut from a volume.
#[derive(Clone, Debug)]
pub struct SliceSample {
    /// Intensities, shape `[1, H, W]`.
    pub image: Tensor<f32>,
    /// Binary mask with values in {0, 1}, shape `[1, H, W]`.
    pub mask: Tensor<f32>,
    pub volume_id: u32,
    pub slice_index: usize,
}

/// A named collection of volumes plus its sampling metadata.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    /// Organ family the dataset belongs to; sibling modalities share it.
    pub family: String,
    pub z: u16,
    /// Presence threshold in pixels at the working resolution.
    pub threshold: u32,
    pub volumes: Vec<Volume>,
}

impl Dataset {
    /// Eligible slice indices of one volume under this dataset's threshold.
    pub fn eligible_slices(&self, volume: &Volume) -> Vec<usize> {
        presence_filter(volume, self.threshold as usize)
    }
}

/// Normalize intensities: compute mean and population standard deviation
/// over the volume's non-zero pixels, then apply `(x - mean) / std` to
/// every pixel.
///
/// Statistics over non-zero pixels keep the (typically large, exactly-zero)
/// exterior from drowning out the anatomy; the affine map is still applied
/// globally so the image stays smooth.
pub fn normalize_volume(v: Volume) -> Result<Volume> {
    let nonzero: Vec<f64> =
        v.intensities.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
    if nonzero.len() < 2 {
        return Err(Error::Degenerate(format!(
            "volume {}/{}: {} non-zero pixels, need at least 2 to normalize",
            v.dataset_id,
            v.volume_id,
            nonzero.len()
        )));
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Degenerate(format!(
            "volume {}/{}: non-zero pixels are all equal ({mean}), zero variance",
            v.dataset_id, v.volume_id
        )));
    }
    let std = var.sqrt();
    let mut out = v;
    for x in &mut out.intensities {
        *x = ((*x as f64 - mean) / std) as f32;
    }
    Ok(out)
}

/// Indices of slices whose mask holds at least `threshold` object pixels.
///
/// Callers apply this to volumes already at the working resolution; a mask
/// that thins out under downscaling is judged by what survives the resize.
pub fn presence_filter(v: &Volume, threshold: usize) -> Vec<usize> {
    (0..v.depth).filter(|&s| v.mask_pixels(s) >= threshold).collect()
}

/// Map an output pixel index to its source coordinate under the
/// half-pixel-center convention.
fn src_coord(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

fn bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize, out: &mut Vec<f32>) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y = src_coord(oy, sy).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for ox in 0..ow {
            let x = src_coord(ox, sx).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let p00 = src[y0 * w + x0] as f64;
            let p01 = src[y0 * w + x1] as f64;
            let p10 = src[y1 * w + x0] as f64;
            let p11 = src[y1 * w + x1] as f64;
            let top = p00 * (1.0 - fx) + p01 * fx;
            let bot = p10 * (1.0 - fx) + p11 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
}

fn nearest_plane(src: &[u8], h: usize, w: usize, oh: usize, ow: usize, out: &mut Vec<u8>) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y = (src_coord(oy, sy).round().max(0.0) as usize).min(h - 1);
        for ox in 0..ow {
            let x = (src_coord(ox, sx).round().max(0.0) as usize).min(w - 1);
            out.push(src[y * w + x]);
        }
    }
}

/// Resize a sample: bilinear interpolation for the image, nearest neighbor
/// for the mask (which therefore stays binary).
pub fn resize_sample(s: &SliceSample, oh: usize, ow: usize) -> Result<SliceSample> {
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension("resize target must be at least 1x1".into()));
    }
    let shape = s.image.shape();
    let (h, w) = (shape[1], shape[2]);
    if (h, w) == (oh, ow) {
        return Ok(s.clone());
    }
    let mut image = Vec::with_capacity(oh * ow);
    bilinear_plane(s.image.data(), h, w, oh, ow, &mut image);
    let src_mask: Vec<u8> = s.mask.data().iter().map(|&m| m as u8).collect();
    let mut mask = Vec::with_capacity(oh * ow);
    nearest_plane(&src_mask, h, w, oh, ow, &mut mask);
    Ok(SliceSample {
        image: Tensor::new(vec![1, oh, ow], image)?,
        mask: Tensor::new(vec![1, oh, ow], mask.into_iter().map(|m| m as f32).collect())?,
        volume_id: s.volume_id,
        slice_index: s.slice_index,
    })
}

/// Resize every slice of a volume.
pub fn resize_volume(v: &Volume, oh: usize, ow: usize) -> Result<Volume> {
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension("resize target must be at least 1x1".into()));
    }
    if (v.height, v.width) == (oh, ow) {
        return Ok(v.clone());
    }
    let mut intensities = Vec::with_capacity(v.depth * oh * ow);
    let mut masks = Vec::with_capacity(v.depth * oh * ow);
    for s in 0..v.depth {
        let r = v.plane(s);
        bilinear_plane(&v.intensities[r.clone()], v.height, v.width, oh, ow, &mut intensities);
        nearest_plane(&v.masks[r], v.height, v.width, oh, ow, &mut masks);
    }
    Volume::new(
        v.dataset_id.clone(),
        v.volume_id,
        v.z,
        (v.depth, oh, ow),
        intensities,
        masks,
    )
}

/// Full preprocessing for one volume: resize to the working resolution,
/// then normalize intensities there.
pub fn prepare_volume(v: &Volume, oh: usize, ow: usize) -> Result<Volume> {
    normalize_volume(resize_volume(v, oh, ow)?)
}

/// Preprocess every volume of every dataset.
pub fn prepare_datasets(datasets: &[Dataset], oh: usize, ow: usize) -> Result<Vec<Dataset>> {
    datasets
        .iter()
        .map(|d| {
            let volumes =
                d.volumes.iter().map(|v| prepare_volume(v, oh, ow)).collect::<Result<Vec<_>>>()?;
            Ok(Dataset { id: d.id.clone(), family: d.family.clone(), z: d.z, threshold: d.threshold, volumes })
        })
        .collect()
}
