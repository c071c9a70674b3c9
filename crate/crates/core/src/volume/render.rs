use std::collections::BTreeMap;

use image::RgbaImage;

use super::{IntensityVolume, LabelVolume, Result, VolumeError};

pub type Rgba = [u8; 4];

/// A label map drawn over the grayscale slice; labels without a colour are
/// left transparent.
#[derive(Debug, Clone)]
pub struct Overlay<'a> {
    pub labels: &'a LabelVolume,
    pub palette: BTreeMap<u32, Rgba>,
}

/// Default tumour colours: necrosis red, edema yellow, enhancing green.
pub fn brats_palette(ncr: u32, ed: u32, et: u32) -> BTreeMap<u32, Rgba> {
    BTreeMap::from([
        (ncr, [230, 40, 40, 255]),
        (ed, [240, 220, 40, 255]),
        (et, [40, 200, 80, 255]),
    ])
}

pub fn midline_palette(label: u32, color: Rgba) -> BTreeMap<u32, Rgba> {
    BTreeMap::from([(label, color)])
}

/// Renders axial slice `z` as an `nx × ny` RGBA image; pixel (x, y) shows
/// voxel (x, y, z). Intensities are windowed linearly to [0, 255].
pub fn render_axial_slice(
    vol: &IntensityVolume,
    z: usize,
    window: (f64, f64),
    overlays: &[Overlay<'_>],
) -> Result<RgbaImage> {
    let [nx, ny, nz] = vol.dims();
    if z >= nz {
        return Err(VolumeError::SliceOutOfRange { z, nz });
    }
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(VolumeError::BadWindow { lo, hi });
    }
    for o in overlays {
        vol.grid().ensure_matches(o.labels.grid(), "overlay grid")?;
    }
    let mut img = RgbaImage::new(nx as u32, ny as u32);
    for j in 0..ny {
        for i in 0..nx {
            let v = *vol.get(i, j, z) as f64;
            let g = ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8;
            let mut px = [g as f64, g as f64, g as f64];
            for o in overlays {
                let l = *o.labels.get(i, j, z);
                if l == 0 {
                    continue;
                }
                if let Some(c) = o.palette.get(&l) {
                    let a = c[3] as f64 / 255.0;
                    for ch in 0..3 {
                        px[ch] = a * c[ch] as f64 + (1.0 - a) * px[ch];
                    }
                }
            }
            img.put_pixel(
                i as u32,
                j as u32,
                image::Rgba([px[0].round() as u8, px[1].round() as u8, px[2].round() as u8, 255]),
            );
        }
    }
    Ok(img)
}
