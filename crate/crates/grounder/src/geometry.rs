//! Coordinate spaces, bounding boxes, and region-of-interest construction.
//!
//! Everything here manipulates coordinates and regions, never pixel buffers.
//! All types are immutable values and every operation is pure given its
//! arguments (randomized operations take an explicit seed).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// A point was mapped through an RoI it does not lie in.
    #[error("point ({x}, {y}) lies outside the region")]
    OutOfRegion { x: f64, y: f64 },
    /// No admissible crop exists for the requested constraints.
    #[error("ground-truth box cannot fit in any admissible crop")]
    Infeasible,
}

/// A point in pixel units, x along width and y along height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Map into [0,1]^2 by dividing out the frame dimensions.
    pub fn normalize(&self, frame: ImageDims) -> NormCoord {
        NormCoord {
            u: self.x / frame.width as f64,
            v: self.y / frame.height as f64,
        }
    }

    pub fn clamp_to(&self, frame: ImageDims) -> PixelCoord {
        PixelCoord {
            x: self.x.clamp(0.0, frame.width as f64),
            y: self.y.clamp(0.0, frame.height as f64),
        }
    }
}

/// A point in frame-normalized units, u = x/W and v = y/H.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCoord {
    pub u: f64,
    pub v: f64,
}

impl NormCoord {
    pub fn denormalize(&self, frame: ImageDims) -> PixelCoord {
        PixelCoord {
            x: self.u * frame.width as f64,
            y: self.v * frame.height as f64,
        }
    }

    pub fn dist_sq(&self, other: &NormCoord) -> f64 {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        du * du + dv * dv
    }
}

/// Width and height of an image or crop, in whole pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Self {
        debug_assert!(width >= 1 && height >= 1);
        Self { width, height }
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn max_dim(&self) -> f64 {
        self.width.max(self.height) as f64
    }
}

/// Axis-aligned box in pixel units, (x0, y0) top-left and (x1, y1) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        Self { x0, y0, x1, y1 }
    }

    /// Boundary points count as inside.
    pub fn contains(&self, p: PixelCoord) -> bool {
        point_in_bbox(p, self)
    }

    pub fn center(&self) -> PixelCoord {
        center_of_bbox(self)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn is_valid(&self) -> bool {
        self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn fits_in(&self, img: ImageDims) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= img.width as f64 && self.y1 <= img.height as f64
    }
}

/// Rectangular region of interest inside a parent image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub origin: PixelCoord,
    pub dims: ImageDims,
}

impl RoI {
    pub fn new(origin: PixelCoord, dims: ImageDims) -> Self {
        Self { origin, dims }
    }

    pub fn area(&self) -> f64 {
        self.dims.area()
    }

    /// True if `p` (global frame) lies inside this region, boundary inclusive.
    pub fn contains_global(&self, p: PixelCoord) -> bool {
        p.x >= self.origin.x
            && p.x <= self.origin.x + self.dims.width as f64
            && p.y >= self.origin.y
            && p.y <= self.origin.y + self.dims.height as f64
    }

    /// True if `p` (crop-local frame) lies within the crop extent.
    pub fn contains_local(&self, p: PixelCoord) -> bool {
        p.x >= 0.0 && p.x <= self.dims.width as f64 && p.y >= 0.0 && p.y <= self.dims.height as f64
    }

    pub fn as_bbox(&self) -> BBox {
        BBox {
            x0: self.origin.x,
            y0: self.origin.y,
            x1: self.origin.x + self.dims.width as f64,
            y1: self.origin.y + self.dims.height as f64,
        }
    }
}

/// True iff `p` lies in `b`, boundary inclusive.
pub fn point_in_bbox(p: PixelCoord, b: &BBox) -> bool {
    p.x >= b.x0 && p.x <= b.x1 && p.y >= b.y0 && p.y <= b.y1
}

pub fn center_of_bbox(b: &BBox) -> PixelCoord {
    PixelCoord {
        x: (b.x0 + b.x1) / 2.0,
        y: (b.y0 + b.y1) / 2.0,
    }
}

/// Build an RoI of `roi_dims` centered at `center`, shifted (not shrunk) to lie
/// fully inside the image. If the image is smaller than the requested dims
/// along an axis, the RoI spans the full image along that axis.
pub fn make_roi(center: PixelCoord, roi_dims: ImageDims, img: ImageDims) -> RoI {
    let (w, ox) = clamp_axis(center.x, roi_dims.width, img.width);
    let (h, oy) = clamp_axis(center.y, roi_dims.height, img.height);
    RoI {
        origin: PixelCoord { x: ox, y: oy },
        dims: ImageDims { width: w, height: h },
    }
}

fn clamp_axis(center: f64, req: u32, img: u32) -> (u32, f64) {
    if req >= img {
        return (img, 0.0);
    }
    let half = req as f64 / 2.0;
    let origin = (center - half).clamp(0.0, (img - req) as f64);
    (req, origin)
}

/// Global -> crop-local coordinates.
pub fn to_local(p_global: PixelCoord, roi: &RoI) -> Result<PixelCoord, GeometryError> {
    if !roi.contains_global(p_global) {
        return Err(GeometryError::OutOfRegion {
            x: p_global.x,
            y: p_global.y,
        });
    }
    Ok(PixelCoord {
        x: p_global.x - roi.origin.x,
        y: p_global.y - roi.origin.y,
    })
}

/// Crop-local -> global coordinates; exact inverse of [`to_local`].
pub fn to_global(p_local: PixelCoord, roi: &RoI) -> Result<PixelCoord, GeometryError> {
    if !roi.contains_local(p_local) {
        return Err(GeometryError::OutOfRegion {
            x: p_local.x,
            y: p_local.y,
        });
    }
    Ok(PixelCoord {
        x: p_local.x + roi.origin.x,
        y: p_local.y + roi.origin.y,
    })
}

/// Sample a random aspect-preserving crop of at most `max_area_frac` of the
/// image area that fully contains `gt`. The area fraction is drawn uniformly
/// from [minimal feasible fraction, max_area_frac], then the placement
/// uniformly among positions containing `gt`. Deterministic for a fixed seed.
pub fn sample_training_crop(
    gt: &BBox,
    img: ImageDims,
    max_area_frac: f64,
    rng_seed: u64,
) -> Result<RoI, GeometryError> {
    assert!(max_area_frac > 0.0 && max_area_frac <= 1.0);
    let (iw, ih) = (img.width as f64, img.height as f64);
    let max_area = max_area_frac * iw * ih;

    // Smallest integer width whose aspect-matched height still covers gt.
    let mut w_min = gt.width().ceil().max(gt.height().ceil() * iw / ih).ceil() as u32;
    w_min = w_min.clamp(1, img.width);
    while crop_height(w_min, img) < gt.height().ceil() as u32 && w_min < img.width {
        w_min += 1;
    }
    if crop_area(w_min, img) > max_area || (crop_height(w_min, img) as f64) < gt.height() {
        return Err(GeometryError::Infeasible);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let min_frac = crop_area(w_min, img) / (iw * ih);
    let frac = rng.gen_range(min_frac..=max_area_frac);
    // area = w * h = w^2 * (H/W)  =>  w = sqrt(area * W/H)
    let mut w = ((frac * iw * ih) * iw / ih).sqrt().round() as u32;
    w = w.clamp(w_min, img.width);
    while w > w_min && crop_area(w, img) > max_area {
        w -= 1;
    }
    let h = crop_height(w, img);

    let x0 = place_axis(&mut rng, gt.x0, gt.x1, w, img.width);
    let y0 = place_axis(&mut rng, gt.y0, gt.y1, h, img.height);
    Ok(RoI {
        origin: PixelCoord { x: x0, y: y0 },
        dims: ImageDims { width: w, height: h },
    })
}

fn crop_height(w: u32, img: ImageDims) -> u32 {
    let h = (w as f64 * img.height as f64 / img.width as f64).round() as u32;
    h.clamp(1, img.height)
}

fn crop_area(w: u32, img: ImageDims) -> f64 {
    w as f64 * crop_height(w, img) as f64
}

fn place_axis(rng: &mut ChaCha8Rng, lo: f64, hi: f64, extent: u32, img: u32) -> f64 {
    let min_origin = (hi - extent as f64).max(0.0);
    let max_origin = lo.min((img - extent) as f64);
    if max_origin <= min_origin {
        min_origin
    } else {
        rng.gen_range(min_origin..=max_origin)
    }
}
