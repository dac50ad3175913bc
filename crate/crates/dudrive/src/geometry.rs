//! Steering-command geometry, frame preprocessing, augmentation, and dataset
//! ingestion.
//!
//! The regression target throughout the crate is the inverse turning radius
//! `u` (1/m), related to the steering angle by the Ackermann relation
//! `theta = u * d_w * K_s * (1 + K_slip * v^2)`. Steering is stored in
//! radians internally; reports are in degrees.

use crate::error::{Error, Result};
use crate::num::{s, Scalar};
use ndarray::Array3;
use std::fmt;
use std::path::{Path, PathBuf};

/// Image height after preprocessing.
pub const FRAME_H: usize = 80;
/// Image width after preprocessing.
pub const FRAME_W: usize = 160;
/// Crop window applied to raw camera frames before resizing.
pub const CROP_H: usize = 160;
pub const CROP_W: usize = 320;
/// Default ingestion filter on the raw steering signal, in degrees.
pub const DEFAULT_FILTER_DEG: f64 = 200.0;

/// Ackermann parameters of a data-capture vehicle.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VehicleGeometry<S> {
    /// Wheelbase d_w in meters.
    pub wheelbase_m: S,
    /// Steering ratio K_s (steering wheel turn / road wheel turn).
    pub steer_ratio: S,
    /// Slip coefficient K_slip in s^2/m^2.
    pub slip_coeff: S,
}

impl<S: Scalar> VehicleGeometry<S> {
    pub fn new(wheelbase_m: S, steer_ratio: S, slip_coeff: S) -> Result<Self> {
        let g = Self { wheelbase_m, steer_ratio, slip_coeff };
        g.validate()?;
        Ok(g)
    }

    /// Benchmark constants for the synthetic world. Arbitrary but fixed; no
    /// vehicle constants ship with the method itself.
    pub fn synthetic_default() -> Self {
        Self {
            wheelbase_m: s(2.7),
            steer_ratio: s(15.3),
            slip_coeff: S::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase_m.is_finite()
            && self.steer_ratio.is_finite()
            && self.slip_coeff.is_finite()
            && self.wheelbase_m > S::zero()
            && self.steer_ratio > S::zero()
            && self.slip_coeff >= S::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "vehicle geometry out of range: d_w={:?} K_s={:?} K_slip={:?}",
                self.wheelbase_m.to_f64(),
                self.steer_ratio.to_f64(),
                self.slip_coeff.to_f64()
            )))
        }
    }

    /// The Ackermann scale factor `d_w * K_s * (1 + K_slip * v^2)`.
    #[inline]
    fn scale(&self, speed_mps: S) -> S {
        self.wheelbase_m * self.steer_ratio * (S::one() + self.slip_coeff * speed_mps * speed_mps)
    }
}

/// Steering angle (rad) -> inverse turning radius (1/m).
pub fn steering_to_inv_radius<S: Scalar>(
    theta_rad: S,
    speed_mps: S,
    geom: &VehicleGeometry<S>,
) -> Result<S> {
    geom.validate()?;
    if !theta_rad.is_finite() || !speed_mps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite steering/speed: theta={:?} v={:?}",
            theta_rad.to_f64(),
            speed_mps.to_f64()
        )));
    }
    Ok(theta_rad / geom.scale(speed_mps))
}

/// Inverse turning radius (1/m) -> steering angle (rad).
pub fn inv_radius_to_steering<S: Scalar>(
    u: S,
    speed_mps: S,
    geom: &VehicleGeometry<S>,
) -> Result<S> {
    geom.validate()?;
    if !u.is_finite() || !speed_mps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite curvature/speed: u={:?} v={:?}",
            u.to_f64(),
            speed_mps.to_f64()
        )));
    }
    Ok(geom.scale(speed_mps) * u)
}

/// Identifier of a data domain (dataset source).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct DomainId(pub String);

impl DomainId {
    pub fn new(id: impl Into<String>) -> Self {
        DomainId(id.into())
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One driving sample. The image is channel-first (3, H, W) with every value
/// in [-1, 1]; `inv_radius` is consistent with `steering_rad` under the
/// owning domain's vehicle geometry.
#[derive(Debug, Clone)]
pub struct LabeledFrame<S> {
    pub image: Array3<S>,
    pub steering_rad: S,
    pub speed_mps: S,
    pub inv_radius: S,
    pub domain_id: DomainId,
    pub weight: S,
}

impl<S: Scalar> LabeledFrame<S> {
    pub fn new(
        image: Array3<S>,
        steering_rad: S,
        speed_mps: S,
        geom: &VehicleGeometry<S>,
        domain_id: DomainId,
    ) -> Result<Self> {
        let inv_radius = steering_to_inv_radius(steering_rad, speed_mps, geom)?;
        let frame = Self {
            image,
            steering_rad,
            speed_mps,
            inv_radius,
            domain_id,
            weight: S::one(),
        };
        frame.validate(geom)?;
        Ok(frame)
    }

    pub fn validate(&self, geom: &VehicleGeometry<S>) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 || h != FRAME_H || w != FRAME_W {
            return Err(Error::Dimension(format!(
                "frame image must be 3x{FRAME_H}x{FRAME_W}, got {c}x{h}x{w}"
            )));
        }
        if self.image.iter().any(|p| !(*p >= s(-1.0) && *p <= s(1.0))) {
            return Err(Error::InvalidInput("frame pixels outside [-1, 1]".into()));
        }
        let theta = inv_radius_to_steering(self.inv_radius, self.speed_mps, geom)?;
        if (theta - self.steering_rad).abs().to_f64().unwrap() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "inv_radius inconsistent with steering: round-trip {} vs stored {}",
                theta,
                self.steering_rad
            )));
        }
        Ok(())
    }
}

/// Mirror a frame about the vertical axis and negate the steering command.
/// An involution: applying it twice restores the frame bit-exactly.
pub fn flip_augment<S: Scalar>(frame: &LabeledFrame<S>) -> LabeledFrame<S> {
    let mut out = frame.clone();
    out.image = flip_image(&frame.image);
    out.steering_rad = -frame.steering_rad;
    out.inv_radius = -frame.inv_radius;
    out
}

/// Mirror a (3, H, W) image about the vertical axis.
pub fn flip_image<S: Clone>(image: &Array3<S>) -> Array3<S> {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Normalize one 8-bit pixel to [-1, 1]: endpoints map exactly to +-1.
#[inline]
pub fn normalize_pixel<S: Scalar>(p: u8) -> S {
    s::<S>(p as f64 / 127.5 - 1.0)
}

/// Crop (bottom rows, centered columns), bilinear-resize to 80x160 and
/// normalize a raw 8-bit RGB frame of shape (H0, W0, 3).
pub fn preprocess<S: Scalar>(raw: &Array3<u8>) -> Result<Array3<S>> {
    let (h0, w0, c) = raw.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    if h0 < CROP_H || w0 < CROP_W {
        return Err(Error::Dimension(format!(
            "image {h0}x{w0} smaller than crop window {CROP_H}x{CROP_W}"
        )));
    }
    // Keep the bottom CROP_H rows (drops the upper background) and the
    // horizontally centered CROP_W columns.
    let row0 = h0 - CROP_H;
    let col0 = (w0 - CROP_W) / 2;

    // Bilinear resize of the crop window down to FRAME_H x FRAME_W,
    // sampling at pixel centers.
    let sy = CROP_H as f64 / FRAME_H as f64;
    let sx = CROP_W as f64 / FRAME_W as f64;
    let mut out = Array3::<S>::zeros((3, FRAME_H, FRAME_W));
    for y in 0..FRAME_H {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fy = fy.clamp(0.0, (CROP_H - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(CROP_H - 1);
        let wy = fy - y0 as f64;
        for x in 0..FRAME_W {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fx = fx.clamp(0.0, (CROP_W - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(CROP_W - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let p00 = raw[(row0 + y0, col0 + x0, ch)] as f64;
                let p01 = raw[(row0 + y0, col0 + x1, ch)] as f64;
                let p10 = raw[(row0 + y1, col0 + x0, ch)] as f64;
                let p11 = raw[(row0 + y1, col0 + x1, ch)] as f64;
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out[(ch, y, x)] = s(v / 127.5 - 1.0);
            }
        }
    }
    Ok(out)
}

/// One row of a dataset index file.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub filename: String,
    pub steering_deg: f64,
    pub speed_mps: f64,
}

/// Parsed and filtered dataset index. Entries keep file order.
#[derive(Debug, Clone)]
pub struct DatasetIndex<S> {
    pub entries: Vec<IndexEntry>,
    pub domain_id: DomainId,
    pub geometry: VehicleGeometry<S>,
    /// Directory the image paths are relative to.
    pub base_dir: PathBuf,
}

/// Read a dataset index CSV (`filename,steering_deg,speed_mps`), dropping
/// rows whose |steering_deg| exceeds `filter_deg`.
pub fn ingest<S: Scalar>(
    index_file: &Path,
    domain_id: DomainId,
    geometry: VehicleGeometry<S>,
    filter_deg: f64,
) -> Result<DatasetIndex<S>> {
    geometry.validate()?;
    let file = std::fs::File::open(index_file).map_err(|e| Error::io(index_file, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let expected = ["filename", "steering_deg", "speed_mps"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::MalformedRow {
            path: index_file.to_path_buf(),
            row: 1,
            msg: format!("expected header {expected:?}, got {got:?}"),
        });
    }

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // +2: one for the header, one for 1-based numbering.
        let row = i + 2;
        let record = record?;
        let malformed = |msg: String| Error::MalformedRow {
            path: index_file.to_path_buf(),
            row,
            msg,
        };
        if record.len() != 3 {
            return Err(malformed(format!("expected 3 fields, got {}", record.len())));
        }
        let filename = record[0].to_string();
        let steering_deg: f64 = record[1]
            .parse()
            .map_err(|e| malformed(format!("bad steering_deg {:?}: {e}", &record[1])))?;
        let speed_mps: f64 = record[2]
            .parse()
            .map_err(|e| malformed(format!("bad speed_mps {:?}: {e}", &record[2])))?;
        if !steering_deg.is_finite() || !speed_mps.is_finite() {
            return Err(malformed("non-finite value".into()));
        }
        if steering_deg.abs() > filter_deg {
            continue;
        }
        entries.push(IndexEntry { filename, steering_deg, speed_mps });
    }

    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no rows survive the {filter_deg} degree filter",
            index_file.display()
        )));
    }

    Ok(DatasetIndex {
        entries,
        domain_id,
        geometry,
        base_dir: index_file.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    })
}

impl IndexEntry {
    pub fn steering_rad(&self) -> f64 {
        self.steering_deg.to_radians()
    }
}


/// Assemble a channel-first (3,H,W) normalized image from 8-bit RGB bytes in
/// row-major (H,W,3) order.
pub fn image_from_rgb8<S: Scalar>(bytes: &[u8], h: usize, w: usize) -> Result<Array3<S>> {
    if bytes.len() != h * w * 3 {
        return Err(Error::Dimension(format!(
            "expected {} bytes for {h}x{w} RGB image, got {}",
            h * w * 3,
            bytes.len()
        )));
    }
    let mut out = Array3::<S>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                out[(c, y, x)] = normalize_pixel(bytes[base + c]);
            }
        }
    }
    Ok(out)
}
