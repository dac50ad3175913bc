//! In-memory datasets and batch assembly.
//!
//! Frames that arrive at the native 80x160 size (the synthetic interchange
//! format) are kept as raw 8-bit pixels and normalized per batch; oversized
//! camera frames go through [`crate::geometry::preprocess`] once and are kept
//! as floats.

use crate::error::{Error, Result};
use crate::geometry::{
    self, DatasetIndex, DomainId, LabeledFrame, VehicleGeometry, FRAME_H, FRAME_W,
};
use crate::models::{Generator, Predictor};
use crate::num::{s, Scalar};
use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

const FRAME_LEN: usize = 3 * FRAME_H * FRAME_W;

#[derive(Debug, Clone)]
enum PixelStore<S> {
    /// Channel-first 8-bit pixels, `3*H*W` per frame; normalized on access.
    Bytes(Vec<u8>),
    /// Channel-first normalized pixels in [-1, 1].
    Floats(Vec<S>),
}

/// A loaded dataset: images plus per-frame labels. Labels are kept in f64
/// and converted to the working scalar at batch time.
#[derive(Debug, Clone)]
pub struct FrameSet<S> {
    pub domain_id: DomainId,
    pub geometry: VehicleGeometry<f64>,
    store: PixelStore<S>,
    pub steering_rad: Vec<f64>,
    pub speed_mps: Vec<f64>,
    pub inv_radius: Vec<f64>,
}

/// Index into a [`FrameSet`] with an optional horizontal flip (the
/// augmentation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SampleRef {
    pub idx: u32,
    pub flip: bool,
}

impl SampleRef {
    pub fn plain(idx: usize) -> Self {
        SampleRef { idx: idx as u32, flip: false }
    }

    pub fn pack(&self) -> u32 {
        self.idx * 2 + self.flip as u32
    }

    pub fn unpack(v: u32) -> Self {
        SampleRef { idx: v / 2, flip: v % 2 == 1 }
    }
}

impl<S: Scalar> FrameSet<S> {
    pub fn len(&self) -> usize {
        self.steering_rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steering_rad.is_empty()
    }

    /// Load every frame referenced by a dataset index. Images at the native
    /// 80x160 size skip cropping and are stored as raw bytes.
    pub fn load(index: &DatasetIndex<f64>) -> Result<Self> {
        if index.entries.is_empty() {
            return Err(Error::EmptyDataset(index.domain_id.to_string()));
        }
        let mut bytes: Vec<u8> = Vec::new();
        let mut floats: Vec<S> = Vec::new();
        let mut native = true;
        let mut steering = Vec::with_capacity(index.entries.len());
        let mut speed = Vec::with_capacity(index.entries.len());
        let mut inv_r = Vec::with_capacity(index.entries.len());
        for (i, entry) in index.entries.iter().enumerate() {
            let path = index.base_dir.join(&entry.filename);
            let img = image::open(&path)?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if i == 0 {
                native = (h, w) == (FRAME_H, FRAME_W);
            } else if native != ((h, w) == (FRAME_H, FRAME_W)) {
                return Err(Error::Dimension(format!(
                    "{}: mixed native and oversized frames in one dataset",
                    path.display()
                )));
            }
            if native {
                // HWC -> CHW bytes
                let raw = img.as_raw();
                let base = bytes.len();
                bytes.resize(base + FRAME_LEN, 0);
                for c in 0..3 {
                    for y in 0..FRAME_H {
                        for x in 0..FRAME_W {
                            bytes[base + (c * FRAME_H + y) * FRAME_W + x] =
                                raw[(y * FRAME_W + x) * 3 + c];
                        }
                    }
                }
            } else {
                let raw = Array3::from_shape_vec((h, w, 3), img.into_raw())
                    .map_err(|e| Error::Dimension(e.to_string()))?;
                let prep: Array3<S> = geometry::preprocess(&raw)?;
                floats.extend(prep.iter().copied());
            }
            let theta = entry.steering_rad();
            steering.push(theta);
            speed.push(entry.speed_mps);
            inv_r.push(geometry::steering_to_inv_radius(theta, entry.speed_mps, &index.geometry)?);
        }
        Ok(FrameSet {
            domain_id: index.domain_id.clone(),
            geometry: index.geometry,
            store: if native { PixelStore::Bytes(bytes) } else { PixelStore::Floats(floats) },
            steering_rad: steering,
            speed_mps: speed,
            inv_radius: inv_r,
        })
    }

    /// Build a set from raw 8-bit frames (channel-first bytes) and steering
    /// labels in radians.
    pub fn from_bytes(
        domain_id: DomainId,
        geometry: VehicleGeometry<f64>,
        bytes: Vec<u8>,
        steering_rad: Vec<f64>,
        speed_mps: Vec<f64>,
    ) -> Result<Self> {
        if bytes.len() != steering_rad.len() * FRAME_LEN || steering_rad.len() != speed_mps.len() {
            return Err(Error::Dimension("frame byte/label count mismatch".into()));
        }
        let inv_radius = steering_rad
            .iter()
            .zip(&speed_mps)
            .map(|(t, v)| geometry::steering_to_inv_radius(*t, *v, &geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSet {
            domain_id,
            geometry,
            store: PixelStore::Bytes(bytes),
            steering_rad,
            speed_mps,
            inv_radius,
        })
    }

    /// Build a set from already normalized frames.
    pub fn from_floats(
        domain_id: DomainId,
        geometry: VehicleGeometry<f64>,
        pixels: Vec<S>,
        steering_rad: Vec<f64>,
        speed_mps: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != steering_rad.len() * FRAME_LEN || steering_rad.len() != speed_mps.len() {
            return Err(Error::Dimension("frame pixel/label count mismatch".into()));
        }
        let inv_radius = steering_rad
            .iter()
            .zip(&speed_mps)
            .map(|(t, v)| geometry::steering_to_inv_radius(*t, *v, &geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSet {
            domain_id,
            geometry,
            store: PixelStore::Floats(pixels),
            steering_rad,
            speed_mps,
            inv_radius,
        })
    }

    fn write_frame(&self, i: usize, flip: bool, dst: &mut [S]) {
        match &self.store {
            PixelStore::Bytes(b) => {
                let src = &b[i * FRAME_LEN..(i + 1) * FRAME_LEN];
                if flip {
                    for c in 0..3 {
                        for y in 0..FRAME_H {
                            let row = (c * FRAME_H + y) * FRAME_W;
                            for x in 0..FRAME_W {
                                dst[row + x] =
                                    geometry::normalize_pixel(src[row + FRAME_W - 1 - x]);
                            }
                        }
                    }
                } else {
                    for (d, p) in dst.iter_mut().zip(src) {
                        *d = geometry::normalize_pixel(*p);
                    }
                }
            }
            PixelStore::Floats(f) => {
                let src = &f[i * FRAME_LEN..(i + 1) * FRAME_LEN];
                if flip {
                    for c in 0..3 {
                        for y in 0..FRAME_H {
                            let row = (c * FRAME_H + y) * FRAME_W;
                            for x in 0..FRAME_W {
                                dst[row + x] = src[row + FRAME_W - 1 - x];
                            }
                        }
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }

    /// Single normalized frame image (optionally mirrored).
    pub fn image(&self, i: usize, flip: bool) -> Array3<S> {
        let mut out = Array3::<S>::zeros((3, FRAME_H, FRAME_W));
        self.write_frame(i, flip, out.as_slice_mut().unwrap());
        out
    }

    /// Frame as a [`LabeledFrame`].
    pub fn labeled_frame(&self, i: usize) -> Result<LabeledFrame<S>> {
        let geom = VehicleGeometry {
            wheelbase_m: s::<S>(self.geometry.wheelbase_m),
            steer_ratio: s::<S>(self.geometry.steer_ratio),
            slip_coeff: s::<S>(self.geometry.slip_coeff),
        };
        LabeledFrame::new(
            self.image(i, false),
            s(self.steering_rad[i]),
            s(self.speed_mps[i]),
            &geom,
            self.domain_id.clone(),
        )
    }

    /// Assemble a training batch: images plus inverse-turning-radius targets.
    pub fn batch(&self, refs: &[SampleRef]) -> (Array4<S>, Array1<S>) {
        let b = refs.len();
        let mut images = Array4::<S>::zeros((b, 3, FRAME_H, FRAME_W));
        let mut targets = Array1::<S>::zeros(b);
        let slice = images.as_slice_mut().unwrap();
        for (bi, r) in refs.iter().enumerate() {
            self.write_frame(r.idx as usize, r.flip, &mut slice[bi * FRAME_LEN..(bi + 1) * FRAME_LEN]);
            let u = self.inv_radius[r.idx as usize];
            targets[bi] = s(if r.flip { -u } else { u });
        }
        (images, targets)
    }

    /// Steering angle and speed for a sample (flip negates the angle).
    pub fn theta_speed(&self, r: SampleRef) -> (f64, f64) {
        let theta = self.steering_rad[r.idx as usize];
        (if r.flip { -theta } else { theta }, self.speed_mps[r.idx as usize])
    }

    /// Copy out a subset, preserving order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let store = match &self.store {
            PixelStore::Bytes(b) => {
                let mut out = Vec::with_capacity(indices.len() * FRAME_LEN);
                for &i in indices {
                    out.extend_from_slice(&b[i * FRAME_LEN..(i + 1) * FRAME_LEN]);
                }
                PixelStore::Bytes(out)
            }
            PixelStore::Floats(f) => {
                let mut out = Vec::with_capacity(indices.len() * FRAME_LEN);
                for &i in indices {
                    out.extend_from_slice(&f[i * FRAME_LEN..(i + 1) * FRAME_LEN]);
                }
                PixelStore::Floats(out)
            }
        };
        FrameSet {
            domain_id: self.domain_id.clone(),
            geometry: self.geometry,
            store,
            steering_rad: indices.iter().map(|&i| self.steering_rad[i]).collect(),
            speed_mps: indices.iter().map(|&i| self.speed_mps[i]).collect(),
            inv_radius: indices.iter().map(|&i| self.inv_radius[i]).collect(),
        }
    }

    /// Concatenate sets (for joint training). Geometries must agree so that
    /// angle/curvature conversions stay well-defined for every frame.
    pub fn concat(sets: &[&FrameSet<S>], domain_id: DomainId) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::EmptyDataset("concat of zero sets".into()));
        }
        let geom = sets[0].geometry;
        if sets.iter().any(|s| s.geometry != geom) {
            return Err(Error::Contract(
                "cannot concatenate datasets with different vehicle geometry".into(),
            ));
        }
        let mut floats: Vec<S> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let all_bytes = sets.iter().all(|s| matches!(s.store, PixelStore::Bytes(_)));
        let mut steering = Vec::new();
        let mut speed = Vec::new();
        let mut inv_r = Vec::new();
        for set in sets {
            match (&set.store, all_bytes) {
                (PixelStore::Bytes(b), true) => bytes.extend_from_slice(b),
                (PixelStore::Bytes(b), false) => {
                    floats.extend(b.iter().map(|p| geometry::normalize_pixel::<S>(*p)))
                }
                (PixelStore::Floats(f), _) => floats.extend_from_slice(f),
            }
            steering.extend_from_slice(&set.steering_rad);
            speed.extend_from_slice(&set.speed_mps);
            inv_r.extend_from_slice(&set.inv_radius);
        }
        Ok(FrameSet {
            domain_id,
            geometry: geom,
            store: if all_bytes { PixelStore::Bytes(bytes) } else { PixelStore::Floats(floats) },
            steering_rad: steering,
            speed_mps: speed,
            inv_radius: inv_r,
        })
    }

    /// Map every frame through a generator, producing the generated-virtual
    /// counterpart set (floats; the generator output is continuous).
    pub fn map_through(&self, g: &Generator<S>, batch_size: usize) -> Result<FrameSet<S>> {
        let n = self.len();
        let mut pixels: Vec<S> = Vec::with_capacity(n * FRAME_LEN);
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let refs: Vec<SampleRef> = (start..end).map(SampleRef::plain).collect();
            let (images, _) = self.batch(&refs);
            let mapped = g.forward(&images)?;
            pixels.extend(mapped.iter().copied());
            start = end;
        }
        FrameSet::from_floats(
            self.domain_id.clone(),
            self.geometry,
            pixels,
            self.steering_rad.clone(),
            self.speed_mps.clone(),
        )
    }

    /// Predict inverse turning radii for the whole set (optionally through a
    /// generator first).
    pub fn predict(
        &self,
        predictor: &Predictor<S>,
        generator: Option<&Generator<S>>,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let refs: Vec<SampleRef> = (start..end).map(SampleRef::plain).collect();
            let (images, _) = self.batch(&refs);
            let images = match generator {
                Some(g) => g.forward(&images)?,
                None => images,
            };
            let u = predictor.forward(&images)?;
            out.extend(u.iter().map(|v| v.to_f64().unwrap()));
            start = end;
        }
        Ok(out)
    }
}

/// Shuffled sample order for one epoch. With augmentation every frame also
/// appears mirrored, doubling the epoch.
pub fn epoch_order(n: usize, augment: bool, rng: &mut ChaCha8Rng) -> Vec<SampleRef> {
    let mut order: Vec<SampleRef> = (0..n)
        .map(SampleRef::plain)
        .chain((0..n).filter(|_| augment).map(|i| SampleRef { idx: i as u32, flip: true }))
        .collect();
    order.shuffle(rng);
    order
}

/// Seed-stable train/validation split: a shuffled prefix of the indices
/// becomes the validation set. Both halves are returned in ascending order.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64) * val_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, "val_split");
    idx.shuffle(&mut rng);
    let mut val: Vec<usize> = idx[..k].to_vec();
    let mut train: Vec<usize> = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Seed-stable subsampling of a labeled fraction; indices come back in
/// ascending order so fraction 1.0 is the identity.
pub fn label_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("label fraction must be in [0,1], got {fraction}")));
    }
    let k = ((n as f64) * fraction).round() as usize;
    if k == 0 {
        return Err(Error::EmptyDataset(format!(
            "label fraction {fraction} of {n} frames selects nothing"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, "label_subset");
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}
