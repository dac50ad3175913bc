//! Deterministic procedural driving world. One scene description yields a
//! clean "virtual" rendering and styled "real" renderings that share the
//! exact lane geometry and steering label, so paired-domain experiments run
//! at desk scale.
//!
//! Mirroring a scene (negating curvature and lateral offset) produces the
//! horizontally flipped image bit-exactly: scenes are canonicalized to one
//! turn direction before rasterizing and flipped back afterwards, so the
//! stochastic nuisance flips together with the geometry.

use crate::error::{Error, Result};
use crate::geometry::{self, DomainId, VehicleGeometry, FRAME_H, FRAME_W};
use crate::num::Scalar;
use crate::training::FrameSet;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::path::Path;

const FRAME_LEN: usize = 3 * FRAME_H * FRAME_W;
/// Corrective steering gain on the lateral lane offset (1/m^2).
pub const OFFSET_GAIN: f64 = 0.02;
/// Constant driving speed of the synthetic world (m/s).
pub const SPEED_MPS: f64 = 10.0;
/// Camera focal length in pixels and height in meters.
const FOCAL_PX: f64 = 110.0;
const CAM_HEIGHT_M: f64 = 1.6;
/// Physical width of lane markings (m).
const MARKING_WIDTH_M: f64 = 0.15;

/// Procedural description of one road scene.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneParams {
    /// Signed road curvature (1/m), |curvature| <= 0.05.
    pub curvature: f64,
    /// Lateral offset of the car from the lane center (m), |offset| <= 1.0.
    pub lane_offset: f64,
    pub lane_width_m: f64,
    /// Fraction of the image height above the road region.
    pub horizon_frac: f64,
    /// Seed for style-dependent nuisance rendering.
    pub seed: u64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.curvature.abs() <= 0.05
            && self.lane_offset.abs() <= 1.0
            && self.lane_width_m > 1.0
            && (0.1..0.9).contains(&self.horizon_frac);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("scene out of range: {self:?}")))
        }
    }

    /// Exact steering label: corrective policy u = curvature +
    /// OFFSET_GAIN * lane_offset at constant speed.
    pub fn inv_radius_label(&self) -> f64 {
        self.curvature + OFFSET_GAIN * self.lane_offset
    }

    pub fn steering_label(&self, geom: &VehicleGeometry<f64>) -> Result<f64> {
        geometry::inv_radius_to_steering(self.inv_radius_label(), SPEED_MPS, geom)
    }
}

/// Negate the turn direction. Renders of the mirrored scene are exact
/// horizontal flips; the label negates exactly.
pub fn mirror_scene(scene: &SceneParams) -> SceneParams {
    SceneParams { curvature: -scene.curvature, lane_offset: -scene.lane_offset, ..*scene }
}

/// Draw a scene from a seed. Curvature and offset are uniform and symmetric
/// about zero so left and right turns are balanced in distribution.
pub fn sample_scene(rng_seed: u64) -> SceneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    SceneParams {
        curvature: rng.random_range(-0.05..0.05),
        lane_offset: rng.random_range(-0.9..0.9),
        lane_width_m: rng.random_range(3.0..3.6),
        horizon_frac: rng.random_range(0.33..0.37),
        seed: rng.random::<u64>(),
    }
}

type Rgb = [f64; 3];

/// Fixed, versioned look of one real domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RealStyle {
    pub style_id: String,
    pub texture_noise_amp: f64,
    pub shadow_count: usize,
    pub clutter_count: usize,
    pub brightness_jitter: f64,
    pub sky: Rgb,
    pub ground: Rgb,
    pub road: Rgb,
    pub clutter_colors: Vec<Rgb>,
    /// Global channel gains applied after compositing.
    pub tint: Rgb,
    /// Depth-dependent brightness falloff below the horizon (night driving).
    pub headlight: bool,
    /// Bright point lights (street lamps, oncoming traffic).
    pub light_count: usize,
    pub light_color: Rgb,
}

/// Daylight domain: strong roadside clutter, tree shadows, warm palette.
pub fn style_a() -> RealStyle {
    RealStyle {
        style_id: "style_a".to_string(),
        texture_noise_amp: 0.05,
        shadow_count: 3,
        clutter_count: 10,
        brightness_jitter: 0.18,
        sky: [0.62, 0.78, 0.93],
        ground: [0.38, 0.52, 0.27],
        road: [0.40, 0.39, 0.38],
        clutter_colors: vec![
            [0.23, 0.35, 0.13],
            [0.35, 0.24, 0.12],
            [0.50, 0.48, 0.44],
            [0.18, 0.30, 0.16],
        ],
        tint: [1.0, 0.98, 0.92],
        headlight: false,
        light_count: 0,
        light_color: [0.0, 0.0, 0.0],
    }
}

/// Night domain: dark blue tint, headlight falloff, sensor noise, sparse
/// silhouettes.
pub fn style_b() -> RealStyle {
    RealStyle {
        style_id: "style_b".to_string(),
        texture_noise_amp: 0.12,
        shadow_count: 0,
        clutter_count: 5,
        brightness_jitter: 0.30,
        sky: [0.05, 0.06, 0.12],
        ground: [0.10, 0.11, 0.14],
        road: [0.16, 0.16, 0.19],
        clutter_colors: vec![[0.06, 0.07, 0.10], [0.09, 0.08, 0.07]],
        tint: [0.55, 0.60, 0.95],
        headlight: true,
        light_count: 7,
        light_color: [0.98, 0.92, 0.62],
    }
}

pub fn style_by_id(id: &str) -> Result<RealStyle> {
    match id {
        "style_a" => Ok(style_a()),
        "style_b" => Ok(style_b()),
        other => Err(Error::Config(format!("unknown style {other:?}"))),
    }
}

/// Clean virtual palette.
const V_SKY: Rgb = [0.53, 0.81, 0.92];
const V_GROUND: Rgb = [0.42, 0.62, 0.32];
const V_ROAD: Rgb = [0.35, 0.35, 0.35];
const MARKING: Rgb = [0.97, 0.97, 0.97];
const CENTER_DASH: Rgb = [0.95, 0.85, 0.20];

#[inline]
fn hash01(a: u64, b: u64, c: u64) -> f64 {
    let h = crate::rng::splitmix64(a ^ crate::rng::splitmix64(b ^ crate::rng::splitmix64(c)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn coverage(dist: f64, half_width: f64) -> f64 {
    (half_width - dist + 0.5).clamp(0.0, 1.0)
}

#[inline]
fn blend(dst: &mut Rgb, src: Rgb, alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

struct Projection {
    horizon_row: usize,
}

impl Projection {
    fn new(scene: &SceneParams) -> Self {
        Projection { horizon_row: (scene.horizon_frac * FRAME_H as f64).round() as usize }
    }

    /// Ground depth of an image row (rows below the horizon only).
    fn depth(&self, y: usize) -> f64 {
        FOCAL_PX * CAM_HEIGHT_M / (y as f64 + 0.5 - self.horizon_row as f64)
    }

    /// Image row of a ground point at depth z.
    fn row(&self, z: f64) -> f64 {
        self.horizon_row as f64 - 0.5 + FOCAL_PX * CAM_HEIGHT_M / z
    }

    /// Signed pixel column (relative to the image center) of a world lateral
    /// position at depth z.
    fn column(&self, lateral: f64, z: f64) -> f64 {
        FOCAL_PX * lateral / z
    }
}

/// World lateral position of the lane center at depth z (circular-arc
/// approximation).
fn lane_center(scene: &SceneParams, z: f64) -> f64 {
    0.5 * scene.curvature * z * z - scene.lane_offset
}

struct Raster {
    /// Channel-first [0,1] floats.
    pix: Vec<f64>,
}

impl Raster {
    fn fill(color: Rgb) -> Self {
        let mut pix = vec![0.0; FRAME_LEN];
        for c in 0..3 {
            for i in 0..FRAME_H * FRAME_W {
                pix[c * FRAME_H * FRAME_W + i] = color[c];
            }
        }
        Raster { pix }
    }

    #[inline]
    fn get(&self, y: usize, x: usize) -> Rgb {
        let i = y * FRAME_W + x;
        let n = FRAME_H * FRAME_W;
        [self.pix[i], self.pix[n + i], self.pix[2 * n + i]]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, v: Rgb) {
        let i = y * FRAME_W + x;
        let n = FRAME_H * FRAME_W;
        self.pix[i] = v[0];
        self.pix[n + i] = v[1];
        self.pix[2 * n + i] = v[2];
    }

    fn quantize(&self) -> Vec<u8> {
        self.pix.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

fn signed_column(x: usize) -> f64 {
    x as f64 + 0.5 - FRAME_W as f64 / 2.0
}

/// Rasterize base geometry (sky, ground, road surface) without markings.
fn raster_base(scene: &SceneParams, sky: Rgb, ground: Rgb, road: Rgb, proj: &Projection) -> Raster {
    let mut img = Raster::fill(sky);
    for y in proj.horizon_row..FRAME_H {
        let z = proj.depth(y);
        let u_c = proj.column(lane_center(scene, z), z);
        let half_road = proj.column(scene.lane_width_m / 2.0, z);
        for x in 0..FRAME_W {
            let px = signed_column(x);
            let mut color = ground;
            let road_cov = coverage((px - u_c).abs(), half_road);
            if road_cov > 0.0 {
                blend(&mut color, road, road_cov);
            }
            img.set(y, x, color);
        }
    }
    img
}

/// Composite lane markings (two side lines plus a dashed center line) on
/// top of everything else.
fn raster_markings(scene: &SceneParams, img: &mut Raster, proj: &Projection) {
    for y in proj.horizon_row..FRAME_H {
        let z = proj.depth(y);
        let u_c = proj.column(lane_center(scene, z), z);
        let half_road = proj.column(scene.lane_width_m / 2.0, z);
        let half_mark = (proj.column(MARKING_WIDTH_M, z) / 2.0).max(0.45);
        let dash_on = (z / 4.0).floor() as i64 % 2 == 0;
        for x in 0..FRAME_W {
            let px = signed_column(x);
            let mut color = img.get(y, x);
            let mut touched = false;
            for edge in [u_c - half_road, u_c + half_road] {
                let cov = coverage((px - edge).abs(), half_mark);
                if cov > 0.0 {
                    blend(&mut color, MARKING, cov);
                    touched = true;
                }
            }
            if dash_on {
                let cov = coverage((px - u_c).abs(), half_mark);
                if cov > 0.0 {
                    blend(&mut color, CENTER_DASH, cov);
                    touched = true;
                }
            }
            if touched {
                img.set(y, x, color);
            }
        }
    }
}

/// Geometric lane-marking mask (coverage >= 0.5 of any marking element).
fn marking_mask_raw(scene: &SceneParams) -> Array2<bool> {
    let proj = Projection::new(scene);
    let mut mask = Array2::from_elem((FRAME_H, FRAME_W), false);
    for y in proj.horizon_row..FRAME_H {
        let z = proj.depth(y);
        let u_c = proj.column(lane_center(scene, z), z);
        let half_road = proj.column(scene.lane_width_m / 2.0, z);
        let half_mark = (proj.column(MARKING_WIDTH_M, z) / 2.0).max(0.45);
        let dash_on = (z / 4.0).floor() as i64 % 2 == 0;
        for x in 0..FRAME_W {
            let px = signed_column(x);
            let mut cov: f64 = 0.0;
            for edge in [u_c - half_road, u_c + half_road] {
                cov = cov.max(coverage((px - edge).abs(), half_mark));
            }
            if dash_on {
                cov = cov.max(coverage((px - u_c).abs(), half_mark));
            }
            if cov >= 0.5 {
                mask[(y, x)] = true;
            }
        }
    }
    mask
}

/// Style nuisance applied between the base and the markings.
fn raster_nuisance(scene: &SceneParams, style: &RealStyle, img: &mut Raster, proj: &Projection) {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::splitmix64(
        scene.seed ^ crate::rng::sub_seed(0, &style.style_id),
    ));

    // ground/road texture noise (luminance)
    if style.texture_noise_amp > 0.0 {
        let noise_seed = rng.random::<u64>();
        for y in proj.horizon_row..FRAME_H {
            for x in 0..FRAME_W {
                let n = (hash01(noise_seed, y as u64, x as u64) - 0.5) * 2.0;
                let mut color = img.get(y, x);
                for c in &mut color {
                    *c += n * style.texture_noise_amp;
                }
                img.set(y, x, color);
            }
        }
    }

    // shadow bands across the road, fixed depth extent, lateral bounds
    // relative to the lane center
    for _ in 0..style.shadow_count {
        let z0: f64 = rng.random_range(4.0..40.0);
        let dz: f64 = rng.random_range(2.0..8.0);
        let mut a: f64 = rng.random_range(-7.0..7.0);
        let mut b: f64 = rng.random_range(-7.0..7.0);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        let gain: f64 = rng.random_range(0.55..0.75);
        let y0 = proj.row(z0 + dz).ceil().max(proj.horizon_row as f64) as usize;
        let y1 = (proj.row(z0).floor() as usize).min(FRAME_H - 1);
        for y in y0..=y1 {
            let z = proj.depth(y);
            let u_c = proj.column(lane_center(scene, z), z);
            let ca = u_c + proj.column(a, z);
            let cb = u_c + proj.column(b, z);
            for x in 0..FRAME_W {
                let px = signed_column(x);
                if px >= ca && px <= cb {
                    let mut color = img.get(y, x);
                    for c in &mut color {
                        *c *= gain;
                    }
                    img.set(y, x, color);
                }
            }
        }
    }

    // roadside clutter: boxes and triangles following the road curve
    for _ in 0..style.clutter_count {
        let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * (scene.lane_width_m / 2.0 + rng.random_range(1.0..7.0));
        let z: f64 = rng.random_range(6.0..60.0);
        let height_m: f64 = rng.random_range(1.0..4.5);
        let width_m: f64 = rng.random_range(0.4..1.8);
        let color = style.clutter_colors[rng.random_range(0..style.clutter_colors.len())];
        let triangular = rng.random_bool(0.4);

        let base_row = proj.row(z);
        let h_px = proj.column(height_m, z);
        let w_px = proj.column(width_m, z);
        let center = proj.column(lane_center(scene, z) + lateral, z);
        let y_top = (base_row - h_px).floor().max(0.0) as usize;
        let y_bot = (base_row.floor() as usize).min(FRAME_H - 1);
        if y_top > y_bot {
            continue;
        }
        for y in y_top..=y_bot {
            // triangles narrow toward the top
            let frac = if h_px > 0.0 {
                ((base_row - y as f64) / h_px).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let half = if triangular { (1.0 - frac) * w_px / 2.0 } else { w_px / 2.0 };
            for x in 0..FRAME_W {
                let px = signed_column(x);
                if (px - center).abs() <= half {
                    img.set(y, x, color);
                }
            }
        }
    }

    // point lights (street lamps, oncoming traffic): bright discs with a
    // soft edge, placed along the road
    for _ in 0..style.light_count {
        let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let z: f64 = rng.random_range(8.0..70.0);
        let lateral = side * (scene.lane_width_m / 2.0 + rng.random_range(0.0..4.0));
        let height_m: f64 = rng.random_range(0.6..5.5);
        let radius_m: f64 = rng.random_range(0.15..0.45);
        let cy = proj.row(z) - proj.column(height_m, z);
        let cx = proj.column(lane_center(scene, z) + lateral, z);
        let r_px = proj.column(radius_m, z).max(0.8);
        let y0 = (cy - r_px - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r_px + 1.0).ceil() as usize).min(FRAME_H - 1);
        for y in y0..=y1 {
            for x in 0..FRAME_W {
                let px = signed_column(x);
                let d = ((px - cx) * (px - cx) + (y as f64 + 0.5 - cy) * (y as f64 + 0.5 - cy))
                    .sqrt();
                let cov = coverage(d, r_px);
                if cov > 0.0 {
                    let mut c = img.get(y, x);
                    blend(&mut c, style.light_color, cov);
                    img.set(y, x, c);
                }
            }
        }
    }
}

/// Global tint, headlight falloff and per-image brightness jitter.
fn raster_global(scene: &SceneParams, style: &RealStyle, img: &mut Raster, proj: &Projection) {
    let jitter = 1.0
        + (hash01(scene.seed, crate::rng::sub_seed(1, &style.style_id), 7) - 0.5)
            * 2.0
            * style.brightness_jitter;
    for y in 0..FRAME_H {
        let headlight = if style.headlight && y >= proj.horizon_row {
            (1.35 - proj.depth(y) / 55.0).clamp(0.25, 1.10)
        } else {
            1.0
        };
        for x in 0..FRAME_W {
            let mut color = img.get(y, x);
            for c in 0..3 {
                color[c] *= style.tint[c] * jitter * headlight;
            }
            img.set(y, x, color);
        }
    }
}

fn is_canonical(scene: &SceneParams) -> bool {
    scene.curvature > 0.0 || (scene.curvature == 0.0 && scene.lane_offset >= 0.0)
}

fn hflip_chw_u8(bytes: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bytes.len()];
    for c in 0..3 {
        for y in 0..FRAME_H {
            let row = (c * FRAME_H + y) * FRAME_W;
            for x in 0..FRAME_W {
                out[row + x] = bytes[row + FRAME_W - 1 - x];
            }
        }
    }
    out
}

fn raster_scene_u8(scene: &SceneParams, style: Option<&RealStyle>, with_markings: bool) -> Vec<u8> {
    let proj = Projection::new(scene);
    let mut img = match style {
        None => raster_base(scene, V_SKY, V_GROUND, V_ROAD, &proj),
        Some(st) => {
            let mut img = raster_base(scene, st.sky, st.ground, st.road, &proj);
            raster_nuisance(scene, st, &mut img, &proj);
            img
        }
    };
    if with_markings {
        raster_markings(scene, &mut img, &proj);
    }
    if let Some(st) = style {
        raster_global(scene, st, &mut img, &proj);
    }
    img.quantize()
}

fn render_u8(scene: &SceneParams, style: Option<&RealStyle>, with_markings: bool) -> Result<Vec<u8>> {
    scene.validate()?;
    if is_canonical(scene) {
        Ok(raster_scene_u8(scene, style, with_markings))
    } else {
        Ok(hflip_chw_u8(&raster_scene_u8(&mirror_scene(scene), style, with_markings)))
    }
}

fn u8_to_tensor<S: Scalar>(bytes: &[u8]) -> Array3<S> {
    let mut out = Array3::<S>::zeros((3, FRAME_H, FRAME_W));
    for (o, b) in out.iter_mut().zip(bytes) {
        *o = geometry::normalize_pixel(*b);
    }
    out
}

/// 8-bit channel-first virtual rendering (the dataset interchange form).
pub fn render_virtual_u8(scene: &SceneParams) -> Result<Vec<u8>> {
    render_u8(scene, None, true)
}

/// 8-bit channel-first styled real rendering.
pub fn render_real_u8(scene: &SceneParams, style: &RealStyle) -> Result<Vec<u8>> {
    render_u8(scene, Some(style), true)
}

/// Clean virtual rendering: flat colors, crisp markings, no nuisance.
pub fn render_virtual<S: Scalar>(scene: &SceneParams) -> Result<Array3<S>> {
    Ok(u8_to_tensor(&render_virtual_u8(scene)?))
}

/// Styled real rendering: same lane geometry plus style-dependent nuisance.
pub fn render_real<S: Scalar>(scene: &SceneParams, style: &RealStyle) -> Result<Array3<S>> {
    Ok(u8_to_tensor(&render_real_u8(scene, style)?))
}

/// Lane-marking pixels visible in a rendering, recovered by differencing the
/// image against the same rendering without markings.
pub fn extract_marking_mask(scene: &SceneParams, style: Option<&RealStyle>) -> Result<Array2<bool>> {
    let with = render_u8(scene, style, true)?;
    let without = render_u8(scene, style, false)?;
    let mut mask = Array2::from_elem((FRAME_H, FRAME_W), false);
    let n = FRAME_H * FRAME_W;
    for y in 0..FRAME_H {
        for x in 0..FRAME_W {
            let i = y * FRAME_W + x;
            let diff = (0..3)
                .map(|c| (with[c * n + i] as f64 - without[c * n + i] as f64).abs() / 255.0)
                .fold(0.0f64, f64::max);
            if diff > 0.025 {
                mask[(y, x)] = true;
            }
        }
    }
    Ok(mask)
}

/// Geometric (style-independent) lane-marking mask.
pub fn marking_mask(scene: &SceneParams) -> Result<Array2<bool>> {
    scene.validate()?;
    if is_canonical(scene) {
        Ok(marking_mask_raw(scene))
    } else {
        let m = marking_mask_raw(&mirror_scene(scene));
        let mut out = Array2::from_elem((FRAME_H, FRAME_W), false);
        for y in 0..FRAME_H {
            for x in 0..FRAME_W {
                out[(y, x)] = m[(y, FRAME_W - 1 - x)];
            }
        }
        Ok(out)
    }
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Which rendering a dataset holds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum DomainKind {
    Virtual,
    Real(RealStyle),
}

impl DomainKind {
    fn render(&self, scene: &SceneParams) -> Result<Vec<u8>> {
        match self {
            DomainKind::Virtual => render_virtual_u8(scene),
            DomainKind::Real(style) => render_real_u8(scene, style),
        }
    }
}

/// Draw `n` scenes: antithetic mirror pairs, so left and right turns balance
/// exactly (the flip-augmentation convention applied at the source).
pub fn sample_scenes(n: usize, seed: u64) -> Vec<SceneParams> {
    (0..n)
        .map(|i| {
            let base = sample_scene(crate::rng::item_seed(seed, "scene", (i / 2) as u64));
            if i % 2 == 0 {
                base
            } else {
                mirror_scene(&base)
            }
        })
        .collect()
}

/// Render a dataset for an explicit scene list.
pub fn render_dataset<S: Scalar>(
    scenes: &[SceneParams],
    kind: &DomainKind,
    geom: &VehicleGeometry<f64>,
    domain_id: DomainId,
) -> Result<FrameSet<S>> {
    let mut bytes = Vec::with_capacity(scenes.len() * FRAME_LEN);
    let mut steering = Vec::with_capacity(scenes.len());
    for scene in scenes {
        bytes.extend(kind.render(scene)?);
        steering.push(scene.steering_label(geom)?);
    }
    FrameSet::from_bytes(domain_id, *geom, bytes, steering, vec![SPEED_MPS; scenes.len()])
}

/// Sample scenes and render a labeled dataset; byte-identical for a fixed
/// (n, seed).
pub fn build_dataset<S: Scalar>(
    n: usize,
    kind: &DomainKind,
    geom: &VehicleGeometry<f64>,
    seed: u64,
    domain_id: DomainId,
) -> Result<FrameSet<S>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    render_dataset(&sample_scenes(n, seed), kind, geom, domain_id)
}

/// Write one PNG from channel-first 8-bit pixels.
pub fn write_png_chw(path: &Path, bytes: &[u8]) -> Result<()> {
    let n = FRAME_H * FRAME_W;
    let mut hwc = vec![0u8; FRAME_LEN];
    for y in 0..FRAME_H {
        for x in 0..FRAME_W {
            for c in 0..3 {
                hwc[(y * FRAME_W + x) * 3 + c] = bytes[c * n + y * FRAME_W + x];
            }
        }
    }
    let img = image::RgbImage::from_raw(FRAME_W as u32, FRAME_H as u32, hwc)
        .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Materialize a dataset directory: `index.csv` + PNG frames in the dataset
/// interchange layout, plus `scenes.csv` with the generating parameters.
pub fn write_dataset(
    dir: &Path,
    scenes: &[SceneParams],
    kind: &DomainKind,
    geom: &VehicleGeometry<f64>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("filename,steering_deg,speed_mps\n");
    let mut scene_rows = String::from("index,curvature,lane_offset,seed\n");
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("frame_{i:05}.png");
        write_png_chw(&dir.join(&name), &kind.render(scene)?)?;
        let deg = scene.steering_label(geom)?.to_degrees();
        index.push_str(&format!("{name},{deg:.12},{SPEED_MPS:.1}\n"));
        scene_rows.push_str(&format!(
            "{i},{},{},{}\n",
            scene.curvature, scene.lane_offset, scene.seed
        ));
    }
    std::fs::write(dir.join("index.csv"), index)
        .map_err(|e| Error::io(dir.join("index.csv"), e))?;
    std::fs::write(dir.join("scenes.csv"), scene_rows)
        .map_err(|e| Error::io(dir.join("scenes.csv"), e))?;
    Ok(())
}

/// Parse a `scenes.csv` written by [`write_dataset`].
pub fn read_scenes(path: &Path) -> Result<Vec<(f64, f64, u64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 1,
                msg: "expected 4 fields".into(),
            });
        }
        let parse_err =
            |e: String| Error::MalformedRow { path: path.to_path_buf(), row: i + 1, msg: e };
        out.push((
            f[1].parse::<f64>().map_err(|e| parse_err(e.to_string()))?,
            f[2].parse::<f64>().map_err(|e| parse_err(e.to_string()))?,
            f[3].parse::<u64>().map_err(|e| parse_err(e.to_string()))?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::total_variance;
    use crate::geometry::flip_image;

    fn geom() -> VehicleGeometry<f64> {
        VehicleGeometry::synthetic_default()
    }

    #[test]
    fn sampler_is_deterministic_and_varies() {
        assert_eq!(sample_scene(42), sample_scene(42));
        assert_ne!(sample_scene(42), sample_scene(43));
        let s = sample_scene(7);
        s.validate().unwrap();
    }

    #[test]
    fn sampler_mean_curvature_is_centered() {
        let n = 10_000;
        let mean: f64 = (0..n).map(|i| sample_scene(i as u64).curvature).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.002, "mean curvature {mean}");
    }

    #[test]
    fn virtual_render_is_deterministic() {
        let s = sample_scene(5);
        assert_eq!(render_virtual_u8(&s).unwrap(), render_virtual_u8(&s).unwrap());
    }

    #[test]
    fn straight_centered_scene_is_bilaterally_symmetric() {
        let mut s = sample_scene(5);
        s.curvature = 0.0;
        s.lane_offset = 0.0;
        let img: Array3<f64> = render_virtual(&s).unwrap();
        assert_eq!(img, flip_image(&img));
    }

    #[test]
    fn mirrored_scene_renders_as_exact_flip() {
        for seed in [1u64, 2, 3, 9] {
            let s = sample_scene(seed);
            let m = mirror_scene(&s);
            let a: Array3<f64> = render_virtual(&s).unwrap();
            let b: Array3<f64> = render_virtual(&m).unwrap();
            assert_eq!(b, flip_image(&a), "virtual seed {seed}");
            let style = style_a();
            let ar: Array3<f64> = render_real(&s, &style).unwrap();
            let br: Array3<f64> = render_real(&m, &style).unwrap();
            assert_eq!(br, flip_image(&ar), "real seed {seed}");
        }
    }

    #[test]
    fn real_render_is_deterministic() {
        let s = sample_scene(11);
        let st = style_a();
        assert_eq!(render_real_u8(&s, &st).unwrap(), render_real_u8(&s, &st).unwrap());
    }

    #[test]
    fn marking_masks_overlap_across_domains() {
        for seed in [3u64, 14, 25] {
            let s = sample_scene(seed);
            let mv = extract_marking_mask(&s, None).unwrap();
            for style in [style_a(), style_b()] {
                let mr = extract_marking_mask(&s, Some(&style)).unwrap();
                let iou = mask_iou(&mv, &mr);
                assert!(iou >= 0.8, "seed {seed} style {} iou {iou}", style.style_id);
            }
        }
    }

    #[test]
    fn nuisance_occludes_under_a_fifth_of_markings() {
        for seed in [4u64, 17] {
            let s = sample_scene(seed);
            let analytic = marking_mask(&s).unwrap();
            for style in [style_a(), style_b()] {
                let visible = extract_marking_mask(&s, Some(&style)).unwrap();
                let total = analytic.iter().filter(|v| **v).count();
                let hidden = analytic
                    .iter()
                    .zip(visible.iter())
                    .filter(|(a, v)| **a && !**v)
                    .count();
                assert!(total > 0);
                let frac = hidden as f64 / total as f64;
                assert!(frac <= 0.2, "style {} occlusion {frac}", style.style_id);
            }
        }
    }

    #[test]
    fn styles_are_visually_distinct() {
        let s = sample_scene(21);
        let a: Array3<f64> = render_real(&s, &style_a()).unwrap();
        let b: Array3<f64> = render_real(&s, &style_b()).unwrap();
        let mad = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!(mad > 0.05, "mean abs diff {mad}");
    }

    #[test]
    fn straight_centered_label_is_zero() {
        let mut s = sample_scene(1);
        s.curvature = 0.0;
        s.lane_offset = 0.0;
        assert_eq!(s.inv_radius_label(), 0.0);
        assert_eq!(s.steering_label(&geom()).unwrap(), 0.0);
    }

    #[test]
    fn label_histogram_is_symmetric() {
        let scenes = sample_scenes(10_000, 3);
        let labels: Vec<f64> = scenes.iter().map(|s| s.inv_radius_label()).collect();
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let std = (labels.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / labels.len() as f64)
            .sqrt();
        assert!(mean.abs() < 0.01 * std, "mean {mean} std {std}");
    }

    #[test]
    fn label_is_invariant_across_domains() {
        let scenes = sample_scenes(8, 5);
        let g = geom();
        let virt: FrameSet<f32> =
            render_dataset(&scenes, &DomainKind::Virtual, &g, DomainId::new("v")).unwrap();
        let real: FrameSet<f32> =
            render_dataset(&scenes, &DomainKind::Real(style_a()), &g, DomainId::new("a")).unwrap();
        assert_eq!(virt.steering_rad, real.steering_rad);
        assert_eq!(virt.inv_radius, real.inv_radius);
    }

    #[test]
    fn mirrored_dataset_equals_flip_augmented_dataset() {
        let scenes = sample_scenes(6, 8);
        let mirrored: Vec<SceneParams> = scenes.iter().map(mirror_scene).collect();
        let g = geom();
        for kind in [DomainKind::Virtual, DomainKind::Real(style_b())] {
            let base: FrameSet<f64> =
                render_dataset(&scenes, &kind, &g, DomainId::new("d")).unwrap();
            let mir: FrameSet<f64> =
                render_dataset(&mirrored, &kind, &g, DomainId::new("d")).unwrap();
            for i in 0..base.len() {
                let flipped = crate::geometry::flip_augment(&base.labeled_frame(i).unwrap());
                let m = mir.labeled_frame(i).unwrap();
                assert_eq!(m.image, flipped.image);
                assert_eq!(m.steering_rad, flipped.steering_rad);
                assert_eq!(m.inv_radius, flipped.inv_radius);
            }
        }
    }

    #[test]
    fn virtual_variance_is_below_real_variance() {
        let scenes = sample_scenes(50, 13);
        let g = geom();
        let virt: FrameSet<f64> =
            render_dataset(&scenes, &DomainKind::Virtual, &g, DomainId::new("v")).unwrap();
        for style in [style_a(), style_b()] {
            let real: FrameSet<f64> =
                render_dataset(&scenes, &DomainKind::Real(style.clone()), &g, DomainId::new("r"))
                    .unwrap();
            let vi: Vec<Array3<f64>> = (0..50).map(|i| virt.image(i, false)).collect();
            let ri: Vec<Array3<f64>> = (0..50).map(|i| real.image(i, false)).collect();
            let vv =
                total_variance(&vi.iter().map(|a| a.view()).collect::<Vec<_>>(), 50, 0).unwrap();
            let rv =
                total_variance(&ri.iter().map(|a| a.view()).collect::<Vec<_>>(), 50, 0).unwrap();
            assert!(vv < rv, "style {}: virtual {vv} !< real {rv}", style.style_id);
        }
    }

    #[test]
    fn written_dataset_is_byte_identical_across_runs() {
        let scenes = sample_scenes(4, 99);
        let g = geom();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        write_dataset(&d1, &scenes, &DomainKind::Real(style_a()), &g).unwrap();
        write_dataset(&d2, &scenes, &DomainKind::Real(style_a()), &g).unwrap();
        for entry in std::fs::read_dir(&d1).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.join(&name)).unwrap();
            let b = std::fs::read(d2.join(&name)).unwrap();
            assert_eq!(a, b, "{name:?}");
        }
        // and loads back through the standard ingestion path
        let idx = crate::geometry::ingest::<f64>(
            &d1.join("index.csv"),
            DomainId::new("a"),
            g,
            crate::geometry::DEFAULT_FILTER_DEG,
        )
        .unwrap();
        let set = FrameSet::<f32>::load(&idx).unwrap();
        assert_eq!(set.len(), 4);
        let mem: FrameSet<f32> =
            render_dataset(&scenes, &DomainKind::Real(style_a()), &g, DomainId::new("a")).unwrap();
        assert_eq!(set.image(2, false), mem.image(2, false));
        for i in 0..4 {
            assert!((set.steering_rad[i] - mem.steering_rad[i]).abs() < 1e-9);
        }
        // scenes.csv round-trips the generating parameters
        let rows = read_scenes(&d1.join("scenes.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].0, scenes[1].curvature);
        assert_eq!(rows[1].1, scenes[1].lane_offset);
    }
}
