//! The three networks: generator G, discriminator D, predictor P. Each is an
//! architecture ([`NetDef`]) plus a flat parameter vector, with forward
//! passes that are pure functions of (params, batch).

use crate::error::{Error, Result};
use crate::nn::{NetBuilder, NetDef};
use crate::num::{s, Scalar};
use ndarray::{Array1, Array4};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Channel-width reduction applied to every convolutional layer; 1 is the
/// full architecture, smaller factors exist for desk-scale runs and
/// verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WidthFactor {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl WidthFactor {
    pub fn denom(self) -> usize {
        match self {
            WidthFactor::Full => 1,
            WidthFactor::Half => 2,
            WidthFactor::Quarter => 4,
            WidthFactor::Eighth => 8,
        }
    }

    pub fn as_f64(self) -> f64 {
        1.0 / self.denom() as f64
    }

    pub fn from_f64(x: f64) -> Result<Self> {
        for wf in [WidthFactor::Full, WidthFactor::Half, WidthFactor::Quarter, WidthFactor::Eighth]
        {
            if (x - wf.as_f64()).abs() < 1e-9 {
                return Ok(wf);
            }
        }
        Err(Error::Config(format!("width factor must be one of 1, 0.5, 0.25, 0.125; got {x}")))
    }

    /// Scale a base channel count, never below one channel.
    pub fn channels(self, base: usize) -> usize {
        (base / self.denom()).max(1)
    }
}

/// Network role; fixes the architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Generator,
    Discriminator,
    Predictor,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
            Role::Predictor => "predictor",
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
/// Residual blocks in the full generator.
pub const GENERATOR_RES_BLOCKS: usize = 6;

/// Generator: two stride-2 convolutions, residual blocks, two stride-1/2
/// transposed convolutions back to input size, tanh output. Instance
/// normalization after every convolution except the final output projection.
pub fn generator_def(wf: WidthFactor, res_blocks: usize, hw: (usize, usize)) -> NetDef {
    let (h, w) = hw;
    assert!(h % 4 == 0 && w % 4 == 0, "generator input dims must be divisible by 4");
    let c1 = wf.channels(64);
    let c2 = wf.channels(128);
    let mut b = NetBuilder::new((3, h, w))
        .conv("down1", c1, 3, 2, 1)
        .instance_norm("down1.norm")
        .relu()
        .conv("down2", c2, 3, 2, 1)
        .instance_norm("down2.norm")
        .relu();
    for i in 0..res_blocks {
        b = b.residual(&format!("res{i}"), |r| {
            r.conv("conv1", c2, 3, 1, 1)
                .instance_norm("norm1")
                .relu()
                .conv("conv2", c2, 3, 1, 1)
                .instance_norm("norm2")
        });
    }
    b.conv_transpose("up1", c1, 3, 2, 1, 1)
        .instance_norm("up1.norm")
        .relu()
        .conv_transpose("up2", 3, 3, 2, 1, 1)
        .tanh()
        .finish()
}

/// Discriminator: stride-2 convolutions with filter counts 64/128/256, a
/// single-channel head and a global spatial mean so every score depends on
/// the whole image. No normalization or activation on the head.
pub fn discriminator_def(wf: WidthFactor, hw: (usize, usize)) -> NetDef {
    let (h, w) = hw;
    NetBuilder::new((3, h, w))
        .conv("d1", wf.channels(64), 4, 2, 1)
        .instance_norm("d1.norm")
        .leaky_relu(LEAKY_SLOPE)
        .conv("d2", wf.channels(128), 4, 2, 1)
        .instance_norm("d2.norm")
        .leaky_relu(LEAKY_SLOPE)
        .conv("d3", wf.channels(256), 4, 2, 1)
        .instance_norm("d3.norm")
        .leaky_relu(LEAKY_SLOPE)
        .conv("head", 1, 4, 1, 1)
        .global_mean()
        .finish()
}

/// Predictor (PilotNet): five valid convolutions then fully connected
/// 100/50/10/1. Hidden layers use ReLU; the output is linear so both
/// steering directions are representable.
pub fn predictor_def(wf: WidthFactor, hw: (usize, usize)) -> NetDef {
    let (h, w) = hw;
    NetBuilder::new((3, h, w))
        .conv("c1", wf.channels(24), 5, 2, 0)
        .relu()
        .conv("c2", wf.channels(36), 5, 2, 0)
        .relu()
        .conv("c3", wf.channels(48), 5, 2, 0)
        .relu()
        .conv("c4", wf.channels(64), 3, 1, 0)
        .relu()
        .conv("c5", wf.channels(64), 3, 1, 0)
        .relu()
        .flatten()
        .dense("fc1", 100)
        .relu()
        .dense("fc2", 50)
        .relu()
        .dense("fc3", 10)
        .relu()
        .dense("out", 1)
        .finish()
}

pub fn def_for(role: Role, wf: WidthFactor, hw: (usize, usize)) -> NetDef {
    match role {
        Role::Generator => generator_def(wf, GENERATOR_RES_BLOCKS, hw),
        Role::Discriminator => discriminator_def(wf, hw),
        Role::Predictor => predictor_def(wf, hw),
    }
}

/// Initialization: weights from a truncated normal (std 0.02, clipped at two
/// standard deviations), biases zero, instance-norm scale one and shift zero.
/// Deterministic in the seed.
pub fn init_params<S: Scalar>(def: &NetDef, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![S::zero(); def.layout.total];
    for entry in &def.layout.entries {
        let dst = &mut params[entry.offset..entry.offset + entry.len()];
        if entry.name.ends_with(".weight") {
            for v in dst {
                *v = s(trunc_normal(&mut rng, 0.02));
            }
        } else if entry.name.ends_with(".gamma") {
            for v in dst {
                *v = S::one();
            }
        }
        // .bias and .beta stay zero
    }
    params
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid normal");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

macro_rules! model_type {
    ($name:ident, $role:expr) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<S> {
            pub def: NetDef,
            pub params: Vec<S>,
        }

        impl<S: Scalar> $name<S> {
            pub fn init(def: NetDef, seed: u64) -> Self {
                let params = init_params(&def, seed);
                Self { def, params }
            }

            pub const ROLE: Role = $role;

            pub fn save(&self, path: &Path, meta: BTreeMap<String, String>) -> Result<()> {
                save_checkpoint(path, &self.def, &self.params, Self::ROLE, meta)
            }

            pub fn load(path: &Path, def: NetDef) -> Result<(Self, Manifest)> {
                let (params, manifest) = load_checkpoint::<S>(path, &def, Self::ROLE)?;
                Ok((Self { def, params }, manifest))
            }
        }
    };
}

model_type!(Generator, Role::Generator);
model_type!(Discriminator, Role::Discriminator);
model_type!(Predictor, Role::Predictor);

impl<S: Scalar> Generator<S> {
    /// Map a batch of images into the virtual domain. Deterministic: the
    /// generator takes no noise input.
    pub fn forward(&self, batch: &Array4<S>) -> Result<Array4<S>> {
        self.def.forward(&self.params, batch)?.map()
    }
}

impl<S: Scalar> Discriminator<S> {
    /// One unbounded realness score per image.
    pub fn forward(&self, batch: &Array4<S>) -> Result<Array1<S>> {
        self.def.forward(&self.params, batch)?.scalars()
    }
}

impl<S: Scalar> Predictor<S> {
    /// One inverse-turning-radius prediction (1/m) per image.
    pub fn forward(&self, batch: &Array4<S>) -> Result<Array1<S>> {
        self.def.forward(&self.params, batch)?.scalars()
    }
}

// --- checkpoint container -------------------------------------------------
//
// Single file: magic, little-endian u64 manifest length, JSON manifest,
// then a flat little-endian scalar blob in manifest order.

const CKPT_MAGIC: &[u8; 8] = b"NNCKPT01";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub role: Role,
    pub dtype: String,
    pub tensors: Vec<ManifestTensor>,
    /// Free-form provenance (domain id, frozen flag, config digest, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    def: &NetDef,
    params: &[S],
    role: Role,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    if params.len() != def.layout.total {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match layout {}",
            params.len(),
            def.layout.total
        )));
    }
    let width = S::byte_width();
    let tensors: Vec<ManifestTensor> = def
        .layout
        .entries
        .iter()
        .map(|e| ManifestTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: S::DTYPE.to_string(),
            byte_offset: e.offset * width,
        })
        .collect();
    let manifest = Manifest { role, dtype: S::DTYPE.to_string(), tensors, meta };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    file.write_all(CKPT_MAGIC).map_err(io)?;
    file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    let mut blob = Vec::with_capacity(params.len() * width);
    for p in params {
        blob.extend_from_slice(&p.to_le_bytes_vec());
    }
    file.write_all(&blob).map_err(io)?;
    Ok(())
}

/// Load a checkpoint, validating role, dtype and every tensor shape against
/// the expected architecture.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    def: &NetDef,
    role: Role,
) -> Result<(Vec<S>, Manifest)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() < 16 || &raw[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let json_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + json_len {
        return Err(Error::Checkpoint(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&raw[16..16 + json_len])
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.role != role {
        return Err(Error::Checkpoint(format!(
            "{}: role {:?} does not match expected {:?}",
            path.display(),
            manifest.role,
            role
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: dtype {} does not match expected {}",
            path.display(),
            manifest.dtype,
            S::DTYPE
        )));
    }
    if manifest.tensors.len() != def.layout.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors, architecture has {}",
            path.display(),
            manifest.tensors.len(),
            def.layout.entries.len()
        )));
    }
    let width = S::byte_width();
    for (t, e) in manifest.tensors.iter().zip(&def.layout.entries) {
        if t.name != e.name || t.shape != e.shape || t.byte_offset != e.offset * width {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} (shape {:?}) does not match architecture entry {} (shape {:?})",
                path.display(),
                t.name,
                t.shape,
                e.name,
                e.shape
            )));
        }
    }
    let blob = &raw[16 + json_len..];
    if blob.len() != def.layout.total * width {
        return Err(Error::Checkpoint(format!(
            "{}: blob holds {} bytes, architecture needs {}",
            path.display(),
            blob.len(),
            def.layout.total * width
        )));
    }
    let params: Vec<S> =
        blob.chunks_exact(width).map(|chunk| S::from_le_slice(chunk)).collect();
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FRAME_H, FRAME_W};
    use crate::nn::OutputKind;

    #[test]
    fn predictor_spatial_dims_follow_valid_conv_recurrence() {
        // independent recomputation of floor((n - k)/s) + 1 per layer
        let sizes = [(5usize, 2usize), (5, 2), (5, 2), (3, 1), (3, 1)];
        let mut h = FRAME_H;
        let mut w = FRAME_W;
        let mut dims = Vec::new();
        for (k, s) in sizes {
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
            dims.push((h, w));
        }
        assert_eq!(dims, vec![(38, 78), (17, 37), (7, 17), (5, 15), (3, 13)]);

        let def = predictor_def(WidthFactor::Full, (FRAME_H, FRAME_W));
        // flatten feeds the first dense layer with 3*13*64 = 2496 features
        let fc1 = def.layout.entry("fc1.weight").unwrap();
        assert_eq!(fc1.shape, vec![100, 3 * 13 * 64]);
        assert_eq!(def.output, OutputKind::Flat(1));
    }

    #[test]
    fn generator_preserves_shape() {
        let def = generator_def(WidthFactor::Eighth, 1, (8, 16));
        assert_eq!(def.output, OutputKind::Map((3, 8, 16)));
        let def = generator_def(WidthFactor::Half, GENERATOR_RES_BLOCKS, (FRAME_H, FRAME_W));
        assert_eq!(def.output, OutputKind::Map((3, FRAME_H, FRAME_W)));
    }

    #[test]
    fn discriminator_outputs_one_scalar() {
        let def = discriminator_def(WidthFactor::Full, (FRAME_H, FRAME_W));
        assert_eq!(def.output, OutputKind::Flat(1));
    }

    #[test]
    fn init_is_deterministic_and_roles_differ() {
        let def = predictor_def(WidthFactor::Quarter, (FRAME_H, FRAME_W));
        let a: Vec<f32> = init_params(&def, 5);
        let b: Vec<f32> = init_params(&def, 5);
        assert_eq!(a, b);
        let c: Vec<f32> = init_params(&def, 6);
        assert_ne!(a, c);

        let g = generator_def(WidthFactor::Quarter, GENERATOR_RES_BLOCKS, (FRAME_H, FRAME_W));
        let d = discriminator_def(WidthFactor::Quarter, (FRAME_H, FRAME_W));
        assert_ne!(g.layout.total, d.layout.total);
        assert_ne!(g.layout.total, def.layout.total);
    }

    #[test]
    fn init_statistics_match_contract() {
        let def = generator_def(WidthFactor::Quarter, 2, (16, 32));
        let params: Vec<f64> = init_params(&def, 11);
        for entry in &def.layout.entries {
            let seg = &params[entry.offset..entry.offset + entry.len()];
            if entry.name.ends_with(".weight") {
                assert!(seg.iter().all(|v| v.abs() <= 0.04 + 1e-12), "{}", entry.name);
                assert!(seg.iter().any(|v| *v != 0.0));
            } else if entry.name.ends_with(".gamma") {
                assert!(seg.iter().all(|v| *v == 1.0));
            } else {
                assert!(seg.iter().all(|v| *v == 0.0), "{}", entry.name);
            }
        }
    }

    /// Recompute the expected channel counts of every conv from the
    /// architecture table and compare against the built manifest.
    #[test]
    fn width_factor_halves_conv_channels() {
        for (wf, denom) in [(WidthFactor::Half, 2), (WidthFactor::Quarter, 4)] {
            let def = predictor_def(wf, (FRAME_H, FRAME_W));
            let base = [24, 36, 48, 64, 64];
            for (i, b) in base.iter().enumerate() {
                let e = def.layout.entry(&format!("c{}.weight", i + 1)).unwrap();
                assert_eq!(e.shape[0], (b / denom).max(1), "layer c{}", i + 1);
            }
            // fully connected sizes do not scale
            assert_eq!(def.layout.entry("fc1.weight").unwrap().shape[0], 100);
            assert_eq!(def.layout.entry("fc2.weight").unwrap().shape[0], 50);
            assert_eq!(def.layout.entry("fc3.weight").unwrap().shape[0], 10);

            let g = generator_def(wf, GENERATOR_RES_BLOCKS, (FRAME_H, FRAME_W));
            assert_eq!(g.layout.entry("down1.weight").unwrap().shape[0], 64 / denom);
            assert_eq!(g.layout.entry("down2.weight").unwrap().shape[0], 128 / denom);
            assert_eq!(g.layout.entry("up2.weight").unwrap().shape[1], 3);

            let d = discriminator_def(wf, (FRAME_H, FRAME_W));
            assert_eq!(d.layout.entry("d1.weight").unwrap().shape[0], 64 / denom);
            assert_eq!(d.layout.entry("d2.weight").unwrap().shape[0], 128 / denom);
            assert_eq!(d.layout.entry("d3.weight").unwrap().shape[0], 256 / denom);
            assert_eq!(d.layout.entry("head.weight").unwrap().shape[0], 1);
        }
        assert_eq!(WidthFactor::Eighth.channels(4), 1);
        assert_eq!(WidthFactor::Eighth.channels(2), 1);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let def = predictor_def(WidthFactor::Eighth, (64, 96));
        let model = Predictor::<f32>::init(def.clone(), 3);
        let path = dir.path().join("p.ckpt");
        let mut meta = BTreeMap::new();
        meta.insert("domain_id".to_string(), "real_a".to_string());
        model.save(&path, meta).unwrap();
        let (loaded, manifest) = Predictor::<f32>::load(&path, def.clone()).unwrap();
        assert_eq!(loaded.params, model.params);
        assert_eq!(manifest.meta.get("domain_id").map(String::as_str), Some("real_a"));

        // shape mismatch is rejected
        let other = predictor_def(WidthFactor::Quarter, (64, 96));
        assert!(Predictor::<f32>::load(&path, other).is_err());
        // role mismatch is rejected
        let ddef = discriminator_def(WidthFactor::Eighth, (64, 96));
        assert!(Discriminator::<f32>::load(&path, ddef).is_err());
        // dtype mismatch is rejected
        assert!(Predictor::<f64>::load(&path, def).is_err());
    }
}
