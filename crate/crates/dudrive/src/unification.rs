//! Multi-domain orchestration: per-domain generators trained independently,
//! then frozen and served by a single global predictor. Adding a new real
//! domain never retrains existing bundles.

use crate::analysis::EvalReport;
use crate::error::{Error, Result};
use crate::geometry::DomainId;
use crate::models::{Discriminator, Generator, Predictor};
use crate::num::Scalar;
use crate::training::{
    self, dudrive_train, label_subset, FrameSet, MetricsLog, PredictorTrainer, RunSink, TrainConfig,
    ValTarget,
};
use std::collections::BTreeMap;
use std::path::Path;

/// One real domain: its dataset handle, a trained-and-frozen generator, and
/// the capture geometry.
pub struct DomainBundle<S> {
    pub domain_id: DomainId,
    generator: Generator<S>,
    frozen: bool,
    pub geometry: crate::geometry::VehicleGeometry<f64>,
}

impl<S: Scalar> DomainBundle<S> {
    pub fn new_frozen(
        domain_id: DomainId,
        generator: Generator<S>,
        geometry: crate::geometry::VehicleGeometry<f64>,
    ) -> Self {
        DomainBundle { domain_id, generator, frozen: true, geometry }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Read-only access; the frozen generator is shared by everything
    /// downstream.
    pub fn generator(&self) -> &Generator<S> {
        &self.generator
    }

    /// Mutation is refused once the bundle is frozen.
    pub fn generator_mut(&mut self) -> Result<&mut Generator<S>> {
        if self.frozen {
            Err(Error::Contract(format!(
                "generator for domain {} is frozen",
                self.domain_id
            )))
        } else {
            Ok(&mut self.generator)
        }
    }

    /// Persist the generator with provenance in the manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("domain_id".to_string(), self.domain_id.to_string());
        meta.insert("frozen".to_string(), self.frozen.to_string());
        self.generator.save(path, meta)
    }

    pub fn load(path: &Path, def: crate::nn::NetDef) -> Result<Self> {
        let (generator, manifest) = Generator::<S>::load(path, def)?;
        let domain_id = DomainId::new(
            manifest
                .meta
                .get("domain_id")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("bundle checkpoint lacks domain_id".into()))?,
        );
        let frozen = manifest.meta.get("frozen").map(|v| v == "true").unwrap_or(false);
        if !frozen {
            return Err(Error::Contract("loaded bundle generator is not frozen".into()));
        }
        Ok(DomainBundle {
            domain_id,
            generator,
            frozen,
            geometry: crate::geometry::VehicleGeometry::synthetic_default(),
        })
    }
}

/// Train a generator for one real domain with the joint scheme, then freeze
/// it. The run's private predictor is discarded: downstream prediction goes
/// through the global predictor.
#[allow(clippy::too_many_arguments)]
pub fn train_domain_generator<S: Scalar>(
    real_train: &FrameSet<S>,
    virt_train: &FrameSet<S>,
    real_val: Option<&FrameSet<S>>,
    pretrained_p: Predictor<S>,
    g_init: Generator<S>,
    d_init: Discriminator<S>,
    cfg: &TrainConfig,
    sink: Option<&RunSink>,
) -> Result<(DomainBundle<S>, MetricsLog)> {
    let (g, _p, _d, metrics) = dudrive_train(
        real_train,
        virt_train,
        real_val,
        pretrained_p,
        g_init,
        d_init,
        cfg,
        sink,
    )?;
    Ok((
        DomainBundle::new_frozen(real_train.domain_id.clone(), g, real_train.geometry),
        metrics,
    ))
}

/// Map each domain's training set through its frozen generator and train one
/// predictor over the union. Batches mix domains in proportion to dataset
/// sizes (or equally when configured). Per-domain validation is logged
/// separately; generator parameters are never touched.
pub fn train_global_predictor<S: Scalar>(
    bundles: &[&DomainBundle<S>],
    trains: &[&FrameSet<S>],
    vals: &[Option<&FrameSet<S>>],
    init: Predictor<S>,
    cfg: &TrainConfig,
    sink: Option<&RunSink>,
) -> Result<(Predictor<S>, MetricsLog)> {
    if bundles.is_empty() || bundles.len() != trains.len() || bundles.len() != vals.len() {
        return Err(Error::Contract("bundle/dataset list mismatch".into()));
    }
    for (b, t) in bundles.iter().zip(trains) {
        if !b.is_frozen() {
            return Err(Error::Contract(format!(
                "generator for domain {} must be frozen before global training",
                b.domain_id
            )));
        }
        if b.domain_id != t.domain_id {
            return Err(Error::Contract(format!(
                "bundle {} paired with dataset {}",
                b.domain_id, t.domain_id
            )));
        }
    }
    let before: Vec<Vec<S>> = bundles.iter().map(|b| b.generator().params.clone()).collect();

    // pre-map through the frozen generators (they are deterministic, so this
    // equals mapping per batch)
    let mut mapped: Vec<FrameSet<S>> = Vec::with_capacity(bundles.len());
    for (bundle, train) in bundles.iter().zip(trains) {
        let mut set = train.map_through(bundle.generator(), training::trainer::EVAL_BATCH)?;
        if cfg.global_predictor.equal_domain_mix {
            // upsample smaller domains by cycling so each contributes
            // equally per epoch
            let target = trains.iter().map(|t| t.len()).max().unwrap_or(0);
            if set.len() < target {
                let idx: Vec<usize> = (0..target).map(|i| i % set.len()).collect();
                set = set.subset(&idx);
            }
        }
        mapped.push(set);
    }
    let mapped_refs: Vec<&FrameSet<S>> = mapped.iter().collect();
    let union = FrameSet::concat(&mapped_refs, DomainId::new("unified"))?;

    let mut trainer = PredictorTrainer::new(
        init,
        cfg.global_predictor.lr,
        cfg.global_predictor.batch_size.min(union.len()),
        cfg.global_predictor.epochs,
        cfg,
        "global_predictor_shuffle",
    );
    let val_targets: Vec<ValTarget<'_, S>> = bundles
        .iter()
        .zip(vals)
        .filter_map(|(b, v)| {
            v.map(|set| ValTarget {
                tag: b.domain_id.to_string(),
                set,
                generator: Some(b.generator()),
            })
        })
        .collect();
    trainer.run(&union, &val_targets, sink)?;

    for (b, snap) in bundles.iter().zip(&before) {
        if &b.generator().params != snap {
            return Err(Error::Contract(format!(
                "generator for domain {} changed during global predictor training",
                b.domain_id
            )));
        }
    }
    Ok((trainer.predictor, trainer.metrics))
}

/// Results of one semi-supervised experiment at a given label fraction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SemiSupervisedReport {
    pub fraction: f64,
    pub n_labeled: usize,
    /// End-to-end baseline trained on the labeled subset only.
    pub baseline: EvalReport,
    /// Predictor co-trained with the target generator on the subset.
    pub single: EvalReport,
    /// Global predictor over the source bundle and the new target bundle.
    pub unified: EvalReport,
}

/// Inputs for [`run_semi_supervised`] that stay fixed across fractions.
pub struct SemiSupervisedContext<'a, S> {
    pub source_bundle: &'a DomainBundle<S>,
    pub source_train: &'a FrameSet<S>,
    pub target_train: &'a FrameSet<S>,
    pub target_test: &'a FrameSet<S>,
    pub virt_train: &'a FrameSet<S>,
    pub pretrained_p: &'a Predictor<S>,
    pub g_init: &'a Generator<S>,
    pub d_init: &'a Discriminator<S>,
    pub p_init_scratch: &'a Predictor<S>,
}

/// Train on a seed-stable labeled fraction of the target domain and compare
/// the subset baseline, the co-trained single-domain predictor, and the
/// unified global predictor on the target test set.
pub fn run_semi_supervised<S: Scalar>(
    ctx: &SemiSupervisedContext<'_, S>,
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<SemiSupervisedReport> {
    let chosen = label_subset(ctx.target_train.len(), fraction, cfg.seed)?;
    let subset = ctx.target_train.subset(&chosen);

    // (a) co-trained generator + predictor on the labeled subset
    let (g, p_single, _d, _m) = dudrive_train(
        &subset,
        ctx.virt_train,
        None,
        ctx.pretrained_p.clone(),
        ctx.g_init.clone(),
        ctx.d_init.clone(),
        cfg,
        None,
    )?;
    let single = crate::training::eval_mae_deg(&p_single, Some(&g), ctx.target_test, "single")?;
    let target_bundle =
        DomainBundle::new_frozen(subset.domain_id.clone(), g, subset.geometry);

    // (b) unified: global predictor over source + target bundles
    let (p_global, _m) = train_global_predictor(
        &[ctx.source_bundle, &target_bundle],
        &[ctx.source_train, &subset],
        &[None, None],
        ctx.pretrained_p.clone(),
        cfg,
        None,
    )?;
    let unified = crate::training::eval_mae_deg(
        &p_global,
        Some(target_bundle.generator()),
        ctx.target_test,
        "unified",
    )?;

    // (c) end-to-end baseline on the subset
    let mut baseline_trainer = PredictorTrainer::new(
        ctx.p_init_scratch.clone(),
        cfg.lr_predictor,
        cfg.batch_size,
        cfg.epochs,
        cfg,
        "pilotnet_shuffle",
    );
    baseline_trainer.run(&subset, &[], None)?;
    let baseline =
        crate::training::eval_mae_deg(&baseline_trainer.predictor, None, ctx.target_test, "pilotnet")?;

    Ok(SemiSupervisedReport {
        fraction,
        n_labeled: chosen.len(),
        baseline,
        single,
        unified,
    })
}
