//! Adversarial dropout regularization: the twin-classifier sensitivity loss,
//! the three-step training procedure, the entropy-based baseline and the
//! auxiliary deployment classifier.
//!
//! One outer iteration works on a fixed pair of mini-batches:
//!
//! 1. **Step 1** trains the generator `G` and critic `C` (plus the auxiliary
//!    classifier `C′`, which never back-propagates into `G`) to classify
//!    labeled source samples.
//! 2. **Step 2** updates `C` alone to keep classifying source correctly while
//!    *raising* the sensitivity — the mean symmetric KL divergence between two
//!    dropout-sampled classifiers `C₁, C₂` applied to the same target
//!    features.
//! 3. **Step 3** updates `G` alone, `n` times with fresh twin masks, to
//!    *lower* that sensitivity plus a class-usage regularizer, pushing target
//!    features away from the decision boundary.
//!
//! The entropy baseline swaps the sensitivity for the per-sample prediction
//! entropy of a single dropout-sampled classifier; source-only training runs
//! Step 1 alone. Every source of randomness is an explicit mask or a split of
//! the configured seed, so runs replay bit-identically.

use serde::{Deserialize, Serialize};

use crate::datasets::{batch_iter, LabeledSet2D};
use crate::error::{Error, Result};
use crate::losses::{
    self, accuracy, class_balance_term, cross_entropy, cross_entropy_value, entropy_per_sample,
    mean_entropy_value, sensitivity, EntropyTermVariant,
};
use crate::nn::{
    mlp_forward_eval, mlp_forward_eval_unit_mask, mlp_forward_train, sample_masks,
    sample_twin_masks, Binding, DropoutMask, Model, MlpSpec, OptimizerKind, OptimizerState,
};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

// Split tags for the per-run random streams.
const TAG_INIT: u64 = 1;
const TAG_SOURCE_BATCHES: u64 = 2;
const TAG_TARGET_BATCHES: u64 = 3;
const TAG_MASKS: u64 = 4;
const TAG_EVAL: u64 = 5;

/// Full configuration of one adaptation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdrConfig {
    pub dropout_rate: f64,
    pub n_step3_repeats: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub total_outer_iterations: usize,
    pub entropy_term_variant: EntropyTermVariant,
    /// When false, the cross-entropy forwards in Steps 1-2 run without
    /// dropout; the twin draws keep `dropout_rate`. Dropout then acts purely
    /// as the critic-sampling mechanism rather than a classifier regularizer.
    pub dropout_in_classification: bool,
    pub eval_interval: usize,
    pub seed: u64,
    /// Widths of the feature generator, input first.
    pub generator_widths: Vec<usize>,
    /// What the generator's final layer applies after its linear map.
    pub generator_head: GeneratorHead,
    pub generator_batchnorm: bool,
    /// Widths of the critic/classifier, input first.
    pub classifier_widths: Vec<usize>,
    pub classifier_batchnorm: bool,
}

impl Default for AdrConfig {
    fn default() -> Self {
        AdrConfig {
            dropout_rate: 0.5,
            n_step3_repeats: 4,
            learning_rate: 2e-4,
            optimizer: OptimizerKind::Adam,
            batch_size_source: 64,
            batch_size_target: 64,
            total_outer_iterations: 3000,
            entropy_term_variant: EntropyTermVariant::Marginal,
            dropout_in_classification: true,
            eval_interval: 50,
            seed: 0,
            generator_widths: vec![2, 5, 5],
            generator_head: GeneratorHead::BatchNormRelu,
            generator_batchnorm: true,
            classifier_widths: vec![5, 5, 2],
            classifier_batchnorm: true,
        }
    }
}

impl AdrConfig {
    /// Mask set and rate for the classification (cross-entropy) forwards.
    fn cls_masks(&self, rng: &mut Rng, spec: &MlpSpec, rows: usize) -> Vec<DropoutMask> {
        if self.dropout_in_classification {
            sample_masks(rng, spec, self.dropout_rate, rows)
        } else {
            spec.dropout_site_widths()
                .iter()
                .map(|&w| DropoutMask::ones(&[rows, w]))
                .collect()
        }
    }

    fn cls_rate(&self) -> f64 {
        if self.dropout_in_classification {
            self.dropout_rate
        } else {
            0.0
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract("dropout_rate must lie in [0, 1)"));
        }
        if self.n_step3_repeats == 0 {
            return Err(Error::contract("n_step3_repeats must be at least 1"));
        }
        if self.batch_size_source < 2 || self.batch_size_target < 2 {
            return Err(Error::contract("batch sizes must be at least 2"));
        }
        if self.eval_interval == 0 {
            return Err(Error::contract("eval_interval must be at least 1"));
        }
        Ok(())
    }
}

/// Structure of the generator's output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorHead {
    /// linear → batchnorm → relu, like the hidden layers.
    BatchNormRelu,
    /// linear → batchnorm: normalized scale, full sign range.
    BatchNorm,
    /// linear → relu: positive cone, unconstrained scale.
    Relu,
    /// plain linear: unconstrained.
    Linear,
}

/// Which classifier head to read predictions from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    C,
    CPrime,
}

/// Generator, critic and auxiliary classifier with their optimizer states.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub g: Model,
    pub c: Model,
    pub c_prime: Model,
    pub opt_g: OptimizerState,
    pub opt_c: OptimizerState,
    pub opt_c_prime: OptimizerState,
}

impl ModelBundle {
    /// Fresh networks: `G` is a batchnorm+relu feature stack, `C` a dropout
    /// classifier, and `C′` is structurally identical to `C` with its own
    /// initialization draw.
    pub fn init(cfg: &AdrConfig, rng: &mut Rng) -> Result<ModelBundle> {
        let g_widths = &cfg.generator_widths;
        let g_layers: Vec<crate::nn::LayerSpec> = (0..g_widths.len() - 1)
            .map(|i| {
                let last = i == g_widths.len() - 2;
                let (batchnorm, relu) = if last {
                    match cfg.generator_head {
                        GeneratorHead::BatchNormRelu => (cfg.generator_batchnorm, true),
                        GeneratorHead::BatchNorm => (true, false),
                        GeneratorHead::Relu => (false, true),
                        GeneratorHead::Linear => (false, false),
                    }
                } else {
                    (cfg.generator_batchnorm, true)
                };
                crate::nn::LayerSpec {
                    in_width: g_widths[i],
                    out_width: g_widths[i + 1],
                    batchnorm,
                    relu,
                    dropout_after: false,
                }
            })
            .collect();
        let g_spec = MlpSpec::new(g_layers)?;

        let c_widths = &cfg.classifier_widths;
        let c_layers: Vec<crate::nn::LayerSpec> = (0..c_widths.len() - 1)
            .map(|i| {
                let last = i == c_widths.len() - 2;
                crate::nn::LayerSpec {
                    in_width: c_widths[i],
                    out_width: c_widths[i + 1],
                    batchnorm: cfg.classifier_batchnorm && !last,
                    relu: !last,
                    dropout_after: !last,
                }
            })
            .collect();
        let c_spec = MlpSpec::new(c_layers)?;
        if c_spec.input_width() != g_spec.output_width() {
            return Err(Error::contract(format!(
                "classifier input width {} must match generator output width {}",
                c_spec.input_width(),
                g_spec.output_width()
            )));
        }
        let g = Model::init(g_spec, rng);
        let c = Model::init(c_spec.clone(), rng);
        let c_prime = Model::init(c_spec, rng);
        Ok(ModelBundle::assemble(g, c, c_prime, cfg.optimizer, cfg.learning_rate))
    }

    /// Wraps existing models (e.g. loaded from a checkpoint) with fresh
    /// optimizer states.
    pub fn assemble(
        g: Model,
        c: Model,
        c_prime: Model,
        optimizer: OptimizerKind,
        learning_rate: f64,
    ) -> ModelBundle {
        let opt_g = OptimizerState::new(optimizer, learning_rate, &g.params);
        let opt_c = OptimizerState::new(optimizer, learning_rate, &c.params);
        let opt_c_prime = OptimizerState::new(optimizer, learning_rate, &c_prime.params);
        ModelBundle {
            g,
            c,
            c_prime,
            opt_g,
            opt_c,
            opt_c_prime,
        }
    }

    fn head(&self, head: Head) -> &Model {
        match head {
            Head::C => &self.c,
            Head::CPrime => &self.c_prime,
        }
    }

    /// Re-initializes `C′` and trains it on frozen features for `iterations`
    /// steps: the "retrain classifier" mode.
    pub fn retrain_c_prime(
        &mut self,
        cfg: &AdrConfig,
        source: &LabeledSet2D,
        rng: &mut Rng,
    ) -> Result<()> {
        let spec = self.c_prime.spec.clone();
        self.c_prime = Model::init(spec, &mut rng.split(1));
        self.opt_c_prime =
            OptimizerState::new(cfg.optimizer, cfg.learning_rate, &self.c_prime.params);
        let epochs = epochs_needed(
            source.len(),
            cfg.batch_size_source,
            cfg.total_outer_iterations,
        );
        let batches = batch_iter(
            source.len(),
            cfg.batch_size_source,
            rng.split(2),
            epochs,
        )?;
        let mut rng_masks = rng.split(3);
        for batch in batches.take(cfg.total_outer_iterations) {
            let (x, y) = source.gather(&batch);
            let masks = cfg.cls_masks(&mut rng_masks, &self.c_prime.spec, x.rows());

            let mut tape = Tape::new();
            let cpb = Binding::bind(&mut tape, &self.c_prime.params);
            let gb = Binding::bind(&mut tape, &self.g.params);
            let input = tape.leaf(x);
            // Frozen generator: eval-mode features, gradients discarded.
            let feats = mlp_forward_eval(
                &mut tape,
                &self.g.spec,
                &gb,
                &self.g.bn,
                input,
                None,
                0.0,
            )?;
            let feats = tape.detach(feats);
            let logits = mlp_forward_train(
                &mut tape,
                &self.c_prime.spec,
                &cpb,
                &mut self.c_prime.bn,
                feats,
                &masks,
                cfg.cls_rate(),
            )?;
            let probs = tape.softmax(logits)?;
            let loss = cross_entropy(&mut tape, probs, &y)?;
            let gm = tape.backward(loss)?;
            self.opt_c_prime
                .step(&mut self.c_prime.params, &cpb.grads(&gm))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// The twin classifier draw: two independent mask sets over `C`'s dropout
/// sites for the same batch.
#[derive(Clone, Debug)]
pub struct TwinMasks {
    pub first: Vec<DropoutMask>,
    pub second: Vec<DropoutMask>,
}

impl TwinMasks {
    pub fn sample(rng: &mut Rng, spec: &MlpSpec, rate: f64, rows: usize) -> TwinMasks {
        let (first, second) = sample_twin_masks(rng, spec, rate, rows);
        TwinMasks { first, second }
    }
}

#[derive(Clone, Debug)]
pub struct Step1Masks {
    pub c: Vec<DropoutMask>,
    pub c_prime: Vec<DropoutMask>,
}

impl Step1Masks {
    pub fn sample(rng: &mut Rng, bundle: &ModelBundle, cfg: &AdrConfig, rows: usize) -> Step1Masks {
        Step1Masks {
            c: cfg.cls_masks(rng, &bundle.c.spec, rows),
            c_prime: cfg.cls_masks(rng, &bundle.c_prime.spec, rows),
        }
    }
}

/// Masks for the critic step: two independent full-batch dropout draws over
/// the composed source+target mini-batch. The target rows of the two draws
/// are the twin classifiers C₁ and C₂.
#[derive(Clone, Debug)]
pub struct Step2Masks {
    pub draw_a: Vec<DropoutMask>,
    pub draw_b: Vec<DropoutMask>,
}

impl Step2Masks {
    pub fn sample(
        rng: &mut Rng,
        bundle: &ModelBundle,
        cfg: &AdrConfig,
        source_rows: usize,
        target_rows: usize,
    ) -> Step2Masks {
        let rows = source_rows + target_rows;
        let twins = TwinMasks::sample(rng, &bundle.c.spec, cfg.dropout_rate, rows);
        Step2Masks {
            draw_a: twins.first,
            draw_b: twins.second,
        }
    }
}

/// Masks for the entropy baseline's critic step: one dropout draw over the
/// composed source+target mini-batch.
#[derive(Clone, Debug)]
pub struct EntStep2Masks {
    pub draw: Vec<DropoutMask>,
}

impl EntStep2Masks {
    pub fn sample(
        rng: &mut Rng,
        bundle: &ModelBundle,
        cfg: &AdrConfig,
        source_rows: usize,
        target_rows: usize,
    ) -> EntStep2Masks {
        EntStep2Masks {
            draw: sample_masks(rng, &bundle.c.spec, cfg.dropout_rate, source_rows + target_rows),
        }
    }
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Step1Losses {
    pub loss_c: f64,
    pub loss_c_prime: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Step2Losses {
    pub loss_cls: f64,
    pub adversarial: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Step3Losses {
    pub adversarial: f64,
    pub balance: f64,
}

struct Step1Built {
    root: crate::tape::NodeId,
    losses: Step1Losses,
    gb: Binding,
    cb: Binding,
    cpb: Binding,
}

fn build_step1(
    tape: &mut Tape,
    bundle: &mut ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    masks: &Step1Masks,
    cfg: &AdrConfig,
) -> Result<Step1Built> {
    let rate = cfg.cls_rate();
    let gb = Binding::bind(tape, &bundle.g.params);
    let cb = Binding::bind(tape, &bundle.c.params);
    let cpb = Binding::bind(tape, &bundle.c_prime.params);

    let x = tape.leaf(x_s.clone());
    let feats = mlp_forward_train(tape, &bundle.g.spec, &gb, &mut bundle.g.bn, x, &[], 0.0)?;

    let logits_c = mlp_forward_train(
        tape,
        &bundle.c.spec,
        &cb,
        &mut bundle.c.bn,
        feats,
        &masks.c,
        rate,
    )?;
    let probs_c = tape.softmax(logits_c)?;
    let loss_c = cross_entropy(tape, probs_c, y_s)?;

    // C′ sees the same features through a detached leaf, so its loss has no
    // gradient path into G.
    let feats_detached = tape.detach(feats);
    let logits_cp = mlp_forward_train(
        tape,
        &bundle.c_prime.spec,
        &cpb,
        &mut bundle.c_prime.bn,
        feats_detached,
        &masks.c_prime,
        rate,
    )?;
    let probs_cp = tape.softmax(logits_cp)?;
    let loss_cp = cross_entropy(tape, probs_cp, y_s)?;

    let root = tape.add(loss_c, loss_cp)?;
    let losses = Step1Losses {
        loss_c: tape.value(loss_c).scalar_value()?,
        loss_c_prime: tape.value(loss_cp).scalar_value()?,
    };
    Ok(Step1Built {
        root,
        losses,
        gb,
        cb,
        cpb,
    })
}

/// One classification step on source: updates `G`, `C` and `C′`.
pub fn step1_update(
    bundle: &mut ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    masks: &Step1Masks,
    cfg: &AdrConfig,
) -> Result<Step1Losses> {
    let mut tape = Tape::new();
    let built = build_step1(&mut tape, bundle, x_s, y_s, masks, cfg)?;
    let gm = tape.backward(built.root)?;
    bundle.opt_g.step(&mut bundle.g.params, &built.gb.grads(&gm))?;
    bundle.opt_c.step(&mut bundle.c.params, &built.cb.grads(&gm))?;
    bundle
        .opt_c_prime
        .step(&mut bundle.c_prime.params, &built.cpb.grads(&gm))?;
    Ok(built.losses)
}

/// The Step-1 objective evaluated without updating anything (batch-statistics
/// forward on a throwaway copy of the bundle).
pub fn step1_loss(
    bundle: &ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    masks: &Step1Masks,
    cfg: &AdrConfig,
) -> Result<Step1Losses> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    Ok(build_step1(&mut tape, &mut scratch, x_s, y_s, masks, cfg)?.losses)
}

struct Step2Built {
    root: crate::tape::NodeId,
    losses: Step2Losses,
    cb: Binding,
}

fn build_step2(
    tape: &mut Tape,
    bundle: &mut ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    x_t: &Tensor,
    masks: &Step2Masks,
    cfg: &AdrConfig,
) -> Result<Step2Built> {
    let rate = cfg.dropout_rate;
    let gb = Binding::bind(tape, &bundle.g.params);
    let cb = Binding::bind(tape, &bundle.c.params);

    // The mini-batch is composed half from source and half from target, so
    // every forward normalizes with shared cross-domain batch statistics.
    // One generator forward feeds both classifier draws; the target rows of
    // the two draws are the twins C₁ and C₂, the source rows of the first
    // draw carry the classification loss.
    let g_bn = &mut bundle.g.bn;
    let c_bn = &mut bundle.c.bn;
    let n_src = x_s.rows();
    let n_tgt = x_t.rows();
    let x_all = tape.leaf(crate::tensor::concat_rows(x_s, x_t));
    let feats = mlp_forward_train(tape, &bundle.g.spec, &gb, g_bn, x_all, &[], 0.0)?;
    let logits_a = mlp_forward_train(
        tape,
        &bundle.c.spec,
        &cb,
        c_bn,
        feats,
        &masks.draw_a,
        rate,
    )?;
    let logits_b = mlp_forward_train(
        tape,
        &bundle.c.spec,
        &cb,
        c_bn,
        feats,
        &masks.draw_b,
        rate,
    )?;

    let logits_src = tape.slice_rows(logits_a, 0, n_src)?;
    let probs_src = tape.softmax(logits_src)?;
    let loss_cls = cross_entropy(tape, probs_src, y_s)?;

    let l1 = tape.slice_rows(logits_a, n_src, n_tgt)?;
    let l2 = tape.slice_rows(logits_b, n_src, n_tgt)?;
    let p1 = tape.softmax(l1)?;
    let p2 = tape.softmax(l2)?;
    let sens = sensitivity(tape, p1, p2)?;

    let neg_sens = tape.scalar_mul(sens, -1.0);
    let root = tape.add(loss_cls, neg_sens)?;
    let losses = Step2Losses {
        loss_cls: tape.value(loss_cls).scalar_value()?,
        adversarial: tape.value(sens).scalar_value()?,
    };
    Ok(Step2Built { root, losses, cb })
}

/// Critic step: updates `C` alone to minimize source loss minus target
/// sensitivity. `G`'s learned parameters are untouched (its batchnorm running
/// statistics still advance, as in any train-mode forward).
pub fn step2_update(
    bundle: &mut ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    x_t: &Tensor,
    masks: &Step2Masks,
    cfg: &AdrConfig,
) -> Result<Step2Losses> {
    let mut tape = Tape::new();
    let built = build_step2(&mut tape, bundle, x_s, y_s, x_t, masks, cfg)?;
    let gm = tape.backward(built.root)?;
    bundle.opt_c.step(&mut bundle.c.params, &built.cb.grads(&gm))?;
    Ok(built.losses)
}

/// The Step-2 objective parts evaluated without updating anything.
pub fn step2_loss(
    bundle: &ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    x_t: &Tensor,
    masks: &Step2Masks,
    cfg: &AdrConfig,
) -> Result<Step2Losses> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    Ok(build_step2(&mut tape, &mut scratch, x_s, y_s, x_t, masks, cfg)?.losses)
}

struct Step3Built {
    root: crate::tape::NodeId,
    losses: Step3Losses,
    gb: Binding,
}

/// The Step-3 objective graph over caller-supplied bindings: sensitivity of
/// the twin classifiers plus the class-usage term on the first twin's
/// probabilities.
pub(crate) fn build_step3_graph(
    tape: &mut Tape,
    g: &mut Model,
    c: &mut Model,
    gb: &Binding,
    cb: &Binding,
    x_t: &Tensor,
    twins: &TwinMasks,
    rate: f64,
    variant: EntropyTermVariant,
) -> Result<(crate::tape::NodeId, Step3Losses)> {
    let xt = tape.leaf(x_t.clone());
    let feats = mlp_forward_train(tape, &g.spec, gb, &mut g.bn, xt, &[], 0.0)?;
    let l1 = mlp_forward_train(tape, &c.spec, cb, &mut c.bn, feats, &twins.first, rate)?;
    let l2 = mlp_forward_train(tape, &c.spec, cb, &mut c.bn, feats, &twins.second, rate)?;
    let p1 = tape.softmax(l1)?;
    let p2 = tape.softmax(l2)?;
    let sens = sensitivity(tape, p1, p2)?;
    let balance = class_balance_term(tape, p1, variant)?;
    let root = tape.add(sens, balance)?;
    let losses = Step3Losses {
        adversarial: tape.value(sens).scalar_value()?,
        balance: tape.value(balance).scalar_value()?,
    };
    Ok((root, losses))
}

fn build_step3(
    tape: &mut Tape,
    bundle: &mut ModelBundle,
    x_t: &Tensor,
    twins: &TwinMasks,
    rate: f64,
    variant: EntropyTermVariant,
) -> Result<Step3Built> {
    let gb = Binding::bind(tape, &bundle.g.params);
    let cb = Binding::bind(tape, &bundle.c.params);
    let (root, losses) = build_step3_graph(
        tape,
        &mut bundle.g,
        &mut bundle.c,
        &gb,
        &cb,
        x_t,
        twins,
        rate,
        variant,
    )?;
    Ok(Step3Built { root, losses, gb })
}

/// Generator step: one optimizer step on `G` alone per entry of `repeats`,
/// each minimizing sensitivity plus the class-usage term with its own fresh
/// twin masks. `C` and `C′` learned parameters are untouched.
pub fn step3_update(
    bundle: &mut ModelBundle,
    x_t: &Tensor,
    repeats: &[TwinMasks],
    cfg: &AdrConfig,
) -> Result<Step3Losses> {
    if repeats.is_empty() {
        return Err(Error::contract("step 3 needs at least one repeat"));
    }
    let mut last = None;
    for twins in repeats {
        let mut tape = Tape::new();
        let built = build_step3(
            &mut tape,
            bundle,
            x_t,
            twins,
            cfg.dropout_rate,
            cfg.entropy_term_variant,
        )?;
        let gm = tape.backward(built.root)?;
        bundle.opt_g.step(&mut bundle.g.params, &built.gb.grads(&gm))?;
        last = Some(built.losses);
    }
    Ok(last.unwrap())
}

/// The Step-3 objective parts evaluated without updating anything.
pub fn step3_loss(
    bundle: &ModelBundle,
    x_t: &Tensor,
    twins: &TwinMasks,
    cfg: &AdrConfig,
) -> Result<Step3Losses> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    Ok(build_step3(
        &mut tape,
        &mut scratch,
        x_t,
        twins,
        cfg.dropout_rate,
        cfg.entropy_term_variant,
    )?
    .losses)
}

// --- entropy-baseline steps -------------------------------------------------

fn build_ent_adv(
    tape: &mut Tape,
    bundle: &mut ModelBundle,
    x_t: &Tensor,
    target_masks: &[DropoutMask],
    rate: f64,
) -> Result<(crate::tape::NodeId, crate::tape::NodeId, Binding, Binding)> {
    let gb = Binding::bind(tape, &bundle.g.params);
    let cb = Binding::bind(tape, &bundle.c.params);
    let xt = tape.leaf(x_t.clone());
    let feats =
        mlp_forward_train(tape, &bundle.g.spec, &gb, &mut bundle.g.bn, xt, &[], 0.0)?;
    let logits = mlp_forward_train(
        tape,
        &bundle.c.spec,
        &cb,
        &mut bundle.c.bn,
        feats,
        target_masks,
        rate,
    )?;
    let probs = tape.softmax(logits)?;
    let h = entropy_per_sample(tape, probs)?;
    Ok((h, probs, gb, cb))
}

/// Entropy-baseline critic step: `C` maximizes target prediction entropy
/// while keeping source classification, via a single dropout-active forward.
pub fn ent_step2_update(
    bundle: &mut ModelBundle,
    x_s: &Tensor,
    y_s: &[usize],
    x_t: &Tensor,
    masks: &EntStep2Masks,
    cfg: &AdrConfig,
) -> Result<Step2Losses> {
    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &bundle.g.params);
    let cb = Binding::bind(&mut tape, &bundle.c.params);

    // Same composed mini-batch as the twin critic step, with one dropout
    // draw: classification on the source rows, entropy on the target rows.
    let g_bn = &mut bundle.g.bn;
    let c_bn = &mut bundle.c.bn;
    let n_src = x_s.rows();
    let n_tgt = x_t.rows();
    let x_all = tape.leaf(crate::tensor::concat_rows(x_s, x_t));
    let feats = mlp_forward_train(&mut tape, &bundle.g.spec, &gb, g_bn, x_all, &[], 0.0)?;
    let logits = mlp_forward_train(
        &mut tape,
        &bundle.c.spec,
        &cb,
        c_bn,
        feats,
        &masks.draw,
        cfg.dropout_rate,
    )?;

    let logits_src = tape.slice_rows(logits, 0, n_src)?;
    let probs_src = tape.softmax(logits_src)?;
    let loss_cls = cross_entropy(&mut tape, probs_src, y_s)?;

    let logits_tgt = tape.slice_rows(logits, n_src, n_tgt)?;
    let probs_tgt = tape.softmax(logits_tgt)?;
    let h = entropy_per_sample(&mut tape, probs_tgt)?;

    let neg_h = tape.scalar_mul(h, -1.0);
    let root = tape.add(loss_cls, neg_h)?;
    let losses = Step2Losses {
        loss_cls: tape.value(loss_cls).scalar_value()?,
        adversarial: tape.value(h).scalar_value()?,
    };
    let gm = tape.backward(root)?;
    bundle.opt_c.step(&mut bundle.c.params, &cb.grads(&gm))?;
    Ok(losses)
}

/// Entropy-baseline generator step: `G` minimizes target prediction entropy
/// plus the class-usage term, `repeats` times with fresh masks.
pub fn ent_step3_update(
    bundle: &mut ModelBundle,
    x_t: &Tensor,
    repeats: &[Vec<DropoutMask>],
    cfg: &AdrConfig,
) -> Result<Step3Losses> {
    if repeats.is_empty() {
        return Err(Error::contract("step 3 needs at least one repeat"));
    }
    let mut last = None;
    for masks in repeats {
        let mut tape = Tape::new();
        let (h, probs, gb, _cb) =
            build_ent_adv(&mut tape, bundle, x_t, masks, cfg.dropout_rate)?;
        let balance = class_balance_term(&mut tape, probs, cfg.entropy_term_variant)?;
        let root = tape.add(h, balance)?;
        let losses = Step3Losses {
            adversarial: tape.value(h).scalar_value()?,
            balance: tape.value(balance).scalar_value()?,
        };
        let gm = tape.backward(root)?;
        bundle.opt_g.step(&mut bundle.g.params, &gb.grads(&gm))?;
        last = Some(losses);
    }
    Ok(last.unwrap())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Eval-mode class probabilities of `head ∘ G` on raw inputs.
pub fn eval_probs(bundle: &ModelBundle, head: Head, x: &Tensor) -> Result<Tensor> {
    let head_model = bundle.head(head);
    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &bundle.g.params);
    let hb = Binding::bind(&mut tape, &head_model.params);
    let input = tape.leaf(x.clone());
    let feats = mlp_forward_eval(&mut tape, &bundle.g.spec, &gb, &bundle.g.bn, input, None, 0.0)?;
    let logits = mlp_forward_eval(
        &mut tape,
        &head_model.spec,
        &hb,
        &head_model.bn,
        feats,
        None,
        0.0,
    )?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

/// Eval-mode probabilities with only one unit of the head's last hidden layer
/// kept (no rescaling). `unit` must index into that layer's width.
pub fn eval_probs_single_unit(
    bundle: &ModelBundle,
    head: Head,
    x: &Tensor,
    unit: usize,
) -> Result<Tensor> {
    let head_model = bundle.head(head);
    let n_layers = head_model.spec.layers().len();
    let width = head_model.spec.last_hidden_width().ok_or_else(|| {
        Error::contract("single-unit evaluation needs a hidden layer")
    })?;
    if unit >= width {
        return Err(Error::contract(format!(
            "unit index {unit} out of range for last hidden width {width}"
        )));
    }
    let mut unit_row = vec![0.0; width];
    unit_row[unit] = 1.0;
    let unit_row = Tensor::from_vec(vec![width], unit_row)?;

    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &bundle.g.params);
    let hb = Binding::bind(&mut tape, &head_model.params);
    let input = tape.leaf(x.clone());
    let feats = mlp_forward_eval(&mut tape, &bundle.g.spec, &gb, &bundle.g.bn, input, None, 0.0)?;
    let logits = mlp_forward_eval_unit_mask(
        &mut tape,
        &head_model.spec,
        &hb,
        &head_model.bn,
        feats,
        n_layers - 2,
        &unit_row,
    )?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_entropy: f64,
}

/// Eval-mode accuracy and mean prediction entropy of a head on a labeled set.
pub fn evaluate(bundle: &ModelBundle, set: &LabeledSet2D, head: Head) -> Result<EvalReport> {
    let probs = eval_probs(bundle, head, &set.points)?;
    Ok(EvalReport {
        accuracy: accuracy(&probs, &set.labels),
        mean_entropy: mean_entropy_value(&probs)?,
    })
}

/// Which statistics batchnorm uses when measuring sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Normalize with the measured batch (train-style forward on a scratch
    /// copy; nothing is mutated).
    Batch,
    /// Normalize with frozen running statistics.
    Running,
}

/// Twin-dropout sensitivity of `C ∘ G` on a batch, measured with the given
/// masks and batchnorm statistics mode. Pure: the bundle is not mutated.
pub fn sensitivity_value(
    bundle: &ModelBundle,
    x: &Tensor,
    twins: &TwinMasks,
    rate: f64,
    mode: StatsMode,
) -> Result<f64> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &scratch.g.params);
    let cb = Binding::bind(&mut tape, &scratch.c.params);
    let input = tape.leaf(x.clone());
    let (l1, l2) = match mode {
        StatsMode::Batch => {
            let feats = mlp_forward_train(
                &mut tape,
                &scratch.g.spec,
                &gb,
                &mut scratch.g.bn,
                input,
                &[],
                0.0,
            )?;
            let l1 = mlp_forward_train(
                &mut tape,
                &scratch.c.spec,
                &cb,
                &mut scratch.c.bn,
                feats,
                &twins.first,
                rate,
            )?;
            let l2 = mlp_forward_train(
                &mut tape,
                &scratch.c.spec,
                &cb,
                &mut scratch.c.bn,
                feats,
                &twins.second,
                rate,
            )?;
            (l1, l2)
        }
        StatsMode::Running => {
            let feats = mlp_forward_eval(
                &mut tape,
                &scratch.g.spec,
                &gb,
                &scratch.g.bn,
                input,
                None,
                0.0,
            )?;
            let l1 = mlp_forward_eval(
                &mut tape,
                &scratch.c.spec,
                &cb,
                &scratch.c.bn,
                feats,
                Some(&twins.first),
                rate,
            )?;
            let l2 = mlp_forward_eval(
                &mut tape,
                &scratch.c.spec,
                &cb,
                &scratch.c.bn,
                feats,
                Some(&twins.second),
                rate,
            )?;
            (l1, l2)
        }
    };
    let p1 = tape.softmax(l1)?;
    let p2 = tape.softmax(l2)?;
    let sens = sensitivity(&mut tape, p1, p2)?;
    tape.value(sens).scalar_value()
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// One evaluation-interval metrics row. Serialized field names are the wire
/// format of `metrics.ndjson`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMetricsRecord {
    pub outer_iteration: usize,
    pub loss_cls_source: f64,
    pub sensitivity_target: f64,
    pub sensitivity_source: f64,
    #[serde(rename = "acc_C_target")]
    pub acc_c_target: f64,
    #[serde(rename = "acc_Cprime_target")]
    pub acc_c_prime_target: f64,
    #[serde(rename = "acc_C_source")]
    pub acc_c_source: f64,
    pub mean_target_entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    /// Twin-dropout sensitivity adversary.
    Adr,
    /// Entropy-based adversary.
    Ent,
    /// Step 1 only: the non-adapted baseline.
    SourceOnly,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub bundle: ModelBundle,
    pub metrics: Vec<TrainMetricsRecord>,
}

fn epochs_needed(n: usize, batch_size: usize, iterations: usize) -> usize {
    let per_epoch = (n / batch_size).max(1);
    iterations / per_epoch + 2
}

fn check_finite(iteration: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Loss values pass through probability clamps that can mask non-finite
/// intermediates, so divergence is also detected on the parameters.
pub(crate) fn check_params_finite(
    iteration: usize,
    models: &[(&str, &crate::nn::ParamStore)],
) -> Result<()> {
    for (label, params) in models {
        for (name, tensor) in params.iter() {
            if tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("{label} parameter {name} became non-finite"),
                });
            }
        }
    }
    Ok(())
}

fn eval_record(
    iteration: usize,
    bundle: &ModelBundle,
    source: &LabeledSet2D,
    target: &LabeledSet2D,
    rate: f64,
    rng_eval: &mut Rng,
) -> Result<TrainMetricsRecord> {
    let probs_src_c = eval_probs(bundle, Head::C, &source.points)?;
    let probs_tgt_c = eval_probs(bundle, Head::C, &target.points)?;
    let probs_tgt_cp = eval_probs(bundle, Head::CPrime, &target.points)?;

    // Sensitivity is defined through twin dropout draws, so those masks stay;
    // batchnorm runs on frozen statistics like the rest of the evaluation.
    let twins_t = TwinMasks::sample(rng_eval, &bundle.c.spec, rate, target.len());
    let sensitivity_target =
        sensitivity_value(bundle, &target.points, &twins_t, rate, StatsMode::Running)?;
    let twins_s = TwinMasks::sample(rng_eval, &bundle.c.spec, rate, source.len());
    let sensitivity_source =
        sensitivity_value(bundle, &source.points, &twins_s, rate, StatsMode::Running)?;

    Ok(TrainMetricsRecord {
        outer_iteration: iteration,
        loss_cls_source: cross_entropy_value(&probs_src_c, &source.labels)?,
        sensitivity_target,
        sensitivity_source,
        acc_c_target: accuracy(&probs_tgt_c, &target.labels),
        acc_c_prime_target: accuracy(&probs_tgt_cp, &target.labels),
        acc_c_source: accuracy(&probs_src_c, &source.labels),
        mean_target_entropy: mean_entropy_value(&probs_tgt_c)?,
    })
}

/// Runs the selected variant for `total_outer_iterations`, emitting a metrics
/// record at iteration 0, every `eval_interval` iterations, and at the end.
pub fn train(
    cfg: &AdrConfig,
    source: &LabeledSet2D,
    target: &LabeledSet2D,
    variant: TrainVariant,
) -> Result<TrainRun> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rng_init = root.split(TAG_INIT);
    let mut bundle = ModelBundle::init(cfg, &mut rng_init)?;

    let mut src_batches = batch_iter(
        source.len(),
        cfg.batch_size_source,
        root.split(TAG_SOURCE_BATCHES),
        epochs_needed(
            source.len(),
            cfg.batch_size_source,
            cfg.total_outer_iterations,
        ),
    )?;
    let mut tgt_batches = batch_iter(
        target.len(),
        cfg.batch_size_target,
        root.split(TAG_TARGET_BATCHES),
        epochs_needed(
            target.len(),
            cfg.batch_size_target,
            cfg.total_outer_iterations,
        ),
    )?;
    let mut rng_masks = root.split(TAG_MASKS);
    let mut rng_eval = root.split(TAG_EVAL);

    let rate = cfg.dropout_rate;
    // With rate 0 the twin draw is vacuous (C₁ = C₂, sensitivity identically
    // zero), so the adversarial steps are skipped and the run collapses to
    // source-only training bit-for-bit.
    let adversarial_steps = match variant {
        TrainVariant::Adr => rate > 0.0,
        TrainVariant::Ent => true,
        TrainVariant::SourceOnly => false,
    };

    let mut metrics = vec![eval_record(
        0, &bundle, source, target, rate, &mut rng_eval,
    )?];

    for it in 1..=cfg.total_outer_iterations {
        let sb = src_batches.next().expect("source batches exhausted");
        let tb = tgt_batches.next().expect("target batches exhausted");
        let (x_s, y_s) = source.gather(&sb);
        let (x_t, _) = target.gather(&tb);

        let m1 = Step1Masks::sample(&mut rng_masks, &bundle, cfg, x_s.rows());
        let out1 = step1_update(&mut bundle, &x_s, &y_s, &m1, cfg)?;
        check_finite(it, "step1 loss", out1.loss_c + out1.loss_c_prime)?;

        if adversarial_steps {
            match variant {
                TrainVariant::Adr => {
                    let m2 =
                        Step2Masks::sample(&mut rng_masks, &bundle, cfg, x_s.rows(), x_t.rows());
                    let out2 = step2_update(&mut bundle, &x_s, &y_s, &x_t, &m2, cfg)?;
                    check_finite(it, "step2 loss", out2.loss_cls + out2.adversarial)?;

                    let repeats: Vec<TwinMasks> = (0..cfg.n_step3_repeats)
                        .map(|_| TwinMasks::sample(&mut rng_masks, &bundle.c.spec, rate, x_t.rows()))
                        .collect();
                    let out3 = step3_update(&mut bundle, &x_t, &repeats, cfg)?;
                    check_finite(it, "step3 loss", out3.adversarial + out3.balance)?;
                }
                TrainVariant::Ent => {
                    let m2 = EntStep2Masks::sample(
                        &mut rng_masks,
                        &bundle,
                        cfg,
                        x_s.rows(),
                        x_t.rows(),
                    );
                    let out2 = ent_step2_update(&mut bundle, &x_s, &y_s, &x_t, &m2, cfg)?;
                    check_finite(it, "step2 loss", out2.loss_cls + out2.adversarial)?;

                    let repeats: Vec<Vec<DropoutMask>> = (0..cfg.n_step3_repeats)
                        .map(|_| sample_masks(&mut rng_masks, &bundle.c.spec, rate, x_t.rows()))
                        .collect();
                    let out3 = ent_step3_update(&mut bundle, &x_t, &repeats, cfg)?;
                    check_finite(it, "step3 loss", out3.adversarial + out3.balance)?;
                }
                TrainVariant::SourceOnly => unreachable!(),
            }
        }

        check_params_finite(
            it,
            &[
                ("generator", &bundle.g.params),
                ("critic", &bundle.c.params),
                ("auxiliary", &bundle.c_prime.params),
            ],
        )?;

        if it % cfg.eval_interval == 0 {
            metrics.push(eval_record(
                it, &bundle, source, target, rate, &mut rng_eval,
            )?);
        }
    }

    if metrics.last().map(|r| r.outer_iteration) != Some(cfg.total_outer_iterations) {
        metrics.push(eval_record(
            cfg.total_outer_iterations,
            &bundle,
            source,
            target,
            rate,
            &mut rng_eval,
        )?);
    }

    Ok(TrainRun { bundle, metrics })
}

pub fn train_adr(cfg: &AdrConfig, source: &LabeledSet2D, target: &LabeledSet2D) -> Result<TrainRun> {
    train(cfg, source, target, TrainVariant::Adr)
}

pub fn train_ent(cfg: &AdrConfig, source: &LabeledSet2D, target: &LabeledSet2D) -> Result<TrainRun> {
    train(cfg, source, target, TrainVariant::Ent)
}

pub fn train_source_only(
    cfg: &AdrConfig,
    source: &LabeledSet2D,
    target: &LabeledSet2D,
) -> Result<TrainRun> {
    train(cfg, source, target, TrainVariant::SourceOnly)
}

pub use losses::KL_EPS;
