//! Semi-supervised GAN training with the twin-dropout critic, at 2-D scale.
//!
//! The critic is a K-class classifier consuming data points directly. Its
//! objective combines labeled cross-entropy, twin-dropout sensitivity on
//! unlabeled and generated batches (with opposite signs), and the class-usage
//! term. The generator maps noise to points and minimizes its own sensitivity
//! plus feature matching against the critic's designated hidden layer.

use serde::{Deserialize, Serialize};

use crate::adr::TwinMasks;
use crate::datasets::{batch_iter, LabeledSet2D};
use crate::error::{Error, Result};
use crate::losses::{
    accuracy, class_balance_term, cross_entropy, sensitivity, EntropyTermVariant,
};
use crate::nn::{
    mlp_forward_eval, mlp_forward_eval_features, mlp_forward_train, sample_masks, Binding, Model,
    MlpSpec, OptimizerKind, OptimizerState,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 1;
const TAG_LABELED_BATCHES: u64 = 2;
const TAG_UNLABELED_BATCHES: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_MASKS: u64 = 5;
const TAG_EVAL: u64 = 6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanConfig {
    pub z_dim: usize,
    pub n_classes: usize,
    pub n_labeled_per_class: usize,
    pub n_unlabeled: usize,
    /// Radius of the circle the mixture means sit on.
    pub separation: f64,
    /// Per-component standard deviation of the mixture.
    pub mixture_noise: f64,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub total_iterations: usize,
    /// Which critic hidden layer provides the feature map `f`.
    pub feature_layer: usize,
    pub eval_interval: usize,
    pub entropy_term_variant: EntropyTermVariant,
    /// Disables both sensitivity terms when false.
    pub use_adversarial: bool,
    /// Disables the class-usage term when false.
    pub use_balance: bool,
    /// Swaps the signs of the two critic sensitivity terms (ablation).
    pub flip_adv_signs: bool,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 8,
            n_classes: 2,
            n_labeled_per_class: 10,
            n_unlabeled: 2000,
            separation: 2.0,
            mixture_noise: 1.25,
            dropout_rate: 0.5,
            learning_rate: 2e-4,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            total_iterations: 2000,
            feature_layer: 1,
            eval_interval: 50,
            entropy_term_variant: EntropyTermVariant::Marginal,
            use_adversarial: true,
            use_balance: true,
            flip_adv_signs: false,
            generator_hidden: vec![64, 64],
            critic_hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn generator_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.z_dim];
        widths.extend_from_slice(&self.generator_hidden);
        widths.push(2);
        MlpSpec::classifier_stack(&widths, false)
    }

    pub fn critic_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![2];
        widths.extend_from_slice(&self.critic_hidden);
        widths.push(self.n_classes);
        MlpSpec::classifier_stack(&widths, true)
    }

    fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::contract("z_dim must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::contract("need at least 2 classes"));
        }
        if self.feature_layer >= self.critic_hidden.len() {
            return Err(Error::contract(format!(
                "feature layer {} out of range for {} hidden layers",
                self.feature_layer,
                self.critic_hidden.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract("dropout_rate must lie in [0, 1)"));
        }
        if self.eval_interval == 0 {
            return Err(Error::contract("eval_interval must be at least 1"));
        }
        Ok(())
    }

    /// True when neither unlabeled nor generated data enters the critic
    /// objective: the plain supervised baseline.
    pub fn labeled_only(&self) -> bool {
        !self.use_adversarial && !self.use_balance
    }
}

/// Noise-to-point generator and classifier-critic with optimizer states.
#[derive(Clone, Debug)]
pub struct GanBundle {
    pub generator: Model,
    pub critic: Model,
    pub opt_generator: OptimizerState,
    pub opt_critic: OptimizerState,
}

impl GanBundle {
    pub fn init(cfg: &GanConfig, rng: &mut Rng) -> Result<GanBundle> {
        let generator = Model::init(cfg.generator_spec()?, rng);
        let critic = Model::init(cfg.critic_spec()?, rng);
        let opt_generator = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &generator.params);
        let opt_critic = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &critic.params);
        Ok(GanBundle {
            generator,
            critic,
            opt_generator,
            opt_critic,
        })
    }
}

/// Masks for one critic step. Twin sets exist only when the corresponding
/// objective terms are enabled, so disabled modes draw nothing from the
/// stream.
#[derive(Clone, Debug)]
pub struct GanCriticMasks {
    pub labeled: Vec<crate::nn::DropoutMask>,
    pub unlabeled: Option<TwinMasks>,
    pub fake: Option<TwinMasks>,
}

impl GanCriticMasks {
    pub fn sample(
        rng: &mut Rng,
        cfg: &GanConfig,
        critic_spec: &MlpSpec,
        n_labeled: usize,
        n_unlabeled: usize,
        n_fake: usize,
    ) -> GanCriticMasks {
        let rate = cfg.dropout_rate;
        let labeled = sample_masks(rng, critic_spec, rate, n_labeled);
        let unlabeled = (cfg.use_adversarial || cfg.use_balance)
            .then(|| TwinMasks::sample(rng, critic_spec, rate, n_unlabeled));
        let fake = cfg
            .use_adversarial
            .then(|| TwinMasks::sample(rng, critic_spec, rate, n_fake));
        GanCriticMasks {
            labeled,
            unlabeled,
            fake,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GanCriticLosses {
    pub labeled_ce: f64,
    pub adv_unlabeled: f64,
    pub adv_fake: f64,
    pub balance: f64,
    pub total: f64,
}

/// Squared distance between the column means of two feature nodes.
pub fn feature_mean_sq_diff(tape: &mut Tape, f_a: NodeId, f_b: NodeId) -> Result<NodeId> {
    let ma = tape.col_mean(f_a)?;
    let mb = tape.col_mean(f_b)?;
    let diff = tape.sub(ma, mb)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

fn twin_sensitivity(
    tape: &mut Tape,
    critic: &mut Model,
    cb: &Binding,
    x: NodeId,
    twins: &TwinMasks,
    rate: f64,
) -> Result<(NodeId, NodeId)> {
    let l1 = mlp_forward_train(tape, &critic.spec, cb, &mut critic.bn, x, &twins.first, rate)?;
    let l2 = mlp_forward_train(tape, &critic.spec, cb, &mut critic.bn, x, &twins.second, rate)?;
    let p1 = tape.softmax(l1)?;
    let p2 = tape.softmax(l2)?;
    let sens = sensitivity(tape, p1, p2)?;
    Ok((sens, p1))
}

struct CriticBuilt {
    root: NodeId,
    losses: GanCriticLosses,
    cb: Binding,
}

/// The critic objective graph over a caller-supplied binding.
pub(crate) fn build_critic_graph(
    tape: &mut Tape,
    critic: &mut Model,
    cb: &Binding,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    unlabeled_x: &Tensor,
    fake_x: &Tensor,
    masks: &GanCriticMasks,
    cfg: &GanConfig,
) -> Result<(NodeId, GanCriticLosses)> {
    if labeled_x.rows() == 0 || unlabeled_x.rows() == 0 || fake_x.rows() == 0 {
        return Err(Error::contract("critic batches must be non-empty"));
    }
    let rate = cfg.dropout_rate;

    let xl = tape.leaf(labeled_x.clone());
    let logits_l =
        mlp_forward_train(tape, &critic.spec, cb, &mut critic.bn, xl, &masks.labeled, rate)?;
    let probs_l = tape.softmax(logits_l)?;
    let ce = cross_entropy(tape, probs_l, labeled_y)?;

    let mut root = ce;
    let mut adv_unlabeled = 0.0;
    let mut adv_fake = 0.0;
    let mut balance_value = 0.0;
    let mut unlabeled_p1 = None;

    if let Some(twins) = &masks.unlabeled {
        let xu = tape.leaf(unlabeled_x.clone());
        let (sens_u, p1) = twin_sensitivity(tape, critic, cb, xu, twins, rate)?;
        unlabeled_p1 = Some(p1);
        if cfg.use_adversarial {
            let twins_g = masks
                .fake
                .as_ref()
                .ok_or_else(|| Error::contract("missing fake twin masks"))?;
            let xg = tape.leaf(fake_x.clone());
            let (sens_g, _) = twin_sensitivity(tape, critic, cb, xg, twins_g, rate)?;
            adv_unlabeled = tape.value(sens_u).scalar_value()?;
            adv_fake = tape.value(sens_g).scalar_value()?;
            // Built as one difference node so identical batches with identical
            // masks cancel exactly.
            let diff = tape.sub(sens_u, sens_g)?;
            let sign = if cfg.flip_adv_signs { -1.0 } else { 1.0 };
            let signed = tape.scalar_mul(diff, sign);
            root = tape.add(root, signed)?;
        }
    }

    if cfg.use_balance {
        let p1 = unlabeled_p1.ok_or_else(|| Error::contract("missing unlabeled masks"))?;
        let bal = class_balance_term(tape, p1, cfg.entropy_term_variant)?;
        balance_value = tape.value(bal).scalar_value()?;
        root = tape.add(root, bal)?;
    }

    let losses = GanCriticLosses {
        labeled_ce: tape.value(ce).scalar_value()?,
        adv_unlabeled,
        adv_fake,
        balance: balance_value,
        total: tape.value(root).scalar_value()?,
    };
    Ok((root, losses))
}

fn build_critic_loss(
    tape: &mut Tape,
    bundle: &mut GanBundle,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    unlabeled_x: &Tensor,
    fake_x: &Tensor,
    masks: &GanCriticMasks,
    cfg: &GanConfig,
) -> Result<CriticBuilt> {
    let cb = Binding::bind(tape, &bundle.critic.params);
    let (root, losses) = build_critic_graph(
        tape,
        &mut bundle.critic,
        &cb,
        labeled_x,
        labeled_y,
        unlabeled_x,
        fake_x,
        masks,
        cfg,
    )?;
    Ok(CriticBuilt { root, losses, cb })
}

/// The critic objective: labeled cross-entropy, plus sensitivity pushed down
/// on unlabeled and up on generated batches, plus the class-usage term.
/// Returns the loss parts without updating anything.
pub fn gan_critic_loss(
    bundle: &GanBundle,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    unlabeled_x: &Tensor,
    fake_x: &Tensor,
    masks: &GanCriticMasks,
    cfg: &GanConfig,
) -> Result<GanCriticLosses> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    Ok(build_critic_loss(
        &mut tape,
        &mut scratch,
        labeled_x,
        labeled_y,
        unlabeled_x,
        fake_x,
        masks,
        cfg,
    )?
    .losses)
}

/// One optimizer step on the critic's parameters.
pub fn gan_critic_step(
    bundle: &mut GanBundle,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    unlabeled_x: &Tensor,
    fake_x: &Tensor,
    masks: &GanCriticMasks,
    cfg: &GanConfig,
) -> Result<GanCriticLosses> {
    let mut tape = Tape::new();
    let built = build_critic_loss(
        &mut tape,
        bundle,
        labeled_x,
        labeled_y,
        unlabeled_x,
        fake_x,
        masks,
        cfg,
    )?;
    let gm = tape.backward(built.root)?;
    bundle
        .opt_critic
        .step(&mut bundle.critic.params, &built.cb.grads(&gm))?;
    Ok(built.losses)
}

#[derive(Clone, Copy, Debug)]
pub struct GanGeneratorLosses {
    pub adv_fake: f64,
    pub feature_matching: f64,
    pub total: f64,
}

struct GeneratorBuilt {
    root: NodeId,
    losses: GanGeneratorLosses,
    gb: Binding,
}

/// The generator objective graph over caller-supplied bindings.
pub(crate) fn build_generator_graph(
    tape: &mut Tape,
    generator: &mut Model,
    critic: &mut Model,
    gb: &Binding,
    cb: &Binding,
    z: &Tensor,
    unlabeled_x: &Tensor,
    fake_twins: Option<&TwinMasks>,
    cfg: &GanConfig,
) -> Result<(NodeId, GanGeneratorLosses)> {
    let rate = cfg.dropout_rate;
    let zn = tape.leaf(z.clone());
    let fake = mlp_forward_train(tape, &generator.spec, gb, &mut generator.bn, zn, &[], 0.0)?;

    // Feature matching through the eval-mode critic: frozen pre-step running
    // statistics, no dropout, still differentiable back to the generator.
    // Built before the twin forwards so those train-mode statistic updates
    // cannot leak into what backward treats as constants.
    let f_fake =
        mlp_forward_eval_features(tape, &critic.spec, cb, &critic.bn, fake, cfg.feature_layer)?;
    let xu = tape.leaf(unlabeled_x.clone());
    let f_real =
        mlp_forward_eval_features(tape, &critic.spec, cb, &critic.bn, xu, cfg.feature_layer)?;
    let fm = feature_mean_sq_diff(tape, f_fake, f_real)?;
    let feature_matching = tape.value(fm).scalar_value()?;

    let mut adv_fake = 0.0;
    let mut root = None;
    if let Some(twins) = fake_twins {
        let (sens_g, _) = twin_sensitivity(tape, critic, cb, fake, twins, rate)?;
        adv_fake = tape.value(sens_g).scalar_value()?;
        root = Some(sens_g);
    }
    let root = match root {
        Some(adv) => tape.add(adv, fm)?,
        None => fm,
    };

    let losses = GanGeneratorLosses {
        adv_fake,
        feature_matching,
        total: tape.value(root).scalar_value()?,
    };
    Ok((root, losses))
}

fn build_generator_loss(
    tape: &mut Tape,
    bundle: &mut GanBundle,
    z: &Tensor,
    unlabeled_x: &Tensor,
    fake_twins: Option<&TwinMasks>,
    cfg: &GanConfig,
) -> Result<GeneratorBuilt> {
    let gb = Binding::bind(tape, &bundle.generator.params);
    let cb = Binding::bind(tape, &bundle.critic.params);
    let (root, losses) = build_generator_graph(
        tape,
        &mut bundle.generator,
        &mut bundle.critic,
        &gb,
        &cb,
        z,
        unlabeled_x,
        fake_twins,
        cfg,
    )?;
    Ok(GeneratorBuilt { root, losses, gb })
}

/// The generator objective: its own twin sensitivity plus feature matching.
/// Returns the loss parts without updating anything.
pub fn gan_generator_loss(
    bundle: &GanBundle,
    z: &Tensor,
    unlabeled_x: &Tensor,
    fake_twins: Option<&TwinMasks>,
    cfg: &GanConfig,
) -> Result<GanGeneratorLosses> {
    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    Ok(build_generator_loss(&mut tape, &mut scratch, z, unlabeled_x, fake_twins, cfg)?.losses)
}

/// One optimizer step on the generator's parameters.
pub fn gan_generator_step(
    bundle: &mut GanBundle,
    z: &Tensor,
    unlabeled_x: &Tensor,
    fake_twins: Option<&TwinMasks>,
    cfg: &GanConfig,
) -> Result<GanGeneratorLosses> {
    let mut tape = Tape::new();
    let built = build_generator_loss(&mut tape, bundle, z, unlabeled_x, fake_twins, cfg)?;
    let gm = tape.backward(built.root)?;
    bundle
        .opt_generator
        .step(&mut bundle.generator.params, &built.gb.grads(&gm))?;
    Ok(built.losses)
}

fn sample_noise(rng: &mut Rng, n: usize, z_dim: usize) -> Tensor {
    let data = (0..n * z_dim).map(|_| rng.normal()).collect();
    Tensor::raw(vec![n, z_dim], data)
}

/// Train-mode generator forward on a scratch tape; returns plain values.
fn generate_train(bundle: &mut GanBundle, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &bundle.generator.params);
    let zn = tape.leaf(z.clone());
    let fake = mlp_forward_train(
        &mut tape,
        &bundle.generator.spec,
        &gb,
        &mut bundle.generator.bn,
        zn,
        &[],
        0.0,
    )?;
    Ok(tape.value(fake).clone())
}

/// Eval-mode samples from the trained generator.
pub fn generate_samples(bundle: &GanBundle, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let z = sample_noise(rng, n, bundle.generator.spec.input_width());
    let mut tape = Tape::new();
    let gb = Binding::bind(&mut tape, &bundle.generator.params);
    let zn = tape.leaf(z);
    let fake = mlp_forward_eval(
        &mut tape,
        &bundle.generator.spec,
        &gb,
        &bundle.generator.bn,
        zn,
        None,
        0.0,
    )?;
    Ok(tape.value(fake).clone())
}

/// Eval-mode class probabilities of the critic on raw points.
pub fn critic_probs(bundle: &GanBundle, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let cb = Binding::bind(&mut tape, &bundle.critic.params);
    let input = tape.leaf(x.clone());
    let logits = mlp_forward_eval(
        &mut tape,
        &bundle.critic.spec,
        &cb,
        &bundle.critic.bn,
        input,
        None,
        0.0,
    )?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanMetricsRecord {
    pub iteration: usize,
    pub test_accuracy: f64,
    pub feature_matching: f64,
    pub l_adv_unlabeled: f64,
    pub l_adv_fake: f64,
}

#[derive(Clone, Debug)]
pub struct GanRun {
    pub bundle: GanBundle,
    pub metrics: Vec<GanMetricsRecord>,
}

fn first_rows(x: &Tensor, n: usize) -> Tensor {
    let n = n.min(x.rows());
    Tensor::raw(vec![n, x.cols()], x.data()[..n * x.cols()].to_vec())
}

fn gan_eval_record(
    iteration: usize,
    bundle: &GanBundle,
    unlabeled: &Tensor,
    test_set: &LabeledSet2D,
    cfg: &GanConfig,
    rng_eval: &mut Rng,
) -> Result<GanMetricsRecord> {
    let probs = critic_probs(bundle, &test_set.points)?;
    let test_accuracy = accuracy(&probs, &test_set.labels);

    // Fixed eval protocol: a fresh noise batch, fresh twin masks, and the
    // leading slice of the unlabeled pool.
    let n = cfg.batch_size.min(unlabeled.rows());
    let xu = first_rows(unlabeled, n);
    let z = sample_noise(rng_eval, n, cfg.z_dim);
    let critic_spec = &bundle.critic.spec;
    let twins_u = TwinMasks::sample(rng_eval, critic_spec, cfg.dropout_rate, n);
    let twins_g = TwinMasks::sample(rng_eval, critic_spec, cfg.dropout_rate, n);

    let mut scratch = bundle.clone();
    let mut tape = Tape::new();
    let cb = Binding::bind(&mut tape, &scratch.critic.params);
    let gb = Binding::bind(&mut tape, &scratch.generator.params);
    let zn = tape.leaf(z);
    let fake = mlp_forward_train(
        &mut tape,
        &scratch.generator.spec,
        &gb,
        &mut scratch.generator.bn,
        zn,
        &[],
        0.0,
    )?;
    let xu_node = tape.leaf(xu);
    let (sens_u, _) = twin_sensitivity(
        &mut tape,
        &mut scratch.critic,
        &cb,
        xu_node,
        &twins_u,
        cfg.dropout_rate,
    )?;
    let (sens_g, _) = twin_sensitivity(
        &mut tape,
        &mut scratch.critic,
        &cb,
        fake,
        &twins_g,
        cfg.dropout_rate,
    )?;
    let f_fake = mlp_forward_eval_features(
        &mut tape,
        &scratch.critic.spec,
        &cb,
        &scratch.critic.bn,
        fake,
        cfg.feature_layer,
    )?;
    let f_real = mlp_forward_eval_features(
        &mut tape,
        &scratch.critic.spec,
        &cb,
        &scratch.critic.bn,
        xu_node,
        cfg.feature_layer,
    )?;
    let fm = feature_mean_sq_diff(&mut tape, f_fake, f_real)?;

    Ok(GanMetricsRecord {
        iteration,
        test_accuracy,
        feature_matching: tape.value(fm).scalar_value()?,
        l_adv_unlabeled: tape.value(sens_u).scalar_value()?,
        l_adv_fake: tape.value(sens_g).scalar_value()?,
    })
}

/// Alternates exactly one critic step and one generator step per iteration.
/// With adversarial and balance terms disabled, the generator machinery is
/// skipped entirely and the critic trains on labeled data alone.
pub fn train_gan_ssl(
    cfg: &GanConfig,
    labeled: &LabeledSet2D,
    unlabeled: &Tensor,
    test_set: &LabeledSet2D,
) -> Result<GanRun> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut rng_init = root.split(TAG_INIT);
    let mut bundle = GanBundle::init(cfg, &mut rng_init)?;

    let labeled_batch = cfg.batch_size.min(labeled.len());
    let epochs_l = cfg.total_iterations / (labeled.len() / labeled_batch).max(1) + 2;
    let mut labeled_batches = batch_iter(
        labeled.len(),
        labeled_batch,
        root.split(TAG_LABELED_BATCHES),
        epochs_l,
    )?;

    let labeled_only = cfg.labeled_only();
    let unlabeled_batch = cfg.batch_size.min(unlabeled.rows());
    let mut unlabeled_batches = if labeled_only {
        None
    } else {
        let epochs_u = cfg.total_iterations / (unlabeled.rows() / unlabeled_batch).max(1) + 2;
        Some(batch_iter(
            unlabeled.rows(),
            unlabeled_batch,
            root.split(TAG_UNLABELED_BATCHES),
            epochs_u,
        )?)
    };
    let mut rng_noise = root.split(TAG_NOISE);
    let mut rng_masks = root.split(TAG_MASKS);
    let mut rng_eval = root.split(TAG_EVAL);

    let gather_unlabeled = |idx: &[usize]| -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * 2);
        for &i in idx {
            data.push(unlabeled.get2(i, 0));
            data.push(unlabeled.get2(i, 1));
        }
        Tensor::raw(vec![idx.len(), 2], data)
    };

    let mut metrics = vec![gan_eval_record(
        0, &bundle, unlabeled, test_set, cfg, &mut rng_eval,
    )?];

    for it in 1..=cfg.total_iterations {
        let lb = labeled_batches.next().expect("labeled batches exhausted");
        let (x_l, y_l) = labeled.gather(&lb);

        if labeled_only {
            // Plain supervised step: cross-entropy on the labeled batch only.
            let masks = sample_masks(
                &mut rng_masks,
                &bundle.critic.spec,
                cfg.dropout_rate,
                x_l.rows(),
            );
            let mut tape = Tape::new();
            let cb = Binding::bind(&mut tape, &bundle.critic.params);
            let xl = tape.leaf(x_l);
            let logits = mlp_forward_train(
                &mut tape,
                &bundle.critic.spec,
                &cb,
                &mut bundle.critic.bn,
                xl,
                &masks,
                cfg.dropout_rate,
            )?;
            let probs = tape.softmax(logits)?;
            let ce = cross_entropy(&mut tape, probs, &y_l)?;
            let loss = tape.value(ce).scalar_value()?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("labeled-only loss = {loss}"),
                });
            }
            let gm = tape.backward(ce)?;
            bundle
                .opt_critic
                .step(&mut bundle.critic.params, &cb.grads(&gm))?;
        } else {
            let ub = unlabeled_batches
                .as_mut()
                .unwrap()
                .next()
                .expect("unlabeled batches exhausted");
            let x_u = gather_unlabeled(&ub);

            // Critic step on a detached fake batch.
            let z = sample_noise(&mut rng_noise, unlabeled_batch, cfg.z_dim);
            let fake = generate_train(&mut bundle, &z)?;
            let masks = GanCriticMasks::sample(
                &mut rng_masks,
                cfg,
                &bundle.critic.spec,
                x_l.rows(),
                x_u.rows(),
                fake.rows(),
            );
            let closs = gan_critic_step(&mut bundle, &x_l, &y_l, &x_u, &fake, &masks, cfg)?;
            if !closs.total.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("critic loss = {}", closs.total),
                });
            }

            // Generator step with fresh noise and fresh twin masks.
            let z = sample_noise(&mut rng_noise, unlabeled_batch, cfg.z_dim);
            let twins = cfg.use_adversarial.then(|| {
                TwinMasks::sample(
                    &mut rng_masks,
                    &bundle.critic.spec,
                    cfg.dropout_rate,
                    unlabeled_batch,
                )
            });
            let gloss = gan_generator_step(&mut bundle, &z, &x_u, twins.as_ref(), cfg)?;
            if !gloss.total.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("generator loss = {}", gloss.total),
                });
            }
        }

        crate::adr::check_params_finite(
            it,
            &[
                ("generator", &bundle.generator.params),
                ("critic", &bundle.critic.params),
            ],
        )?;

        if it % cfg.eval_interval == 0 {
            metrics.push(gan_eval_record(
                it, &bundle, unlabeled, test_set, cfg, &mut rng_eval,
            )?);
        }
    }

    if metrics.last().map(|r| r.iteration) != Some(cfg.total_iterations) {
        metrics.push(gan_eval_record(
            cfg.total_iterations,
            &bundle,
            unlabeled,
            test_set,
            cfg,
            &mut rng_eval,
        )?);
    }

    Ok(GanRun { bundle, metrics })
}
