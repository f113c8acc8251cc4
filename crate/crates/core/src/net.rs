//! Instantiated segmentation networks: parameter tables, graph
//! construction and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureConfig, BlockPlan, PathKind, Plan, ATLAS_SCALE};
use crate::error::{bail, Error, Result};
use crate::nn::gradcheck::{relative_error, GradCheckReport};
use crate::nn::{softmax_weighted_ce, BatchNormParams, BatchStats, ConvParams, Gradients, Mode, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ArchitectureConfig,
    plan: Plan,
    convs: BTreeMap<String, ConvParams<T>>,
    norms: BTreeMap<String, BatchNormParams<T>>,
}

/// Options for a differentiable forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    pub mode: Mode,
    /// Fold batch statistics into running stats (train mode only).
    pub update_stats: bool,
    /// Leave atlas-path running stats untouched even when updating others.
    pub freeze_atlas_stats: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            update_stats: true,
            freeze_atlas_stats: false,
        }
    }
}

struct Graph<T: Scalar> {
    tape: Tape<T>,
    bindings: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats<T>)>,
}

fn bn_name(conv: &str) -> String {
    format!("{conv}.bn")
}

/// Builds a model without an atlas path.
pub fn build_base_net(config: &ArchitectureConfig, seed: u64) -> Result<Model<f32>> {
    if config.has_atlas() {
        bail!(Architecture, "base net config must not contain an atlas path");
    }
    Model::new(config, seed)
}

/// Builds a model with the additional atlas contracting path.
pub fn build_atlas_aware_net(config: &ArchitectureConfig, seed: u64) -> Result<Model<f32>> {
    if !config.has_atlas() {
        bail!(Architecture, "atlas-aware net config needs an atlas path");
    }
    Model::new(config, seed)
}

impl<T: Scalar> Model<T> {
    /// Kaiming-initialized convolutions, γ=1, β=0.
    pub fn new(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = Rng::new(seed);
        let mut convs = BTreeMap::new();
        let mut norms = BTreeMap::new();
        for b in plan.atlas.iter().chain(&plan.image) {
            if let Some(u) = &b.upsample {
                convs.insert(
                    u.name.clone(),
                    ConvParams::transposed_kaiming(u.in_channels, u.out_channels, &mut rng),
                );
            }
            for c in &b.convs {
                convs.insert(
                    c.name.clone(),
                    ConvParams::kaiming(c.spec.out_channels, c.in_channels, c.spec.kernel, &mut rng),
                );
                if c.normalized {
                    norms.insert(bn_name(&c.name), BatchNormParams::new(c.spec.out_channels));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            plan,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn has_atlas(&self) -> bool {
        self.config.has_atlas()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            convs: self.convs.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self.norms.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every stored tensor (learnable and running statistics) by stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, c) in &self.convs {
            out.push((format!("{k}.weight"), &c.weight));
            out.push((format!("{k}.bias"), &c.bias));
        }
        for (k, n) in &self.norms {
            out.push((format!("{k}.gamma"), &n.gamma));
            out.push((format!("{k}.beta"), &n.beta));
            out.push((format!("{k}.running_mean"), &n.running_mean));
            out.push((format!("{k}.running_var"), &n.running_var));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (layer, field) = name.rsplit_once('.')?;
        match field {
            "weight" => self.convs.get_mut(layer).map(|c| &mut c.weight),
            "bias" => self.convs.get_mut(layer).map(|c| &mut c.bias),
            "gamma" => self.norms.get_mut(layer).map(|n| &mut n.gamma),
            "beta" => self.norms.get_mut(layer).map(|n| &mut n.beta),
            "running_mean" => self.norms.get_mut(layer).map(|n| &mut n.running_mean),
            "running_var" => self.norms.get_mut(layer).map(|n| &mut n.running_var),
            _ => None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        let (layer, field) = name.rsplit_once('.')?;
        match field {
            "weight" => self.convs.get(layer).map(|c| &c.weight),
            "bias" => self.convs.get(layer).map(|c| &c.bias),
            "gamma" => self.norms.get(layer).map(|n| &n.gamma),
            "beta" => self.norms.get(layer).map(|n| &n.beta),
            "running_mean" => self.norms.get(layer).map(|n| &n.running_mean),
            "running_var" => self.norms.get(layer).map(|n| &n.running_var),
            _ => None,
        }
    }

    /// Learnable tensors (conv/transposed-conv weights and biases, γ, β)
    /// whose name satisfies `keep`.
    pub fn learnable_mut(&mut self, keep: impl Fn(&str) -> bool) -> Vec<(&str, &mut Tensor<T>)> {
        let mut out: Vec<(&str, &mut Tensor<T>)> = Vec::new();
        for (k, c) in self.convs.iter_mut() {
            if keep(k) {
                out.push((k.as_str(), &mut c.weight));
                out.push((k.as_str(), &mut c.bias));
            }
        }
        for (k, n) in self.norms.iter_mut() {
            if keep(k) {
                out.push((k.as_str(), &mut n.gamma));
                out.push((k.as_str(), &mut n.beta));
            }
        }
        out
    }

    /// Copies every tensor of `other` whose name and shape also exist here;
    /// returns how many were copied.
    pub fn copy_matching_from(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        for (name, src) in other.named_tensors() {
            if let Some(dst) = self.tensor_mut(&name) {
                if dst.shape() == src.shape() {
                    dst.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.values().map(|c| c.weight.len() + c.bias.len()).sum::<usize>()
            + self.norms.values().map(|n| n.gamma.len() + n.beta.len()).sum::<usize>()
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.learnable_mut(|_| true) {
            t.clear_grad();
        }
    }

    fn check_inputs(&self, image: &Tensor<T>, atlas: Option<&Tensor<T>>) -> Result<()> {
        let (n, c, h, w) = image.dims4()?;
        let m = self.config.size_multiple();
        if c != self.config.input_channels {
            bail!(Shape, "image has {} channels, model expects {}", c, self.config.input_channels);
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            bail!(Shape, "image spatial dims {}x{} must be positive multiples of {}", h, w, m);
        }
        match (self.has_atlas(), atlas) {
            (true, None) => bail!(Invalid, "atlas-aware model needs an atlas patch"),
            (false, Some(_)) => bail!(Invalid, "base model does not take an atlas patch"),
            (true, Some(a)) => {
                let expected = [n, self.config.atlas_channels, h / ATLAS_SCALE, w / ATLAS_SCALE];
                if a.shape() != expected {
                    bail!(
                        Shape,
                        "atlas patch shape {:?}, expected {:?} (one channel per area at 1/{} scale)",
                        a.shape(),
                        expected,
                        ATLAS_SCALE
                    );
                }
            }
            (false, None) => {}
        }
        Ok(())
    }

    fn run_block(
        &self,
        g: &mut Graph<T>,
        b: &BlockPlan,
        mut x: Var,
        mode: Mode,
        pre: &[Var],
        atlas_pre: &[Var],
        atlas_terminal: Option<Var>,
    ) -> Result<(Var, Var)> {
        if b.joins_atlas {
            let a = atlas_terminal.expect("planned join implies atlas path");
            x = g.tape.concat(x, a)?;
        }
        if let Some(u) = &b.upsample {
            let p = &self.convs[&u.name];
            let w = g.tape.leaf(p.weight.clone());
            let bias = g.tape.leaf(p.bias.clone());
            g.bindings.push((format!("{}.weight", u.name), w));
            g.bindings.push((format!("{}.bias", u.name), bias));
            x = g.tape.upsample2(x, w, bias)?;
        }
        for s in &b.skips {
            let src = match s.path {
                PathKind::Image => pre[s.block],
                PathKind::Atlas => atlas_pre[s.block],
            };
            x = g.tape.concat(x, src)?;
        }
        for c in &b.convs {
            let p = &self.convs[&c.name];
            let w = g.tape.leaf(p.weight.clone());
            let bias = g.tape.leaf(p.bias.clone());
            g.bindings.push((format!("{}.weight", c.name), w));
            g.bindings.push((format!("{}.bias", c.name), bias));
            x = g.tape.conv2d(x, w, bias, c.spec.stride, c.spec.pad())?;
            if c.normalized {
                let name = bn_name(&c.name);
                let bn = &self.norms[&name];
                let gamma = g.tape.leaf(bn.gamma.clone());
                let beta = g.tape.leaf(bn.beta.clone());
                g.bindings.push((format!("{name}.gamma"), gamma));
                g.bindings.push((format!("{name}.beta"), beta));
                x = match mode {
                    Mode::Train => {
                        let (y, stats) = g.tape.batchnorm_train(x, gamma, beta, bn.eps)?;
                        g.stats.push((name, stats));
                        y
                    }
                    Mode::Eval => g.tape.batchnorm_eval(
                        x,
                        gamma,
                        beta,
                        bn.running_mean.data(),
                        bn.running_var.data(),
                        bn.eps,
                    )?,
                };
                x = g.tape.relu(x);
            }
        }
        let pre_pool = x;
        if b.pool {
            x = g.tape.maxpool2(x)?;
        }
        Ok((pre_pool, x))
    }

    fn graph(&self, image: &Tensor<T>, atlas: Option<&Tensor<T>>, mode: Mode) -> Result<(Graph<T>, Var)> {
        self.check_inputs(image, atlas)?;
        let mut g = Graph {
            tape: Tape::new(),
            bindings: Vec::new(),
            stats: Vec::new(),
        };
        let mut atlas_pre = Vec::new();
        let mut atlas_terminal = None;
        if let Some(a) = atlas {
            let mut x = g.tape.leaf(a.clone());
            for b in &self.plan.atlas {
                let (pre, post) = self.run_block(&mut g, b, x, mode, &[], &[], None)?;
                atlas_pre.push(pre);
                x = post;
            }
            atlas_terminal = Some(x);
        }
        let mut x = g.tape.leaf(image.clone());
        let mut pre = Vec::new();
        for b in &self.plan.image {
            let (p, post) = self.run_block(&mut g, b, x, mode, &pre, &atlas_pre, atlas_terminal)?;
            pre.push(p);
            x = post;
        }
        Ok((g, x))
    }

    fn apply_stats(&mut self, stats: Vec<(String, BatchStats<T>)>, freeze_atlas: bool) {
        for (name, s) in stats {
            if freeze_atlas && name.starts_with("atl.") {
                continue;
            }
            if let Some(bn) = self.norms.get_mut(&name) {
                bn.update_running(&s.mean, &s.var);
            }
        }
    }

    /// Class scores at output stride 8, eval-mode batchnorm.
    pub fn infer(&self, image: &Tensor<T>, atlas: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (g, logits) = self.graph(image, atlas, Mode::Eval)?;
        Ok(g.tape.value(logits).clone())
    }

    /// Class scores at output stride 8. Train mode uses batch statistics and
    /// updates the running estimates.
    pub fn forward(&mut self, image: &Tensor<T>, atlas: Option<&Tensor<T>>, mode: Mode) -> Result<Tensor<T>> {
        let (g, logits) = self.graph(image, atlas, mode)?;
        let out = g.tape.value(logits).clone();
        if mode == Mode::Train {
            self.apply_stats(g.stats, false);
        }
        Ok(out)
    }

    /// Forward, weighted cross-entropy and backward. Gradients are stored
    /// on the learnable tensors (replacing previous ones); returns the loss.
    pub fn loss_and_grads(
        &mut self,
        image: &Tensor<T>,
        atlas: Option<&Tensor<T>>,
        targets: &[u8],
        class_weights: &[f64],
        opts: StepOptions,
    ) -> Result<f64> {
        let (g, logits) = self.graph(image, atlas, opts.mode)?;
        let (loss, dlogits) = softmax_weighted_ce(g.tape.value(logits), targets, class_weights)?;
        let mut grads: Gradients<T> = g.tape.backward(logits, dlogits.data())?;
        for (name, var) in &g.bindings {
            let grad = grads.take(*var).unwrap_or_else(|| vec![T::zero(); g.tape.value(*var).len()]);
            let t = self
                .tensor_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
            t.set_grad(grad)?;
        }
        if opts.mode == Mode::Train && opts.update_stats {
            self.apply_stats(g.stats, opts.freeze_atlas_stats);
        }
        Ok(loss)
    }
}

/// Argmax over the class axis of (N, C, h, w) scores → N label maps.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = scores.dims4()?;
    let hw = h * w;
    let d = scores.data();
    Ok((0..n)
        .map(|i| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(i * c + k) * hw + p] > d[(i * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ArchitectureConfig,
    pub class_names: Vec<String>,
    pub receptive_field: usize,
    pub output_stride: usize,
    pub parameter_count: usize,
    pub reference_receptive_field: usize,
    pub reference_parameter_count: usize,
    pub seed: u64,
    pub tensors: Vec<String>,
    /// Free-form run metadata (training config, curves summary, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Model<f32> {
    pub fn manifest(&self, class_names: &[String], seed: u64, extra: serde_json::Value) -> Result<CheckpointManifest> {
        let (rf, stride) = arch::receptive_field(&self.config)?;
        Ok(CheckpointManifest {
            config: self.config.clone(),
            class_names: class_names.to_vec(),
            receptive_field: rf,
            output_stride: stride,
            parameter_count: self.parameter_count(),
            reference_receptive_field: arch::REFERENCE_RECEPTIVE_FIELD,
            reference_parameter_count: arch::REFERENCE_PARAMETER_COUNT,
            seed,
            tensors: self.named_tensors().into_iter().map(|(n, _)| n).collect(),
            extra,
        })
    }

    /// Writes `manifest.json` plus one `<name>.ptnsr` per tensor.
    pub fn save(&self, dir: impl AsRef<Path>, manifest: &CheckpointManifest) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, t) in self.named_tensors() {
            t.save(dir.join(format!("{name}.ptnsr")))?;
        }
        let json = serde_json::to_string_pretty(manifest)?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut model = Model::<f32>::new(&manifest.config, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names != manifest.tensors {
            return Err(Error::Format("checkpoint tensor list does not match its config".into()));
        }
        for name in names {
            let t = Tensor::load(dir.join(format!("{name}.ptnsr")))?;
            let slot = model.tensor_mut(&name).expect("listed above");
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok((model, manifest))
    }
}

/// Central-difference check of a whole network's parameter gradients in
/// 64-bit arithmetic: random input, random targets, unit class weights,
/// train-mode batchnorm without running-stat updates. `samples`
/// coordinates are drawn across all learnable tensors. Use inputs of at
/// least 128 px: smaller ones leave the bottom batchnorm a handful of
/// values per channel and the loss becomes too curved for differences.
pub fn check_model_gradients(config: &ArchitectureConfig, seed: u64, side: usize, samples: usize) -> Result<GradCheckReport> {
    let mut model = Model::<f32>::new(config, seed)?.cast::<f64>();
    let mut rng = Rng::new(seed ^ 0x9c0d);
    let n = 2;
    let image = Tensor::<f64>::from_fn(&[n, config.input_channels, side, side], |_| rng.normal());
    let atlas = config.has_atlas().then(|| {
        let q = side / ATLAS_SCALE;
        Tensor::<f64>::from_fn(&[n, config.atlas_channels, q, q], |_| rng.uniform())
    });
    let cells = (side / arch::OUTPUT_STRIDE).pow(2) * n;
    let targets: Vec<u8> = (0..cells).map(|_| rng.below(config.classes) as u8).collect();
    let weights = vec![1.0; config.classes];
    let opts = StepOptions { update_stats: false, ..StepOptions::default() };
    model.loss_and_grads(&image, atlas.as_ref(), &targets, &weights, opts)?;
    let analytic: Vec<Vec<f64>> = model
        .learnable_mut(|_| true)
        .into_iter()
        .map(|(name, t)| t.grad().map(<[f64]>::to_vec).ok_or_else(|| Error::MissingGrad(name.to_string())))
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let step = 1e-7;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for _ in 0..samples {
        let mut j = rng.below(total);
        let mut ti = 0;
        while j >= sizes[ti] {
            j -= sizes[ti];
            ti += 1;
        }
        let eval = |delta: f64, model: &mut Model<f64>| -> Result<f64> {
            {
                let mut params = model.learnable_mut(|_| true);
                params[ti].1.data_mut()[j] += delta;
            }
            let l = model.loss_and_grads(&image, atlas.as_ref(), &targets, &weights, opts);
            let mut params = model.learnable_mut(|_| true);
            params[ti].1.data_mut()[j] -= delta;
            l
        };
        let numeric = (eval(step, &mut model)? - eval(-step, &mut model)?) / (2.0 * step);
        // below 1e-5 the difference quotient is dominated by rounding (~eps·loss/step)
        let err = relative_error(analytic[ti][j], numeric).min((analytic[ti][j] - numeric).abs() / 1e-5);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((ti, j));
        }
    }
    Ok(report)
}
