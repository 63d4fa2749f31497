//! Encoder/decoder depth network, its multi-scale loss and training.
//!
//! The network reads two stacked RGB frames (the reference first) and
//! predicts the reference frame's depth at several scales, the finest at a
//! quarter of the input resolution.

mod check;
mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{pool_depth, DatasetError, Sample, TARGET_FLOOR};
use crate::gradkit::{
    bilinear_upsample_kernel, kaiming, BatchStats, BnMode, GradError, Graph, Real, Tensor, Var,
};
use crate::inference::InferenceError;
use crate::scenegen::RgbGrid;

pub use check::{network_gradient_check, NetworkGradReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{
    constant_oracle, evaluate, finetune_curriculum, train, EpochLog, EvalPlan, StageLog, TrainLog, TrainOptions,
};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] InferenceError),
}

/// Layer widths of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    /// Per encoder stage: channels of the stride-2 conv and of its optional
    /// stride-1 refinement.
    pub encoder: Vec<(usize, Option<usize>)>,
    /// Channels of the upsampling modules, coarsest first.
    pub decoder: Vec<usize>,
    /// Meters per unit of raw network output.
    pub depth_unit: f64,
    /// Initial bias of every depth head, meters.
    pub initial_depth: f64,
}

impl NetworkConfig {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            encoder: vec![
                (32, None),
                (64, None),
                (128, Some(128)),
                (256, Some(256)),
                (256, Some(256)),
                (512, Some(256)),
            ],
            decoder: vec![256, 128, 64, 32],
            depth_unit: 10.0,
            initial_depth: 50.0,
        }
    }

    /// Width divided by four, four encoder stages.
    pub fn mini() -> Self {
        Self {
            name: "mini".into(),
            encoder: vec![(8, None), (16, None), (32, Some(32)), (64, Some(64))],
            decoder: vec![16, 8],
            depth_unit: 10.0,
            initial_depth: 50.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, NetError> {
        match name {
            "full" => Ok(Self::full()),
            "mini" => Ok(Self::mini()),
            other => Err(NetError::Config(format!("unknown network config `{other}`"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder.len()
    }

    /// Input sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.stages() < 3 {
            return Err(NetError::Config("at least three encoder stages are needed".into()));
        }
        if self.decoder.len() != self.stages() - 2 {
            return Err(NetError::Config(format!(
                "{} encoder stages need {} decoder modules, got {}",
                self.stages(),
                self.stages() - 2,
                self.decoder.len()
            )));
        }
        if !(self.depth_unit > 0.0) {
            return Err(NetError::Config("depth unit must be positive".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<(), NetError> {
        let d = self.divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(NetError::Config(format!(
                "{width}x{height} input is not divisible by {d} for the {} config",
                self.name
            )));
        }
        Ok(())
    }

    /// Side lengths of the outputs for a square input, finest first.
    pub fn output_sizes(&self, input: usize) -> Vec<usize> {
        (2..=self.stages()).map(|k| input >> k).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    w: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<(ConvBn, Option<ConvBn>)>,
    /// Transposed conv weight and the 3x3 block that follows it, coarsest first.
    decoder: Vec<(usize, ConvBn)>,
    /// Depth heads, coarsest first.
    heads: Vec<Head>,
    /// Depth upsamplers feeding each decoder level.
    up_depth: Vec<usize>,
}

/// Running batch-norm statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DepthNet<T> {
    pub config: NetworkConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
    layout: Layout,
}

/// Recorded forward pass.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub param_vars: Vec<Var>,
    /// Depth in meters per scale, finest first.
    pub outputs: Vec<Var>,
    pub stats: Vec<Option<BatchStats<T>>>,
    /// Output of each encoder stage, for inspection.
    pub features: Vec<Var>,
}

struct Builder<'a, T: Real> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBn {
        let init = kaiming(&[cout, cin, 3, 3], cin * 9, self.rng);
        let w = self.add(format!("{name}.weight"), init);
        let gamma = self.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()));
        let beta = self.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.running.push(RunningStats { mean: vec![T::zero(); cout], var: vec![T::one(); cout] });
        ConvBn { w, gamma, beta, bn: self.running.len() - 1, stride }
    }

    fn head(&mut self, name: &str, cin: usize, bias: f64) -> Head {
        let init = kaiming(&[1, cin, 3, 3], cin * 9, self.rng);
        let w = self.add(format!("{name}.weight"), init);
        let b = self.add(format!("{name}.bias"), Tensor::full(&[1], T::from_f64_lossy(bias)));
        Head { w, b }
    }
}

impl<T: Real> DepthNet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T> { names: vec![], params: vec![], running: vec![], rng: &mut rng };
        let stages = config.stages();
        let mut encoder = Vec::new();
        let mut cin = 6;
        let mut skip_channels = Vec::new();
        for (i, &(c, refine)) in config.encoder.iter().enumerate() {
            let k = i + 1;
            let conv = b.conv_bn(&format!("conv{k}"), cin, c, 2);
            let refine_block = refine.map(|r| b.conv_bn(&format!("conv{k}.1"), c, r, 1));
            cin = refine.unwrap_or(c);
            skip_channels.push(cin);
            encoder.push((conv, refine_block));
        }
        let bias = config.initial_depth / config.depth_unit;
        let mut heads = vec![b.head(&format!("depth{stages}"), cin, bias)];
        let mut decoder = Vec::new();
        let mut up_depth = Vec::new();
        for (i, &c) in config.decoder.iter().enumerate() {
            let k = stages - 1 - i;
            let init = kaiming(&[cin, c, 4, 4], cin * 4, b.rng);
            let up = b.add(format!("deconv{k}.up.weight"), init);
            let conv = b.conv_bn(&format!("deconv{k}"), c, c, 1);
            decoder.push((up, conv));
            up_depth.push(b.add(format!("up_depth{}.weight", k + 1), bilinear_upsample_kernel()));
            cin = c + skip_channels[k - 1] + 1;
            heads.push(b.head(&format!("depth{k}"), cin, bias));
        }
        let Builder { names, params, running, .. } = b;
        Ok(Self { config, names, params, running, layout: Layout { encoder, decoder, heads, up_depth } })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> DepthNet<U> {
        DepthNet {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: Tensor { shape: vec![r.mean.len()], data: r.mean.clone() }.cast().data,
                    var: Tensor { shape: vec![r.var.len()], data: r.var.clone() }.cast().data,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Records a forward pass over `input` of shape `(N, 6, H, W)`.
    pub fn forward(&self, input: &Tensor<T>, mode: BnMode, trainable: bool) -> Result<ForwardPass<T>, NetError> {
        let (_, c, h, w) = input.dims4("depthnet")?;
        if c != 6 {
            return Err(GradError::Shape { op: "depthnet input".into(), left: input.shape.clone(), right: vec![6] }.into());
        }
        self.config.check_input(h, w)?;
        let mut g = Graph::new();
        let param_vars: Vec<Var> =
            self.params.iter().map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) }).collect();
        let mut stats = vec![None; self.running.len()];
        let p = |i: usize| param_vars[i];
        let mut block = |g: &mut Graph<T>, x: Var, cb: &ConvBn| -> Result<Var, NetError> {
            let y = g.conv2d(x, p(cb.w), cb.stride)?;
            let r = &self.running[cb.bn];
            let (y, s) = g.batch_norm(y, p(cb.gamma), p(cb.beta), mode, Some((&r.mean, &r.var)))?;
            stats[cb.bn] = s;
            Ok(g.relu(y))
        };
        let head = |g: &mut Graph<T>, x: Var, hd: &Head| -> Result<Var, NetError> {
            let y = g.conv2d(x, p(hd.w), 1)?;
            Ok(g.add_bias(y, p(hd.b))?)
        };

        let mut x = g.constant(input.clone());
        let mut features = Vec::new();
        for (conv, refine) in &self.layout.encoder {
            x = block(&mut g, x, conv)?;
            if let Some(r) = refine {
                x = block(&mut g, x, r)?;
            }
            features.push(x);
        }
        let stages = self.config.stages();
        let mut depth = head(&mut g, x, &self.layout.heads[0])?;
        let mut raw = vec![depth];
        let mut prev = x;
        for (i, (up, conv)) in self.layout.decoder.iter().enumerate() {
            let k = stages - 1 - i;
            let u = g.conv_transpose2d(prev, p(*up))?;
            let u = block(&mut g, u, conv)?;
            let d_up = g.conv_transpose2d(depth, p(self.layout.up_depth[i]))?;
            let cat = g.concat(&[u, features[k - 1], d_up])?;
            depth = head(&mut g, cat, &self.layout.heads[i + 1])?;
            raw.push(depth);
            prev = cat;
        }
        let unit = T::from_f64_lossy(self.config.depth_unit);
        let outputs = raw.iter().rev().map(|&d| g.scale(d, unit)).collect();
        Ok(ForwardPass { graph: g, param_vars, outputs, stats, features })
    }

    /// Eval-mode prediction in meters, finest scale first.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
        let fp = self.forward(input, BnMode::Eval, false)?;
        Ok(fp.outputs.iter().map(|&v| fp.graph.value(v).clone()).collect())
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        for (r, s) in self.running.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            let unbias = T::from_f64_lossy(s.count as f64 / (s.count as f64 - 1.0));
            for c in 0..r.mean.len() {
                r.mean[c] = (T::one() - mom) * r.mean[c] + mom * s.mean[c];
                r.var[c] = (T::one() - mom) * r.var[c] + mom * s.var[c] * unbias;
            }
        }
    }
}

/// Stacks frame pairs into a `(N, 6, H, W)` tensor scaled to `[-1, 1]`.
pub fn stack_pairs<T: Real>(pairs: &[(&RgbGrid, &RgbGrid)]) -> Tensor<T> {
    let (w, h) = (pairs[0].0.width, pairs[0].0.height);
    let hw = w * h;
    let mut data = vec![T::zero(); pairs.len() * 6 * hw];
    let scale = 1.0 / 127.5;
    for (b, (fa, fb)) in pairs.iter().enumerate() {
        for (f, frame) in [fa, fb].iter().enumerate() {
            assert_eq!((frame.width, frame.height), (w, h), "frame sizes differ");
            for i in 0..hw {
                for ch in 0..3 {
                    let v = frame.data[3 * i + ch] as f64 * scale - 1.0;
                    data[((b * 6) + f * 3 + ch) * hw + i] = T::from_f64_lossy(v);
                }
            }
        }
    }
    Tensor { shape: vec![pairs.len(), 6, h, w], data }
}

/// Inputs and floored targets of a batch of samples.
pub fn batch_tensors<T: Real>(samples: &[Sample]) -> (Tensor<T>, Tensor<T>) {
    let pairs: Vec<(&RgbGrid, &RgbGrid)> = samples.iter().map(|s| (&s.frame_a, &s.frame_b)).collect();
    let input = stack_pairs(&pairs);
    let t = &samples[0].target;
    let mut target = Vec::with_capacity(samples.len() * t.data.len());
    for s in samples {
        target.extend(s.target.data.iter().map(|&z| T::from_f64_lossy(z.max(TARGET_FLOOR) as f64)));
    }
    (input, Tensor { shape: vec![samples.len(), 1, t.height, t.width], data: target })
}

/// Average-pools a `(N, 1, H, W)` target by `factor`.
pub fn pool_target<T: Real>(target: &Tensor<T>, factor: usize) -> Result<Tensor<T>, NetError> {
    let (n, _, h, w) = target.dims4("pool_target")?;
    let mut data = Vec::with_capacity(target.len() / (factor * factor));
    for b in 0..n {
        let d = crate::DepthMap::new(w, h, target.data[b * h * w..(b + 1) * h * w].iter().map(|v| v.to_f32().unwrap()).collect());
        data.extend(pool_depth(&d, factor)?.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor { shape: vec![n, 1, h / factor, w / factor], data })
}

/// Sum over scales of `W_s * mean |output_s - pool(target)|`.
pub fn multiscale_loss<T: Real>(g: &mut Graph<T>, outputs: &[Var], target: &Tensor<T>) -> Result<Var, NetError> {
    multiscale_loss_weighted(g, outputs, target, None)
}

/// As [`multiscale_loss`] with explicit per-scale weights instead of `W_s`.
pub fn multiscale_loss_weighted<T: Real>(
    g: &mut Graph<T>,
    outputs: &[Var],
    target: &Tensor<T>,
    weights: Option<&[f64]>,
) -> Result<Var, NetError> {
    let (_, _, _, tw) = target.dims4("multiscale_loss")?;
    let mut total: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let ow = g.value(o).shape[3];
        if ow == 0 || tw % ow != 0 {
            return Err(GradError::Shape { op: "multiscale_loss".into(), left: g.value(o).shape.clone(), right: target.shape.clone() }.into());
        }
        let pooled = if ow == tw { target.clone() } else { pool_target(target, tw / ow)? };
        let gamma = weights.map_or(ow as f64, |w| w[i]);
        let term = g.l1_loss(o, &pooled, T::from_f64_lossy(gamma))?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| NetError::Config("no outputs to score".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_shapes_at_32() {
        let net = DepthNet::<f32>::new(NetworkConfig::mini(), 0).unwrap();
        let input = Tensor::zeros(&[3, 6, 32, 32]);
        let fp = net.forward(&input, BnMode::Train, true).unwrap();
        let sizes: Vec<Vec<usize>> = fp.outputs.iter().map(|&o| fp.graph.value(o).shape.clone()).collect();
        assert_eq!(sizes, vec![vec![3, 1, 8, 8], vec![3, 1, 4, 4], vec![3, 1, 2, 2]]);
        assert_eq!(NetworkConfig::mini().output_sizes(32), vec![8, 4, 2]);
        assert!(net.forward(&Tensor::zeros(&[1, 6, 24, 24]), BnMode::Train, true).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 5, 32, 32]), BnMode::Train, true).is_err());
    }

    #[test]
    fn loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let o = g.param(Tensor::full(&[1, 1, 2, 2], 5.0));
        let target = Tensor::full(&[1, 1, 2, 2], 3.0);
        let l = multiscale_loss(&mut g, &[o], &target).unwrap();
        assert_eq!(g.value(l).data[0], 4.0);
        let exact = g.param(Tensor::full(&[1, 1, 2, 2], 3.0));
        let coarse = g.param(Tensor::full(&[1, 1, 1, 1], 3.0));
        let zero = multiscale_loss(&mut g, &[exact, coarse], &Tensor::full(&[1, 1, 4, 4], 3.0)).unwrap();
        assert_eq!(g.value(zero).data[0], 0.0);
        let big = Tensor::full(&[1, 1, 4, 4], 7.0);
        let a = multiscale_loss_weighted(&mut g, &[exact, coarse], &big, Some(&[2.0, 1.0])).unwrap();
        let b = multiscale_loss_weighted(&mut g, &[exact, coarse], &big, Some(&[4.0, 1.0])).unwrap();
        assert_eq!(g.value(b).data[0] - g.value(a).data[0], 2.0 * 4.0);
    }

    #[test]
    fn duplicated_pairs_give_identical_outputs() {
        let net = DepthNet::<f32>::new(NetworkConfig::mini(), 4).unwrap();
        let fa = RgbGrid::new(32, 32, (0..32 * 32 * 3).map(|i| (i * 37 % 256) as u8).collect());
        let fb = RgbGrid::new(32, 32, (0..32 * 32 * 3).map(|i| (i * 11 % 256) as u8).collect());
        let input = stack_pairs::<f32>(&[(&fa, &fb), (&fa, &fb), (&fb, &fa)]);
        let out = net.predict(&input).unwrap();
        for o in &out {
            assert!(o.is_finite());
            let n = o.len() / 3;
            assert_eq!(o.data[..n], o.data[n..2 * n]);
            assert_ne!(o.data[..n], o.data[2 * n..]);
        }
    }
}
