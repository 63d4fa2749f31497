use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_tensors, multiscale_loss, pool_target, DepthNet, NetError, NetworkConfig};
use crate::dataset::{make_sample, Sample, SampleStream, SceneRecord, ShiftSpec, MAX_TARGET_DEPTH};
use crate::gradkit::{optimizer_step, BnMode, OptimizerConfig, OptimizerState};
use crate::inference::{compute_metrics, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Pairs drawn from every training scene per epoch.
    pub samples_per_scene: usize,
    pub optimizer: OptimizerConfig,
    /// Learning rate reached at the last epoch, as a fraction of the initial
    /// one. The decay is linear over the second half of training.
    pub final_lr_fraction: f64,
    pub shifts: ShiftSpec,
    pub geometric_augmentation: bool,
    /// Fixed pairs per scene used for the logged metrics.
    pub eval_pairs_per_scene: usize,
    /// Training scenes scored each epoch (all when `None`).
    pub train_eval_scenes: Option<usize>,
    /// Seed of the evaluation pairs, kept apart from `seed` so runs with
    /// different training seeds are scored on the same pairs.
    pub eval_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            seed: 0,
            batch_size: 8,
            samples_per_scene: 8,
            optimizer: OptimizerConfig::default(),
            final_lr_fraction: 0.1,
            shifts: ShiftSpec::training_default(),
            geometric_augmentation: true,
            eval_pairs_per_scene: 4,
            train_eval_scenes: Some(60),
            eval_seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer.lr();
        let half = self.epochs / 2;
        if epoch < half || self.epochs < 2 {
            return base;
        }
        let span = (self.epochs - 1 - half).max(1) as f64;
        let frac = (epoch - half) as f64 / span;
        base * (1.0 - frac * (1.0 - self.final_lr_fraction))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean multi-scale training objective over the epoch's steps.
    pub train_loss: f64,
    pub train_l1: f64,
    pub test_l1: f64,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub resolution: usize,
    pub initial_test: Option<Metrics>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stages: Vec<StageLog>,
}

impl TrainLog {
    pub fn last_epoch(&self) -> Option<&EpochLog> {
        self.stages.last().and_then(|s| s.epochs.last())
    }

    /// `epoch,train_L1,test_L1,train_RMSE,test_RMSE`, epochs numbered across stages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_L1,test_L1,train_RMSE,test_RMSE\n");
        for (i, e) in self.stages.iter().flat_map(|s| &s.epochs).enumerate() {
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", i + 1, e.train_l1, e.test_l1, e.train_rmse, e.test_rmse));
        }
        out
    }
}

/// Fixed evaluation pairs `(scene, t, shift)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub pairs: Vec<(usize, usize, i32)>,
}

impl EvalPlan {
    pub fn new(records: &[SceneRecord], pairs_per_scene: usize, spec: &ShiftSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E7A1);
        let mut pairs = Vec::new();
        for (i, r) in records.iter().enumerate() {
            for _ in 0..pairs_per_scene {
                let (t, s) = spec.draw_pair(r.len(), &mut rng);
                pairs.push((i, t, s));
            }
        }
        Self { pairs }
    }

    pub fn samples<'a>(&'a self, records: &'a [SceneRecord]) -> impl Iterator<Item = Sample> + 'a {
        self.pairs.iter().map(|&(i, t, s)| make_sample(&records[i], t, s).expect("planned pair is valid"))
    }
}

/// Finest-scale targets of a plan as one flat vector.
fn plan_targets(records: &[SceneRecord], plan: &EvalPlan, out_width: usize) -> Result<Vec<f64>, NetError> {
    let mut all = Vec::new();
    for s in plan.samples(records) {
        let (_, t) = batch_tensors::<f64>(std::slice::from_ref(&s));
        let pooled = pool_target(&t, t.shape[3] / out_width)?;
        all.extend(pooled.data);
    }
    Ok(all)
}

/// Eval-mode metrics at the finest scale, predictions clamped to `[0, 100]`.
pub fn evaluate(net: &DepthNet<f32>, records: &[SceneRecord], plan: &EvalPlan) -> Result<Metrics, NetError> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let samples: Vec<Sample> = plan.samples(records).collect();
    for chunk in samples.chunks(16) {
        let (input, target) = batch_tensors::<f32>(chunk);
        let out = net.predict(&input)?;
        let finest = &out[0];
        let pooled = pool_target(&target, target.shape[3] / finest.shape[3])?;
        preds.extend(finest.data.iter().map(|&v| (v as f64).clamp(0.0, MAX_TARGET_DEPTH as f64)));
        targets.extend(pooled.data.iter().map(|&v| v as f64));
    }
    Ok(compute_metrics(&preds, &targets)?)
}

/// Best constant prediction (the median target) and its metrics.
pub fn constant_oracle(records: &[SceneRecord], plan: &EvalPlan, out_width: usize) -> Result<(f64, Metrics), NetError> {
    let targets = plan_targets(records, plan, out_width)?;
    let mut sorted = targets.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Err(NetError::Config("empty evaluation plan".into()));
    }
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let preds = vec![median; n];
    Ok((median, compute_metrics(&preds, &targets)?))
}

fn check_disjoint(train: &[SceneRecord], test: &[SceneRecord]) -> Result<(), NetError> {
    for t in test {
        if train.iter().any(|r| r.id == t.id && r.metadata.seed == t.metadata.seed) {
            return Err(NetError::Config(format!("scene {} is in both splits", t.id)));
        }
    }
    Ok(())
}

fn check_records(net: &DepthNet<f32>, records: &[SceneRecord]) -> Result<usize, NetError> {
    let first = records.first().ok_or_else(|| NetError::Config("no training scenes".into()))?;
    let res = first.resolution();
    for r in records {
        if r.resolution() != res {
            return Err(NetError::Config(format!("mixed resolutions {} and {}", res, r.resolution())));
        }
    }
    net.config.check_input(res, res)?;
    Ok(res)
}

/// Trains one stage in place and returns its log.
fn run_stage(
    net: &mut DepthNet<f32>,
    state: &mut OptimizerState<f32>,
    step: &mut usize,
    train_set: &[SceneRecord],
    test_set: &[SceneRecord],
    opts: &TrainOptions,
) -> Result<StageLog, NetError> {
    check_disjoint(train_set, test_set)?;
    let res = check_records(net, train_set)?;
    opts.shifts.validate(train_set[0].len())?;
    let test_plan = EvalPlan::new(test_set, opts.eval_pairs_per_scene, &opts.shifts, opts.eval_seed);
    let train_subset = &train_set[..opts.train_eval_scenes.unwrap_or(train_set.len()).min(train_set.len())];
    let train_plan = EvalPlan::new(train_subset, opts.eval_pairs_per_scene, &opts.shifts, opts.eval_seed.wrapping_add(1));
    let mut log = StageLog { resolution: res, initial_test: None, epochs: vec![] };
    if !test_set.is_empty() {
        log.initial_test = Some(evaluate(net, test_set, &test_plan)?);
    }
    for epoch in 0..opts.epochs {
        let lr = opts.lr_at(epoch);
        let config = opts.optimizer.with_lr(lr);
        let epoch_seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let mut stream = SampleStream::new(train_set, opts.shifts.clone(), epoch_seed, opts.geometric_augmentation);
        let mut order: Vec<usize> = (0..train_set.len()).flat_map(|i| std::iter::repeat_n(i, opts.samples_per_scene)).collect();
        order.shuffle(stream.rng());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let samples: Vec<Sample> = chunk.iter().map(|&i| stream.sample_from(i)).collect();
            let (input, target) = batch_tensors::<f32>(&samples);
            let mut fp = net.forward(&input, BnMode::Train, true)?;
            let loss = multiscale_loss(&mut fp.graph, &fp.outputs, &target)?;
            let value = fp.graph.value(loss).data[0] as f64;
            *step += 1;
            if !value.is_finite() {
                return Err(NetError::Divergence { step: *step, loss: value });
            }
            let mut grads = fp.graph.backward(loss)?;
            let flat: Vec<Option<Vec<f32>>> = fp.param_vars.iter().map(|&v| grads.take(v)).collect();
            if flat.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(NetError::Divergence { step: *step, loss: value });
            }
            optimizer_step(&mut net.params, &flat, &config, state)?;
            net.update_running_stats(&fp.stats);
            loss_sum += value;
            batches += 1;
        }
        let train_m = evaluate(net, train_subset, &train_plan)?;
        let test_m = if test_set.is_empty() { Metrics::default() } else { evaluate(net, test_set, &test_plan)? };
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.max(1) as f64,
            train_l1: train_m.l1,
            test_l1: test_m.l1,
            train_rmse: train_m.rmse,
            test_rmse: test_m.rmse,
            lr,
        });
    }
    Ok(log)
}

/// Trains `net` from its current parameters.
pub fn train(
    net: DepthNet<f32>,
    train_set: &[SceneRecord],
    test_set: &[SceneRecord],
    opts: &TrainOptions,
) -> Result<super::Checkpoint, NetError> {
    let mut net = net;
    let mut state = OptimizerState::new(&net.params);
    let mut step = 0;
    let stage = run_stage(&mut net, &mut state, &mut step, train_set, test_set, opts)?;
    Ok(super::Checkpoint { net, optimizer: opts.optimizer, state, log: TrainLog { stages: vec![stage] } })
}

/// Trains successive stages at increasing resolutions, each starting from
/// the previous stage's weights. `stages[i]` is `(train, test)` at
/// `schedule[i]` pixels and `epochs[i]` is that stage's epoch count.
pub fn finetune_curriculum(
    config: NetworkConfig,
    schedule: &[usize],
    epochs: &[usize],
    stages: &[(&[SceneRecord], &[SceneRecord])],
    opts: &TrainOptions,
) -> Result<super::Checkpoint, NetError> {
    if schedule.is_empty() || schedule.len() != stages.len() || schedule.len() != epochs.len() {
        return Err(NetError::Config("schedule, epochs and datasets must have the same non-zero length".into()));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NetError::Config(format!("schedule {schedule:?} is not strictly increasing")));
    }
    for (&res, (train_set, _)) in schedule.iter().zip(stages) {
        config.check_input(res, res)?;
        let found = train_set.first().map(SceneRecord::resolution);
        if found != Some(res) {
            return Err(NetError::Config(format!("stage at {res} px has data at {found:?} px")));
        }
    }
    let mut net = DepthNet::<f32>::new(config, opts.seed)?;
    let mut log = TrainLog::default();
    let mut state = OptimizerState::new(&net.params);
    let mut step = 0;
    for (i, (train_set, test_set)) in stages.iter().enumerate() {
        state = OptimizerState::new(&net.params);
        let stage_opts = TrainOptions { epochs: epochs[i], seed: opts.seed.wrapping_add(i as u64), ..opts.clone() };
        log.stages.push(run_stage(&mut net, &mut state, &mut step, train_set, test_set, &stage_opts)?);
    }
    Ok(super::Checkpoint { net, optimizer: opts.optimizer, state, log })
}
