use std::path::Path;

use super::{DepthNet, NetError, NetworkConfig, RunningStats, TrainLog};
use crate::gradkit::{Archive, GradError, OptimizerConfig, OptimizerState, Tensor};

/// Trained network with everything needed to resume or reproduce it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: DepthNet<f32>,
    pub optimizer: OptimizerConfig,
    pub state: OptimizerState<f32>,
    pub log: TrainLog,
}

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor { shape: vec![v.len()], data: v.to_vec() }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NetError> {
    let meta = serde_json::json!({
        "kind": "depthnet",
        "config": ckpt.net.config,
        "optimizer": ckpt.optimizer,
        "step": ckpt.state.step,
        "log": ckpt.log,
    });
    let mut a = Archive::new(meta);
    for (name, p) in ckpt.net.names.iter().zip(&ckpt.net.params) {
        a.push(name.clone(), p);
    }
    for (i, r) in ckpt.net.running.iter().enumerate() {
        a.push(format!("running.{i}.mean"), &vec_tensor(&r.mean));
        a.push(format!("running.{i}.var"), &vec_tensor(&r.var));
    }
    for (i, name) in ckpt.net.names.iter().enumerate() {
        a.push(format!("adam.m.{name}"), &vec_tensor(&ckpt.state.m[i]));
        a.push(format!("adam.v.{name}"), &vec_tensor(&ckpt.state.v[i]));
    }
    Ok(a.save(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let a = Archive::load(path)?;
    let bad = |what: String| NetError::Grad(GradError::Checkpoint(what));
    if a.meta.get("kind").and_then(|k| k.as_str()) != Some("depthnet") {
        return Err(bad("not a depth network checkpoint".into()));
    }
    let field = |key: &str| a.meta.get(key).cloned().ok_or_else(|| bad(format!("missing `{key}`")));
    let config: NetworkConfig = serde_json::from_value(field("config")?).map_err(|e| bad(format!("config: {e}")))?;
    let optimizer: OptimizerConfig =
        serde_json::from_value(field("optimizer")?).map_err(|e| bad(format!("optimizer: {e}")))?;
    let step = field("step")?.as_u64().ok_or_else(|| bad("step".into()))?;
    let log: TrainLog = serde_json::from_value(field("log")?).map_err(|e| bad(format!("log: {e}")))?;

    let mut net = DepthNet::<f32>::new(config, 0)?;
    for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
        let t = a.require(name)?;
        if t.shape != p.shape {
            return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", t.shape, p.shape)));
        }
        *p = t.clone();
    }
    for (i, r) in net.running.iter_mut().enumerate() {
        let mean = a.require(&format!("running.{i}.mean"))?.data.clone();
        let var = a.require(&format!("running.{i}.var"))?.data.clone();
        if mean.len() != r.mean.len() || var.len() != r.var.len() {
            return Err(bad(format!("running stats {i} have the wrong length")));
        }
        *r = RunningStats { mean, var };
    }
    let mut state = OptimizerState::new(&net.params);
    state.step = step;
    for (i, name) in net.names.iter().enumerate() {
        state.m[i] = a.require(&format!("adam.m.{name}"))?.data.clone();
        state.v[i] = a.require(&format!("adam.v.{name}"))?.data.clone();
    }
    Ok(Checkpoint { net, optimizer, state, log })
}
