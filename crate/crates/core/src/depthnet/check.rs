use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{multiscale_loss, DepthNet, NetError, NetworkConfig};
use crate::gradkit::{relative_error, BnMode, FdReport, Tensor};

/// Finite-difference comparison of the training loss gradient of a 64-bit
/// network, sampled over its parameters.
#[derive(Debug, Clone)]
pub struct NetworkGradReport {
    pub worst: FdReport,
    pub worst_parameter: String,
    pub coordinates: usize,
}

/// Checks `coords_per_tensor` random coordinates of every parameter tensor
/// of a randomly initialized network on a random batch.
pub fn network_gradient_check(
    config: NetworkConfig,
    size: usize,
    batch: usize,
    coords_per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<NetworkGradReport, NetError> {
    let mut net = DepthNet::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let input = Tensor {
        shape: vec![batch, 6, size, size],
        data: (0..batch * 6 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let target = Tensor {
        shape: vec![batch, 1, size, size],
        data: (0..batch * size * size).map(|_| rng.random_range(1.0..100.0)).collect(),
    };
    let loss_of = |net: &DepthNet<f64>| -> Result<f64, NetError> {
        let mut fp = net.forward(&input, BnMode::Train, false)?;
        let loss = multiscale_loss(&mut fp.graph, &fp.outputs, &target)?;
        Ok(fp.graph.value(loss).data[0])
    };

    let mut fp = net.forward(&input, BnMode::Train, true)?;
    let loss = multiscale_loss(&mut fp.graph, &fp.outputs, &target)?;
    let mut grads = fp.graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        fp.param_vars.iter().map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; fp.graph.value(v).len()])).collect();

    let mut worst = FdReport { max_rel_error: 0.0, worst: 0, analytic: 0.0, numeric: 0.0 };
    let mut worst_parameter = String::new();
    let mut coordinates = 0;
    for t in 0..net.params.len() {
        let n = net.params[t].len();
        for i in sample(&mut rng, n, coords_per_tensor.min(n)) {
            let x = net.params[t].data[i];
            net.params[t].data[i] = x + eps;
            let fp_plus = loss_of(&net)?;
            net.params[t].data[i] = x - eps;
            let fp_minus = loss_of(&net)?;
            net.params[t].data[i] = x;
            let numeric = (fp_plus - fp_minus) / (2.0 * eps);
            let e = relative_error(analytic[t][i], numeric);
            coordinates += 1;
            if e > worst.max_rel_error || worst_parameter.is_empty() {
                worst = FdReport { max_rel_error: e, worst: i, analytic: analytic[t][i], numeric };
                worst_parameter = net.names[t].clone();
            }
        }
    }
    Ok(NetworkGradReport { worst, worst_parameter, coordinates })
}
