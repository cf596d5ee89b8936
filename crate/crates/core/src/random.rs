//! Seeded random instances for randomized cross-checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::{solve_newton, Equilibrium, SingleInverterParams};
use crate::grid::{GridNetwork, Line};
use crate::model::InverterParams;

/// A small lossless network together with one of its equilibria.
#[derive(Debug, Clone)]
pub struct Instance {
    pub net: GridNetwork,
    pub params: InverterParams,
    pub eq: Equilibrium,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Random connected network with `2..=max_nodes` nodes: a random spanning
/// tree plus extra lines with probability 0.3.
pub fn random_network(rng: &mut ChaCha8Rng, max_nodes: usize) -> GridNetwork {
    let n = rng.random_range(2..=max_nodes.max(2));
    let mut lines = Vec::new();
    for j in 1..n {
        let parent = rng.random_range(0..j);
        lines.push(Line {
            from: parent,
            to: j,
            b: rng.random_range(0.5..3.0),
            g: 0.0,
        });
    }
    for j in 0..n {
        for l in j + 1..n {
            if !lines.iter().any(|ln| (ln.from, ln.to) == (j, l)) && rng.random_bool(0.3) {
                lines.push(Line {
                    from: j,
                    to: l,
                    b: rng.random_range(0.5..3.0),
                    g: 0.0,
                });
            }
        }
    }
    GridNetwork::build(n, &lines, &[], true).expect("generated network is valid")
}

/// Random droop parameters for `n` nodes. Reactive gains are log-uniform
/// over two decades so both stable and unstable operating points occur.
pub fn random_params(rng: &mut ChaCha8Rng, n: usize) -> InverterParams {
    let mut pd: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
    let mean = pd.iter().sum::<f64>() / n as f64;
    pd.iter_mut().for_each(|p| *p -= mean);
    InverterParams {
        tau: (0..n).map(|_| rng.random_range(0.05..0.5)).collect(),
        kappa: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        chi: (0..n).map(|_| log_uniform(rng, 0.01, 1.5)).collect(),
        pd,
        qd: (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
        ed: (0..n).map(|_| rng.random_range(0.95..1.05)).collect(),
        omega_d: 0.0,
    }
}

/// Draws instances until one has an equilibrium; half of them are anchored
/// at a slack node.
pub fn random_instance(rng: &mut ChaCha8Rng, max_nodes: usize) -> Instance {
    loop {
        let net = random_network(rng, max_nodes);
        let params = random_params(rng, net.len());
        let slack = rng.random_bool(0.5).then_some(0);
        if let Ok(eq) = solve_newton(&net, &params, slack, None) {
            return Instance { net, params, eq };
        }
    }
}

/// `count` instances from a fixed seed.
pub fn instances(seed: u64, count: usize, max_nodes: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_instance(&mut rng, max_nodes)).collect()
}

/// Random single-inverter parameters spanning feasible and infeasible
/// operating regions.
pub fn random_single_inverter(rng: &mut ChaCha8Rng) -> SingleInverterParams {
    SingleInverterParams {
        tau: rng.random_range(0.05..0.5),
        kappa: rng.random_range(0.5..2.0),
        chi: log_uniform(rng, 0.02, 1.0),
        pd: rng.random_range(-2.0..2.0),
        qd: rng.random_range(-0.5..0.5),
        ed: rng.random_range(0.9..1.1),
        omega_d: 0.0,
        b: rng.random_range(0.5..3.0),
        e_hat: rng.random_range(0.9..1.1),
    }
}
