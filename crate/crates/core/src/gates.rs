//! Stochastic channel gates: hard-concrete (L0) and Gaussian (VIB), with
//! their penalties, reparameterized gradients, gate-based output-channel
//! pruning and a small gated-regression trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cost::{mac_cost, LayerCost, LayerShape, Method};
use crate::error::{Error, Result};
use crate::tensor::Kernel4D;

pub const HC_BETA: f64 = 2.0 / 3.0;
pub const HC_ZETA: f64 = 1.1;
pub const HC_GAMMA: f64 = -0.1;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardConcreteGate {
    pub log_alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub gamma: f64,
}

impl HardConcreteGate {
    pub fn new(log_alpha: f64) -> Self {
        Self {
            log_alpha,
            beta: HC_BETA,
            zeta: HC_ZETA,
            gamma: HC_GAMMA,
        }
    }

    pub fn with_params(log_alpha: f64, beta: f64, zeta: f64, gamma: f64) -> Result<Self> {
        if !(beta > 0.0) || !(gamma < 0.0) || !(zeta > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "hard-concrete needs beta > 0 and gamma < 0 < 1 < zeta, got beta={beta}, gamma={gamma}, zeta={zeta}"
            )));
        }
        Ok(Self {
            log_alpha,
            beta,
            zeta,
            gamma,
        })
    }

    /// Penalty term of this gate: the probability that a sample is nonzero.
    pub fn p_nonzero(&self) -> f64 {
        sigmoid(self.log_alpha - self.beta * (-self.gamma / self.zeta).ln())
    }

    fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta - self.gamma) + self.gamma
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VibGate {
    pub mu: f64,
    pub sigma: f64,
}

impl VibGate {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("VIB sigma must be > 0, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    /// Pruning criterion `μ² / σ²`.
    pub fn ratio(&self) -> f64 {
        self.mu * self.mu / (self.sigma * self.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    HardConcrete(HardConcreteGate),
    Vib(VibGate),
}

impl Gate {
    /// Pruning criterion: `P(z ≠ 0)` for hard-concrete, `μ²/σ²` for VIB.
    pub fn criterion(&self) -> f64 {
        match self {
            Gate::HardConcrete(g) => g.p_nonzero(),
            Gate::Vib(g) => g.ratio(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    L0,
    Vib,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::L0 => "l0",
            GateKind::Vib => "vib",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l0" => Ok(GateKind::L0),
            "vib" => Ok(GateKind::Vib),
            _ => Err(Error::InvalidArgument(format!("unknown gate kind '{s}'"))),
        }
    }
}

/// One gate per output channel of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub gates: Vec<Gate>,
    pub lambda_reg: f64,
}

impl GateVector {
    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn criteria(&self) -> Vec<f64> {
        self.gates.iter().map(Gate::criterion).collect()
    }
}

/// One hard-concrete draw for uniform noise `u ∈ (0, 1)`.
pub fn hc_sample(g: &HardConcreteGate, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!("u must lie in (0, 1), got {u}")));
    }
    let s = sigmoid(((u.ln() - (1.0 - u).ln()) + g.log_alpha) / g.beta);
    Ok(g.stretch(s).clamp(0.0, 1.0))
}

/// `Σ_j P(z_j ≠ 0)` over hard-concrete gates.
pub fn hc_penalty(gates: &GateVector) -> Result<f64> {
    gates.gates.iter().try_fold(0.0, |acc, g| match g {
        Gate::HardConcrete(h) => Ok(acc + h.p_nonzero()),
        Gate::Vib(_) => Err(Error::InvalidArgument("hard-concrete penalty over a VIB gate".into())),
    })
}

/// `(∂z/∂log α, ∂F_j/∂log α)` at noise `u`; the first is zero where the
/// sample is clipped.
pub fn hc_grads(g: &HardConcreteGate, u: f64) -> Result<(f64, f64)> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!("u must lie in (0, 1), got {u}")));
    }
    let s = sigmoid(((u.ln() - (1.0 - u).ln()) + g.log_alpha) / g.beta);
    let sbar = g.stretch(s);
    let dz = if sbar > 0.0 && sbar < 1.0 {
        (g.zeta - g.gamma) * s * (1.0 - s) / g.beta
    } else {
        0.0
    };
    let p = g.p_nonzero();
    Ok((dz, p * (1.0 - p)))
}

/// Deterministic test-time value of a hard-concrete gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HcTestValue {
    /// `clip(σ(log α)(ζ − γ) + γ, 0, 1)`: the sample with the noise at its median.
    ClippedMean,
    /// `E[z]` over the noise, by midpoint quadrature.
    Expected,
}

pub fn hc_test_value(g: &HardConcreteGate, mode: HcTestValue) -> f64 {
    match mode {
        HcTestValue::ClippedMean => g.stretch(sigmoid(g.log_alpha)).clamp(0.0, 1.0),
        HcTestValue::Expected => {
            const N: usize = 20_000;
            (0..N)
                .map(|i| hc_sample(g, (i as f64 + 0.5) / N as f64).expect("interior u"))
                .sum::<f64>()
                / N as f64
        }
    }
}

pub fn vib_sample(g: &VibGate, eps: f64) -> f64 {
    g.mu + eps * g.sigma
}

/// `Σ_j log(1 + μ_j² / σ_j²)` over VIB gates.
pub fn vib_penalty(gates: &GateVector) -> Result<f64> {
    gates.gates.iter().try_fold(0.0, |acc, g| match g {
        Gate::Vib(v) => {
            if !(v.sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("VIB sigma must be > 0, got {}", v.sigma)));
            }
            Ok(acc + v.ratio().ln_1p())
        }
        Gate::HardConcrete(_) => Err(Error::InvalidArgument("VIB penalty over a hard-concrete gate".into())),
    })
}

/// `(∂F_j/∂μ, ∂F_j/∂σ)` of one VIB penalty term.
pub fn vib_grads(g: &VibGate) -> Result<(f64, f64)> {
    if !(g.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("VIB sigma must be > 0, got {}", g.sigma)));
    }
    let (m, s) = (g.mu, g.sigma);
    let d = s * s + m * m;
    Ok((2.0 * m / d, -2.0 * m * m / (s * d)))
}

/// A layer with gated-off output channels removed.
#[derive(Clone, Debug, PartialEq)]
pub struct GatePruned {
    pub kernel: Kernel4D,
    pub kept: Vec<usize>,
    pub cost: LayerCost,
    /// `1 − kept MACs / original MACs`.
    pub ratio: f64,
}

/// Drops every output channel whose gate criterion is below `threshold`.
pub fn prune_by_gates(gates: &GateVector, kernel: &Kernel4D, threshold: f64, h: usize, w: usize) -> Result<GatePruned> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be > 0, got {threshold}")));
    }
    let (t, s, k) = kernel.dims();
    if gates.len() != t {
        return Err(Error::Shape(format!("{} gates for {t} output channels", gates.len())));
    }
    let kept: Vec<usize> = gates
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| g.criterion() >= threshold)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::Infeasible(format!("threshold {threshold} prunes every channel")));
    }
    let pruned = kernel.select_outputs(&kept)?;
    let mut cost = mac_cost(LayerShape::new(s, kept.len(), k, h, w), Method::Original, &[])?;
    cost.macs_original = LayerShape::new(s, t, k, h, w).original_macs();
    cost.params_original = (k * k * s * t) as u64;
    cost.ratio = 1.0 - cost.macs_compressed as f64 / cost.macs_original as f64;
    Ok(GatePruned {
        kernel: pruned,
        kept,
        ratio: cost.ratio,
        cost,
    })
}

/// Synthetic regression `y = Σ_{j<informative} a_j x_j + noise` with
/// standard-normal features.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub samples: usize,
    pub features: usize,
    pub informative: usize,
    pub noise_std: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            samples: 256,
            features: 8,
            informative: 4,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainResult {
    pub gates: GateVector,
    pub weights: Vec<f64>,
    /// True coefficients of the generated task.
    pub coefficients: Vec<f64>,
    /// Data loss plus weighted penalty at every step.
    pub loss_trace: Vec<f64>,
    /// Every `u` (L0) or `ε` (VIB) drawn, step-major, for replay.
    pub draws: Vec<f64>,
}

/// Full-batch gradient descent on `mean (y − Σ_j w_j z_j x_j)² + λ F` with
/// one fresh gate sample per feature per step.
pub fn train_toy_gated(
    task: &ToyTask,
    kind: GateKind,
    lambda_reg: f64,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyTrainResult> {
    if task.informative > task.features || task.samples == 0 || task.features == 0 {
        return Err(Error::InvalidArgument("toy task needs samples and informative <= features".into()));
    }
    if !(lr > 0.0) || !(lambda_reg >= 0.0) {
        return Err(Error::InvalidArgument("lr must be > 0 and lambda >= 0".into()));
    }
    let (n, p) = (task.samples, task.features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefficients: Vec<f64> = (0..p)
        .map(|j| {
            if j < task.informative {
                let mag: f64 = rng.random_range(1.0..2.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            } else {
                0.0
            }
        })
        .collect();
    let x: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let clean: f64 = (0..p).map(|j| coefficients[j] * x[i * p + j]).sum();
            clean + task.noise_std * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();

    let mut w = vec![0.0; p];
    // L0: log α per gate; VIB: μ and log σ per gate.
    let mut a = vec![match kind {
        GateKind::L0 => 0.0,
        GateKind::Vib => 1.0,
    }; p];
    let mut log_sigma = vec![(0.5f64).ln(); p];
    let mut loss_trace = Vec::with_capacity(steps);
    let mut draws = Vec::with_capacity(steps * p);
    let mut z = vec![0.0; p];
    let mut dz_da = vec![0.0; p];
    let mut dz_dls = vec![0.0; p];

    for _ in 0..steps {
        let mut penalty = 0.0;
        let mut dpen_a = vec![0.0; p];
        let mut dpen_ls = vec![0.0; p];
        for j in 0..p {
            match kind {
                GateKind::L0 => {
                    // Keep u strictly inside (0, 1).
                    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
                    draws.push(u);
                    let g = HardConcreteGate::new(a[j]);
                    z[j] = hc_sample(&g, u)?;
                    let (dz, dp) = hc_grads(&g, u)?;
                    dz_da[j] = dz;
                    penalty += g.p_nonzero();
                    dpen_a[j] = dp;
                }
                GateKind::Vib => {
                    let eps: f64 = rng.sample(StandardNormal);
                    draws.push(eps);
                    let g = VibGate::new(a[j], log_sigma[j].exp())?;
                    z[j] = vib_sample(&g, eps);
                    dz_da[j] = 1.0;
                    dz_dls[j] = eps * g.sigma;
                    penalty += g.ratio().ln_1p();
                    let (dm, ds) = vib_grads(&g)?;
                    dpen_a[j] = dm;
                    dpen_ls[j] = ds * g.sigma;
                }
            }
        }
        let mut grad_w = vec![0.0; p];
        let mut grad_z = vec![0.0; p];
        let mut data_loss = 0.0;
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            let pred: f64 = (0..p).map(|j| w[j] * z[j] * row[j]).sum();
            let r = y[i] - pred;
            data_loss += r * r;
            for j in 0..p {
                grad_w[j] -= 2.0 * r * z[j] * row[j];
                grad_z[j] -= 2.0 * r * w[j] * row[j];
            }
        }
        let scale = 1.0 / n as f64;
        let total = data_loss * scale + lambda_reg * penalty;
        if !total.is_finite() {
            return Err(Error::Divergence(format!("loss became {total} with lr = {lr}")));
        }
        loss_trace.push(total);
        for j in 0..p {
            w[j] -= lr * grad_w[j] * scale;
            a[j] -= lr * (grad_z[j] * scale * dz_da[j] + lambda_reg * dpen_a[j]);
            if kind == GateKind::Vib {
                log_sigma[j] -= lr * (grad_z[j] * scale * dz_dls[j] + lambda_reg * dpen_ls[j]);
            }
        }
        if w.iter().chain(&a).chain(&log_sigma).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("parameters became non-finite with lr = {lr}")));
        }
    }

    let gates = (0..p)
        .map(|j| match kind {
            GateKind::L0 => Ok(Gate::HardConcrete(HardConcreteGate::new(a[j]))),
            GateKind::Vib => VibGate::new(a[j], log_sigma[j].exp()).map(Gate::Vib),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyTrainResult {
        gates: GateVector { gates, lambda_reg },
        weights: w,
        coefficients,
        loss_trace,
        draws,
    })
}
