//! Learning-rate annealing strategies.
//!
//! Each scheme is a pure map from (epoch, total epochs) to a positive rate,
//! registered by name and built from [`ScheduleParams`].

use crate::error::StrategyError;

/// A pure learning-rate schedule. `epoch` counts from 0; callers guarantee
/// `0 <= epoch <= total_epochs` and `total_epochs >= 1`.
pub trait LrSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64;
}

/// Parameters shared by the schedule constructors. Each scheme reads the
/// fields it needs and ignores the rest.
#[derive(Debug, Clone)]
pub struct ScheduleParams {
    pub eta_init: f64,
    pub eta_final: f64,
    pub steepness: f64,
    pub decay_power: f64,
    pub milestones: Vec<f64>,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            eta_init: 0.1,
            eta_final: 0.001,
            // The logistic tails must come within 1e-3 of the endpoints,
            // which needs steepness >= 2 ln(999) ~= 13.8.
            steepness: 14.0,
            decay_power: 0.05,
            milestones: vec![0.5, 0.75],
        }
    }
}

struct Constant {
    eta: f64,
}

impl LrSchedule for Constant {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn lr_at(&self, _epoch: usize, _total: usize) -> f64 {
        self.eta
    }
}

struct Exponential {
    eta_init: f64,
    power: f64,
}

impl LrSchedule for Exponential {
    fn name(&self) -> &'static str {
        "exponential"
    }
    fn lr_at(&self, epoch: usize, _total: usize) -> f64 {
        self.eta_init * (-self.power * epoch as f64).exp()
    }
}

struct Staircase {
    eta_init: f64,
    milestones: Vec<f64>,
}

impl LrSchedule for Staircase {
    fn name(&self) -> &'static str {
        "staircase"
    }
    fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * total as f64)
            .count();
        self.eta_init * 10f64.powi(-(passed as i32))
    }
}

struct SigmoidAnneal {
    eta_init: f64,
    eta_final: f64,
    steepness: f64,
}

impl LrSchedule for SigmoidAnneal {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let z = self.steepness * (epoch as f64 / total as f64 - 0.5);
        self.eta_final + (self.eta_init - self.eta_final) * (1.0 - logistic(z))
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn invalid(param: &'static str, msg: String) -> StrategyError {
    StrategyError::InvalidParam {
        family: "schedule",
        param,
        msg,
    }
}

type Ctor = fn(&ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError>;

fn build_constant(p: &ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError> {
    if p.eta_init <= 0.0 {
        return Err(invalid("eta_init", format!("must be positive, got {}", p.eta_init)));
    }
    Ok(Box::new(Constant { eta: p.eta_init }))
}

fn build_exponential(p: &ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError> {
    if p.eta_init <= 0.0 {
        return Err(invalid("eta_init", format!("must be positive, got {}", p.eta_init)));
    }
    if p.decay_power < 0.0 {
        return Err(invalid("decay_power", format!("must be non-negative, got {}", p.decay_power)));
    }
    Ok(Box::new(Exponential {
        eta_init: p.eta_init,
        power: p.decay_power,
    }))
}

fn build_staircase(p: &ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError> {
    if p.eta_init <= 0.0 {
        return Err(invalid("eta_init", format!("must be positive, got {}", p.eta_init)));
    }
    if p.milestones.iter().any(|&m| !(0.0..1.0).contains(&m) || m == 0.0) {
        return Err(invalid("milestones", format!("fractions must lie in (0, 1), got {:?}", p.milestones)));
    }
    let mut milestones = p.milestones.clone();
    milestones.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Box::new(Staircase {
        eta_init: p.eta_init,
        milestones,
    }))
}

fn build_sigmoid(p: &ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError> {
    if p.eta_init <= 0.0 {
        return Err(invalid("eta_init", format!("must be positive, got {}", p.eta_init)));
    }
    if p.eta_final < 0.0 || p.eta_final >= p.eta_init {
        return Err(invalid(
            "eta_final",
            format!("must satisfy 0 <= eta_final < eta_init, got {}", p.eta_final),
        ));
    }
    if p.steepness <= 0.0 {
        return Err(invalid("steepness", format!("must be positive, got {}", p.steepness)));
    }
    Ok(Box::new(SigmoidAnneal {
        eta_init: p.eta_init,
        eta_final: p.eta_final,
        steepness: p.steepness,
    }))
}

const REGISTRY: &[(&str, Ctor)] = &[
    ("constant", build_constant),
    ("exponential", build_exponential),
    ("staircase", build_staircase),
    ("sigmoid", build_sigmoid),
];

/// Registered schedule names.
pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Builds a schedule by registered name.
pub fn build(name: &str, params: &ScheduleParams) -> Result<Box<dyn LrSchedule>, StrategyError> {
    for (n, ctor) in REGISTRY {
        if *n == name {
            return ctor(params);
        }
    }
    Err(StrategyError::Unknown {
        family: "schedule",
        name: name.to_string(),
        known: names().join(", "),
    })
}
