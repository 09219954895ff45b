//! Scenario files (TOML) and their translation into a problem instance.
//!
//! Agent indices, bus numbers and preferred slots are 1-based in scenario
//! and data files, matching how fleets and feeders are usually numbered.

use std::fs;
use std::path::{Path, PathBuf};

use dmao_core::{
    build_injection_model, Attack, Config, EqualityCoupling, FeasibleSet, GoalSpec, InequalityCoupling, InjectionMode,
    Injection, LogLevel, Matrix, Problem, ProblemParts, StepSchedule,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{self, FleetGen, FleetRow, NetworkFile};

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: HorizonSection,
    pub network: Option<NetworkSection>,
    pub fleet: Option<FleetSection>,
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub spds: SpdsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default, rename = "variant")]
    pub variants: Vec<VariantSection>,
    #[serde(default, rename = "compare")]
    pub comparisons: Vec<CompareSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub slots: usize,
    pub dt_h: f64,
    /// Clock label of slot 0, e.g. `"20:00"`; used only in outputs.
    #[serde(default)]
    pub start: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub file: PathBuf,
    pub baseline_p: PathBuf,
    #[serde(default)]
    pub baseline_q: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GenerateSection>,
    /// Optional 1-based half-open plug-in window `[a, b)` applied to every EV.
    #[serde(default)]
    pub window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub seed: u64,
    pub count: usize,
    #[serde(default = "default_anchor_bus")]
    pub anchor_bus: usize,
    #[serde(default)]
    pub anchor_count: usize,
}

fn default_anchor_bus() -> usize {
    1
}

/// A network-free instance with explicit weights, used for small studies.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub baseline_kw: Vec<f64>,
    pub pbar_kw: Vec<f64>,
    #[serde(rename = "ev")]
    pub evs: Vec<SyntheticEv>,
    #[serde(default)]
    pub coupling: Option<SyntheticCoupling>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEv {
    /// Energy per slot at full rate.
    pub coeff: f64,
    /// Required energy.
    pub energy: f64,
    #[serde(default)]
    pub window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticCoupling {
    /// `Σ w_i c_i(t) ≤ bound` for every slot.
    Inequality { weights: Vec<f64>, bound: f64 },
    /// `Σ w_i c_i(t) = rhs` for every slot.
    Equality { weights: Vec<f64>, rhs: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(default)]
    pub delta: f64,
    /// kW per objective unit; 1 keeps the objective in kW².
    #[serde(default = "one")]
    pub objective_base_kw: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            delta: 0.0,
            objective_base_kw: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpdsSection {
    pub tau_c: Option<f64>,
    pub tau_mu: Option<f64>,
    pub alpha0: Option<f64>,
    pub alpha_decay: Option<f64>,
    pub beta0: Option<f64>,
    pub beta_decay: Option<f64>,
    pub decay: Option<f64>,
    pub eps: Option<f64>,
    pub max_iter: Option<usize>,
    pub mu_max: Option<f64>,
    pub lambda_max: Option<f64>,
    pub dual_eps: Option<f64>,
    /// `damped` (default) or `explicit`.
    pub injection: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory under the output root; defaults to the scenario name.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// `off`, `digests` or `payloads`.
    #[serde(default = "default_roundlog")]
    pub roundlog: String,
    /// Evaluate the deviation bounds for attacked variants (needs δ > 0).
    #[serde(default = "yes")]
    pub bounds: bool,
}

fn default_roundlog() -> String {
    "digests".into()
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            roundlog: default_roundlog(),
            bounds: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// 0-based half-open slot window for the valley flatness metric.
    #[serde(default)]
    pub valley_window: Option<(usize, usize)>,
    /// Variant whose solution the attack deviation is measured against.
    #[serde(default)]
    pub reference_variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSection {
    pub name: String,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub a: String,
    pub b: String,
}

/// Goal of a dual attack.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoalEntry {
    Smooth,
    TimeTuning { theta: SlotSet, m: f64, big_m: f64 },
    BatteryDamage { t_f: usize, m: f64, big_m: f64 },
}

/// 1-based indices, either listed or as an inclusive range `{ from, to }`.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum SlotSet {
    List(Vec<usize>),
    Range { from: usize, to: usize },
}

impl SlotSet {
    pub fn expand(&self) -> Vec<usize> {
        match self {
            SlotSet::List(v) => v.clone(),
            SlotSet::Range { from, to } => (*from..=*to).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackEntry {
    Smooth {
        attacker: usize,
        omega: f64,
        #[serde(default)]
        stealth: Option<Stealth>,
    },
    TimeTuning {
        attacker: usize,
        omega: f64,
        theta: SlotSet,
        m: f64,
        big_m: f64,
        #[serde(default)]
        stealth: Option<Stealth>,
    },
    BatteryDamage {
        victims: SlotSet,
        omega: f64,
        t_f: usize,
        m: f64,
        big_m: f64,
        #[serde(default)]
        stealth: Option<Stealth>,
    },
    DualFull {
        attacker: usize,
        omega: f64,
        goal: GoalEntry,
        #[serde(default)]
        stealth: Option<Stealth>,
    },
    PowerBalance {
        attacker: usize,
        victims: SlotSet,
        omega: f64,
        goal: GoalEntry,
        #[serde(default)]
        eps_s: Option<f64>,
    },
}

/// Stealth gate: `eps_s` absent means ten times the convergence threshold.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Stealth {
    #[serde(default)]
    pub eps_s: Option<f64>,
}

fn zero_based(what: &str, v: usize, count: usize) -> CliResult<usize> {
    if v == 0 || v > count {
        return Err(CliError::Validation(format!("{what} {v} outside 1..={count}")));
    }
    Ok(v - 1)
}

impl GoalEntry {
    fn to_goal(&self) -> GoalSpec<f64> {
        match self {
            GoalEntry::Smooth => GoalSpec::Smooth,
            GoalEntry::TimeTuning { theta, m, big_m } => GoalSpec::TimeTuning {
                theta: theta.expand(),
                m: *m,
                big_m: *big_m,
            },
            GoalEntry::BatteryDamage { t_f, m, big_m } => GoalSpec::BatteryDamage {
                t_f: *t_f,
                m: *m,
                big_m: *big_m,
            },
        }
    }
}

impl AttackEntry {
    /// Converts to the engine's 0-based attack description.
    pub fn to_spec(&self, agents: usize) -> CliResult<Attack> {
        let agent = |v: usize| zero_based("agent", v, agents);
        let many = |s: &SlotSet| s.expand().into_iter().map(agent).collect::<CliResult<Vec<_>>>();
        let wrap = |spec: Attack, stealth: &Option<Stealth>| match stealth {
            Some(s) => Attack::Stealthy {
                inner: Box::new(spec),
                eps_s: s.eps_s,
            },
            None => spec,
        };
        Ok(match self {
            AttackEntry::Smooth { attacker, omega, stealth } => wrap(
                Attack::SmoothCharging {
                    attacker: agent(*attacker)?,
                    omega: *omega,
                },
                stealth,
            ),
            AttackEntry::TimeTuning {
                attacker,
                omega,
                theta,
                m,
                big_m,
                stealth,
            } => wrap(
                Attack::TimeTuning {
                    attacker: agent(*attacker)?,
                    omega: *omega,
                    theta: theta.expand(),
                    m: *m,
                    big_m: *big_m,
                },
                stealth,
            ),
            AttackEntry::BatteryDamage {
                victims,
                omega,
                t_f,
                m,
                big_m,
                stealth,
            } => wrap(
                Attack::BatteryDamage {
                    victims: many(victims)?,
                    omega: *omega,
                    t_f: *t_f,
                    m: *m,
                    big_m: *big_m,
                },
                stealth,
            ),
            AttackEntry::DualFull {
                attacker,
                omega,
                goal,
                stealth,
            } => wrap(
                Attack::DualFull {
                    attacker: agent(*attacker)?,
                    goal: goal.to_goal(),
                    omega: *omega,
                },
                stealth,
            ),
            AttackEntry::PowerBalance {
                attacker,
                victims,
                omega,
                goal,
                eps_s,
            } => Attack::DualPowerBalance {
                attacker: agent(*attacker)?,
                victims: many(victims)?,
                omega: *omega,
                goal: goal.to_goal(),
                eps_s: *eps_s,
            },
        })
    }
}

/// A scenario with every file loaded and its problem built.
pub struct Instance {
    pub scenario: Scenario,
    pub problem: Problem,
    /// Present for feeder-based scenarios.
    pub injection: Option<Injection>,
    pub v_floor: Option<f64>,
    pub fleet: Vec<FleetRow>,
    pub config: Config,
    pub variants: Vec<(String, Vec<Attack>)>,
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!(" line {line}:")
                })
                .unwrap_or_default();
            CliError::Validation(format!("{}:{at} {}", origin.display(), e.message()))
        })
    }

    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let sc = Self::from_toml(&text, path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((sc, dir))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from(&self.name))
    }

    pub fn log_level(&self) -> CliResult<LogLevel> {
        match self.output.roundlog.as_str() {
            "off" => Ok(LogLevel::Off),
            "digests" => Ok(LogLevel::Digests),
            "payloads" => Ok(LogLevel::Payloads),
            other => Err(CliError::Validation(format!(
                "output.roundlog must be off, digests or payloads, got `{other}`"
            ))),
        }
    }

    pub fn config(&self) -> CliResult<Config> {
        let s = &self.spds;
        let mut cfg = Config::default();
        if let Some(v) = s.tau_c {
            cfg.tau_c = v;
        }
        if let Some(v) = s.tau_mu {
            cfg.tau_mu = v;
        }
        if let Some(v) = s.decay {
            cfg.decay = v;
        }
        if let Some(a0) = s.alpha0 {
            cfg.alpha = Some(StepSchedule {
                a0,
                a1: s.alpha_decay.unwrap_or(cfg.decay),
            });
        } else if s.alpha_decay.is_some() {
            return Err(CliError::Validation("spds.alpha_decay needs spds.alpha0".into()));
        }
        if let Some(b0) = s.beta0 {
            cfg.beta = Some(StepSchedule {
                a0: b0,
                a1: s.beta_decay.unwrap_or(cfg.decay),
            });
        } else if s.beta_decay.is_some() {
            return Err(CliError::Validation("spds.beta_decay needs spds.beta0".into()));
        }
        cfg.eps = s.eps;
        if let Some(v) = s.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = s.mu_max {
            cfg.mu_max = v;
        }
        if let Some(v) = s.lambda_max {
            cfg.lambda_max = v;
        }
        cfg.dual_eps = s.dual_eps;
        cfg.injection = match s.injection.as_deref() {
            None | Some("damped") => InjectionMode::Damped,
            Some("explicit") => InjectionMode::Explicit,
            Some(other) => {
                return Err(CliError::Validation(format!(
                    "spds.injection must be damped or explicit, got `{other}`"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads data files relative to `dir` and builds everything needed to run.
    pub fn instantiate(self, dir: &Path) -> CliResult<Instance> {
        let t_len = self.horizon.slots;
        if t_len == 0 || !(self.horizon.dt_h > 0.0) {
            return Err(CliError::Validation("horizon needs slots > 0 and dt_h > 0".into()));
        }
        let config = self.config()?;
        self.log_level()?;
        let (problem, injection, v_floor, fleet) = match (&self.network, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(CliError::Validation(
                    "a scenario takes either [network] or [synthetic], not both".into(),
                ))
            }
            (None, None) => return Err(CliError::Validation("scenario needs [network] or [synthetic]".into())),
            (Some(net), None) => {
                let (p, inj, vf, fleet) = self.build_network(net, dir)?;
                (p, Some(inj), Some(vf), fleet)
            }
            (None, Some(syn)) => (self.build_synthetic(syn)?, None, None, Vec::new()),
        };
        let agents = problem.agents();
        let mut variants = Vec::new();
        if self.variants.is_empty() {
            variants.push(("base".to_string(), Vec::new()));
        }
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.starts_with('.') {
                return Err(CliError::Validation(format!("variant name `{}` is not a plain name", v.name)));
            }
            if variants.iter().any(|(n, _)| n == &v.name) {
                return Err(CliError::Validation(format!("variant `{}` defined twice", v.name)));
            }
            let specs = v
                .attacks
                .iter()
                .map(|a| a.to_spec(agents))
                .collect::<CliResult<Vec<_>>>()?;
            for s in &specs {
                s.validate(&problem)
                    .map_err(|e| CliError::Validation(format!("variant `{}`: {e}", v.name)))?;
            }
            variants.push((v.name.clone(), specs));
        }
        let known = |n: &str| variants.iter().any(|(v, _)| v == n);
        for c in &self.comparisons {
            for side in [&c.a, &c.b] {
                if !known(side) {
                    return Err(CliError::Validation(format!("comparison names unknown variant `{side}`")));
                }
            }
        }
        if let Some(r) = &self.metrics.reference_variant {
            if !known(r) {
                return Err(CliError::Validation(format!("metrics.reference_variant `{r}` is not a variant")));
            }
        }
        Ok(Instance {
            scenario: self,
            problem,
            injection,
            v_floor,
            fleet,
            config,
            variants,
        })
    }

    fn build_network(&self, net: &NetworkSection, dir: &Path) -> CliResult<(Problem, Injection, f64, Vec<FleetRow>)> {
        let t_len = self.horizon.slots;
        let nf = NetworkFile::load(&dir.join(&net.file))?;
        let network = nf.build()?;
        let baseline = io::read_baseline(
            &dir.join(&net.baseline_p),
            net.baseline_q.as_ref().map(|q| dir.join(q)).as_deref(),
            nf.n,
        )?;
        if baseline.horizon() != t_len {
            return Err(CliError::Validation(format!(
                "baseline has {} slots, horizon.slots is {t_len}",
                baseline.horizon()
            )));
        }
        let fleet_sec = self
            .fleet
            .as_ref()
            .ok_or_else(|| CliError::Validation("feeder scenarios need a [fleet] section".into()))?;
        let fleet = match (&fleet_sec.file, &fleet_sec.generate) {
            (Some(f), None) => io::read_fleet(&dir.join(f), nf.n)?,
            (None, Some(g)) => io::generate_fleet(&FleetGen {
                seed: g.seed,
                count: g.count,
                buses: nf.n,
                anchor_bus: g.anchor_bus,
                anchor_count: g.anchor_count,
            })?,
            _ => {
                return Err(CliError::Validation(
                    "[fleet] takes exactly one of `file` or `generate`".into(),
                ))
            }
        };
        let evs: Vec<_> = fleet
            .iter()
            .enumerate()
            .map(|(k, r)| r.to_spec(k, self.horizon.dt_h))
            .collect();
        let windows = match fleet_sec.window {
            Some((a, b)) => {
                if a == 0 || b <= a || b > t_len + 1 {
                    return Err(CliError::Validation(format!("fleet.window [{a}, {b}) invalid")));
                }
                Some(vec![Some((a - 1, b - 1)); evs.len()])
            }
            None => None,
        };
        let inj = build_injection_model(&network, &evs, &baseline)?;
        let problem = Problem::on_network(
            &network,
            &inj,
            &evs,
            baseline.aggregate(),
            windows.as_deref(),
            self.problem.delta,
            self.problem.objective_base_kw,
        )?;
        Ok((problem, inj, nf.v_floor_pu, fleet))
    }

    fn build_synthetic(&self, syn: &SyntheticSection) -> CliResult<Problem> {
        let t_len = self.horizon.slots;
        let s = syn.evs.len();
        if syn.baseline_kw.len() != t_len {
            return Err(CliError::Validation(format!(
                "synthetic.baseline_kw has {} entries, horizon.slots is {t_len}",
                syn.baseline_kw.len()
            )));
        }
        if syn.pbar_kw.len() != s {
            return Err(CliError::Validation(format!(
                "synthetic.pbar_kw has {} entries for {s} EVs",
                syn.pbar_kw.len()
            )));
        }
        let base = self.problem.objective_base_kw;
        let sets = syn
            .evs
            .iter()
            .enumerate()
            .map(|(i, ev)| {
                let mut upper = vec![1.0; t_len];
                if let Some((a, b)) = ev.window {
                    if a == 0 || b <= a || b > t_len + 1 {
                        return Err(CliError::Validation(format!("EV {} window [{a}, {b}) invalid", i + 1)));
                    }
                    for (t, u) in upper.iter_mut().enumerate() {
                        if t + 1 < a || t + 1 >= b {
                            *u = 0.0;
                        }
                    }
                }
                Ok(FeasibleSet::new(i, vec![0.0; t_len], upper, vec![ev.coeff; t_len], ev.energy)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let check_w = |w: &Vec<f64>| {
            if w.len() != s {
                Err(CliError::Validation(format!("coupling weights need {s} entries, got {}", w.len())))
            } else {
                Ok(())
            }
        };
        let (ineq, eq) = match &syn.coupling {
            None => (None, None),
            Some(SyntheticCoupling::Inequality { weights, bound }) => {
                check_w(weights)?;
                // Stored as `Σ d_i c_i ≥ y_b` with `d = −w`, `y_b = −bound`.
                let d = Matrix::from_fn(1, s, |_, i| -weights[i]);
                (
                    Some(InequalityCoupling {
                        d,
                        y_b: vec![-bound; t_len],
                    }),
                    None,
                )
            }
            Some(SyntheticCoupling::Equality { weights, rhs }) => {
                check_w(weights)?;
                (
                    None,
                    Some(EqualityCoupling {
                        weights: weights.clone(),
                        rhs: vec![*rhs; t_len],
                    }),
                )
            }
        };
        Ok(Problem::from_parts(ProblemParts {
            sets,
            pbar: syn.pbar_kw.iter().map(|p| p / base).collect(),
            p_b: syn.baseline_kw.iter().map(|p| p / base).collect(),
            ineq,
            eq,
            delta: self.problem.delta,
        })?)
    }
}

/// Loads and instantiates a scenario file.
pub fn load_instance(path: &Path) -> CliResult<Instance> {
    let (sc, dir) = Scenario::load(path)?;
    sc.instantiate(&dir)
}
