//! Experiment orchestration: config loading, plan, simulate, sample, fit,
//! learn, and the CSV/JSON artifacts behind the `memkern` binary.
//!
//! Every artifact carries the schema version and a hash of the config and
//! model text. Same config and seed give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitter::{fit, grid, FitConfig, GridKind, Robust};
use crate::learner::{
    learn_chain, learn_ensemble, learn_kernels, mode_params_from_kernel, recover_lambda,
    ChainTraceSet, Estimate, KernelEstimate, KernelProblem, LearnReport, Observation, ParameterRow,
    Provenance, REPORT_SCHEMA_VERSION,
};
use crate::model::{
    kernel_derivative, validate, FermionChainSpec, KernelSpec, ModelFile, NoiseModel,
};
use crate::offsets::{dyson_term, offset_m, DysonModel, PieceSet, TraceQuery};
use crate::pauli::{PauliString, Region};
use crate::planner::{plan_ensemble, plan_model, MeasurementSetting, Plan, PlanOptions, WSpec};
use crate::sampler::{
    provenance_line, sample_trace, sample_values, write_traces_csv, ShotConfig, TimeTrace,
};
use crate::sim_exact::{
    ensemble_traces, fermion_chain_dense, ChannelQuery, EnsembleQuadrature, PseudomodeEmbedding,
    DEFAULT_DIM_LIMIT,
};
use crate::sim_gaussian::build_majorana_model;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dense system plus pseudomodes.
    Exact,
    /// Free-fermion chain through Majorana covariances.
    Gaussian,
    /// Hamiltonian ensemble averaged by Gauss-Hermite quadrature.
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGridConfig {
    #[serde(default)]
    pub kind: GridKind,
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
}

impl Default for TimeGridConfig {
    fn default() -> Self {
        Self {
            kind: GridKind::Uniform,
            t_min: 1e-3,
            t_max: 0.1,
            points: 10,
        }
    }
}

impl TimeGridConfig {
    pub fn times(&self) -> Vec<f64> {
        grid(self.kind, self.t_min, self.t_max, self.points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Model file, relative to the config file.
    pub model: PathBuf,
    pub backend: Backend,
    /// Shots per time point; `0` runs on exact means.
    #[serde(default = "default_shots")]
    pub shots: Vec<u64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub time_grid: TimeGridConfig,
    /// Polynomial degree; defaults to 4 (exact), 3 (gaussian), 2 (ensemble).
    #[serde(default)]
    pub fit_degree: Option<usize>,
    /// Shot batches per time point for median-of-means fits (1 = plain fit).
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_order")]
    pub max_kernel_order: u32,
    /// Learn one representative per translation class (gaussian, ensemble).
    #[serde(default)]
    pub translation_invariant: bool,
    #[serde(default)]
    pub representative_site: Option<usize>,
    /// Plan both gate variants at every order; defaults to true unless the
    /// model's kernel is smooth at the origin.
    #[serde(default)]
    pub general_kernels: Option<bool>,
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    /// Relative to the config file.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_shots() -> Vec<u64> {
    vec![1_000_000]
}
fn default_repetitions() -> usize {
    1
}
fn default_batches() -> usize {
    1
}
fn default_order() -> u32 {
    1
}
fn default_nodes() -> usize {
    12
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A loaded, validated experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelFile,
    pub config_hash: String,
    pub output_dir: PathBuf,
}

/// First 16 hex digits of `sha256(parts...)`.
pub fn content_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Experiment {
    pub fn load(config_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(config_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }

    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} not supported (expected {CONFIG_SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        let model_path = base.join(&config.model);
        let model_text = fs::read_to_string(&model_path).map_err(|e| {
            Error::Config(format!("cannot read model {}: {e}", model_path.display()))
        })?;
        let model = ModelFile::parse(&model_text)?;
        let exp = Experiment {
            config_hash: content_hash(&[text, &model_text]),
            output_dir: base.join(&config.output_dir),
            config,
            model,
        };
        exp.check()?;
        Ok(exp)
    }

    fn check(&self) -> Result<()> {
        let c = &self.config;
        if c.time_grid.points < 2
            || !(c.time_grid.t_min >= 0.0 && c.time_grid.t_max > c.time_grid.t_min)
        {
            return Err(Error::Config(
                "time grid needs >= 2 points on 0 <= t_min < t_max".into(),
            ));
        }
        if c.repetitions == 0 || c.shots.is_empty() || c.batches == 0 {
            return Err(Error::Config(
                "need at least one shot count, repetition and batch".into(),
            ));
        }
        if self.fit_degree() + 1 > c.time_grid.points {
            return Err(Error::Config(format!(
                "fit degree {} needs more than {} time points",
                self.fit_degree(),
                c.time_grid.points
            )));
        }
        match c.backend {
            Backend::Gaussian => {
                let spec = self.chain()?;
                spec.validate()?;
                let site = self.chain_site()?;
                if site + 3 >= spec.n {
                    return Err(Error::Config(format!(
                        "representative site {site} needs sites up to {} in a chain of {}",
                        site + 3,
                        spec.n
                    )));
                }
                if self.fit_degree() < 3 {
                    return Err(Error::Config(
                        "the chain kernel derivative needs fit degree >= 3".into(),
                    ));
                }
            }
            Backend::Exact | Backend::Ensemble => {
                let m = self.spin()?;
                let bad = validate(m);
                if !bad.is_empty() {
                    let msg: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
                    return Err(Error::InvalidModel(msg.join("; ")));
                }
                if c.backend == Backend::Ensemble && m.ensemble.is_none() {
                    return Err(Error::Config(
                        "ensemble backend needs an [spin.ensemble] section".into(),
                    ));
                }
                if c.backend == Backend::Exact
                    && self.fit_degree() < c.max_kernel_order as usize + 2
                {
                    return Err(Error::Config(
                        "fit degree must reach the highest derivative order (max_kernel_order + 2)"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn spin(&self) -> Result<&NoiseModel> {
        self.model.spin.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "{:?} backend needs a [spin] model",
                self.config.backend
            ))
        })
    }

    pub fn chain(&self) -> Result<&FermionChainSpec> {
        self.model
            .fermion_chain
            .as_ref()
            .ok_or_else(|| Error::Config("gaussian backend needs a [fermion_chain] model".into()))
    }

    pub fn fit_degree(&self) -> usize {
        self.config.fit_degree.unwrap_or(match self.config.backend {
            Backend::Exact => 4,
            Backend::Gaussian => 3,
            Backend::Ensemble => 2,
        })
    }

    fn chain_site(&self) -> Result<usize> {
        let n = self.chain()?.n;
        Ok(self
            .config
            .representative_site
            .unwrap_or((n / 2).saturating_sub(2)))
    }

    fn fit_config(&self) -> FitConfig {
        let robust = if self.config.batches > 1 {
            Robust::MedianOfMeans {
                batches: self.config.batches,
            }
        } else {
            Robust::None
        };
        FitConfig {
            degree: self.fit_degree(),
            robust,
        }
    }

    /// Plan for spin backends (gaussian runs use a fixed trace set instead).
    pub fn plan(&self) -> Result<Plan> {
        let model = self.spin()?;
        match self.config.backend {
            Backend::Exact => {
                let opts = PlanOptions {
                    max_kernel_order: self.config.max_kernel_order,
                    general_kernels: self
                        .config
                        .general_kernels
                        .unwrap_or(!model.kernel.is_smooth()),
                    sh_site: None,
                    pairs: self.config.pairs.clone(),
                };
                Ok(plan_model(model, &opts))
            }
            Backend::Ensemble => Ok(plan_ensemble(model, &self.ensemble_pairs(model))),
            Backend::Gaussian => Err(Error::Config(
                "the gaussian backend has no spin plan".into(),
            )),
        }
    }

    /// Requested pairs, or all pairs with non-zero covariance, restricted to
    /// a two-site window under translation invariance.
    fn ensemble_pairs(&self, model: &NoiseModel) -> Vec<(usize, usize)> {
        if let Some(p) = &self.config.pairs {
            return p.clone();
        }
        let cov = &model.ensemble.as_ref().expect("checked").covariance;
        let c = self
            .config
            .representative_site
            .unwrap_or((model.n_qubits / 2).saturating_sub(1));
        let window = Region::from_iter([c, c + 1]);
        let inside = |k: usize| {
            !self.config.translation_invariant
                || model.hamiltonian[k].pauli.support().is_subset(&window)
        };
        let n = model.hamiltonian.len();
        (0..n)
            .flat_map(|a| (a..n).map(move |b| (a, b)))
            .filter(|&(a, b)| cov[a][b] != 0.0 && inside(a) && inside(b))
            .collect()
    }
}

fn term_label(p: &PauliString) -> String {
    p.to_string()
}

// ---------------------------------------------------------------- plan

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub plan: Plan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub hamiltonian_settings: usize,
    pub pairs: usize,
    pub settings: usize,
    pub max_settings_per_pair: usize,
    pub rounds: usize,
}

pub fn summarize_plan(plan: &Plan) -> PlanSummary {
    PlanSummary {
        hamiltonian_settings: plan.hamiltonian.len(),
        pairs: plan.pairs.len(),
        settings: plan.settings.len(),
        max_settings_per_pair: plan
            .schedule
            .rounds
            .iter()
            .flatten()
            .map(|g| g.setting_ids.len())
            .max()
            .unwrap_or(0),
        rounds: plan.schedule.n_rounds(),
    }
}

/// Write `plan.json` into the output directory and return its summary.
pub fn cmd_plan(exp: &Experiment) -> Result<PlanSummary> {
    if exp.config.backend == Backend::Gaussian {
        let site = exp.chain_site()?;
        let set = ChainTraceSet::at_site(site);
        fs::create_dir_all(&exp.output_dir)?;
        let body = serde_json::json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "config_hash": exp.config_hash,
            "representative_site": site,
            "traces": set.all(),
        });
        fs::write(
            exp.output_dir.join("plan.json"),
            serde_json::to_string_pretty(&body)? + "\n",
        )?;
        return Ok(PlanSummary {
            hamiltonian_settings: 2,
            pairs: 1,
            settings: 3,
            max_settings_per_pair: 1,
            rounds: 1,
        });
    }
    let plan = exp.plan()?;
    fs::create_dir_all(&exp.output_dir)?;
    let file = PlanFile {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: exp.config_hash.clone(),
        plan,
    };
    fs::write(
        exp.output_dir.join("plan.json"),
        serde_json::to_string_pretty(&file)? + "\n",
    )?;
    Ok(summarize_plan(&file.plan))
}

// ---------------------------------------------------------------- simulate

/// Noise-free trace values for every measured setting.
#[derive(Clone, Debug)]
pub struct ExactData {
    pub times: Vec<f64>,
    pub settings: Vec<MeasurementSetting>,
    pub values: BTreeMap<u64, Vec<f64>>,
    pub plan: Option<Plan>,
}

/// Stream identifiers of the three chain traces.
const CHAIN_IDS: [u64; 3] = [1, 2, 3];

pub fn simulate(exp: &Experiment) -> Result<ExactData> {
    let times = exp.config.time_grid.times();
    match exp.config.backend {
        Backend::Gaussian => {
            let spec = exp.chain()?;
            let model = build_majorana_model(spec)?;
            let set = ChainTraceSet::at_site(exp.chain_site()?);
            let mut values = BTreeMap::new();
            for (id, (a, b, c, d)) in CHAIN_IDS.iter().zip(set.all()) {
                // one gate-free step of length t on each side of the midpoint
                let v: Vec<f64> = times
                    .iter()
                    .map(|&t| model.linear_trace_closed_form(a, b, c, d, 2.0 * t))
                    .collect();
                values.insert(*id, v);
            }
            Ok(ExactData {
                times,
                settings: Vec::new(),
                values,
                plan: None,
            })
        }
        Backend::Exact => {
            let model = exp.spin()?;
            let plan = exp.plan()?;
            let joint = PseudomodeEmbedding::default().build(model)?;
            let settings: Vec<MeasurementSetting> = plan
                .hamiltonian
                .iter()
                .chain(&plan.settings)
                .cloned()
                .collect();
            let values = settings
                .par_iter()
                .map(|s| Ok((s.id, joint.channel(&ChannelQuery::from_setting(s), &times)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(ExactData {
                times,
                settings,
                values,
                plan: Some(plan),
            })
        }
        Backend::Ensemble => {
            let model = exp.spin()?;
            let plan = exp.plan()?;
            let quad = EnsembleQuadrature::new(model, exp.config.quadrature_nodes)?;
            let settings: Vec<MeasurementSetting> = plan
                .hamiltonian
                .iter()
                .chain(&plan.settings)
                .cloned()
                .collect();
            let values = settings
                .iter()
                .map(|s| {
                    Ok((
                        s.id,
                        ensemble_traces(model, &quad, &s.prepared_input(), &s.observable, &times)?,
                    ))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(ExactData {
                times,
                settings,
                values,
                plan: Some(plan),
            })
        }
    }
}

/// Sampled traces for one shot count and seed.
pub fn sample_all(data: &ExactData, shots: &ShotConfig) -> Result<Vec<TimeTrace>> {
    if data.settings.is_empty() {
        return data
            .values
            .iter()
            .map(|(&id, v)| sample_values(v, id, 1.0, &data.times, shots))
            .collect();
    }
    data.settings
        .par_iter()
        .map(|s| sample_trace(&data.values[&s.id], s, &data.times, shots))
        .collect()
}

// ---------------------------------------------------------------- learn

fn row(name: String, truth: Option<f64>, e: Estimate, shots: u64) -> ParameterRow {
    ParameterRow {
        parameter: name,
        truth,
        estimate: e.value,
        error: e.sd,
        shots,
    }
}

fn kernel_rows(
    ests: &[KernelEstimate],
    truth: Option<&KernelSpec>,
    shots: u64,
) -> Vec<ParameterRow> {
    let mut out = Vec::new();
    for e in ests {
        let t = truth.map(|k| kernel_derivative(k, e.a, e.b, e.order));
        let name = format!("K[{},{}]^({})", e.a, e.b, e.order);
        out.push(row(
            format!("{name}.re"),
            t.map(|z| z.re),
            Estimate::new(e.re, e.re_sd),
            shots,
        ));
        out.push(row(
            format!("{name}.im"),
            t.map(|z| z.im),
            Estimate::new(e.im, e.im_sd),
            shots,
        ));
    }
    out
}

/// Fit every trace and run the learner of the experiment's backend.
pub fn learn(
    exp: &Experiment,
    data: &ExactData,
    traces: &[TimeTrace],
    shots: &ShotConfig,
) -> LearnReport {
    let mut report = LearnReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: exp.config_hash.clone(),
        provenance: Provenance {
            backend: format!("{:?}", exp.config.backend).to_lowercase(),
            master_seed: shots.master_seed,
            shots_per_time: shots.shots,
            fit_degree: exp.fit_degree(),
            times: data.times.clone(),
            n_settings: traces.len(),
        },
        commentary: vec![
            "error bars: plug-in Bernoulli variance propagated through the linear fit and inversion; offsets' dependence on lower-order estimates is not propagated".into(),
            "analytic sample-complexity factors grow as exp(O(M^2 log M)) and are not used for error bars".into(),
        ],
        ..Default::default()
    };
    if let Err(e) = learn_into(exp, data, traces, shots, &mut report) {
        report.failure = Some(e.to_string());
    }
    report
}

fn learn_into(
    exp: &Experiment,
    data: &ExactData,
    traces: &[TimeTrace],
    shots: &ShotConfig,
    report: &mut LearnReport,
) -> Result<()> {
    let cfg = exp.fit_config();
    let observations = traces
        .iter()
        .map(|t| Ok((t.setting_id, Observation::from_fit(&fit(t, &cfg)?, t))))
        .collect::<Result<BTreeMap<u64, Observation>>>()?;
    let s = shots.shots;
    match exp.config.backend {
        Backend::Gaussian => {
            let spec = exp.chain()?;
            let site = exp.chain_site()?;
            let obs = CHAIN_IDS.map(|id| observations[&id].clone());
            let est = learn_chain(spec.n, site, &obs, 2.0)?;
            let kspec = spec.kernel_spec();
            let (k0, k1) = (
                kernel_derivative(&kspec, site, site + 2, 0).re,
                kernel_derivative(&kspec, site, site + 2, 1).re,
            );
            report
                .summary
                .push(row("h".into(), Some(spec.field), est.field, s));
            report
                .summary
                .push(row("J".into(), Some(spec.hopping), est.hopping, s));
            report.summary.push(row("K(0)".into(), Some(k0), est.k0, s));
            report
                .summary
                .push(row("K'(0)".into(), Some(k1), est.k1, s));
            report.lambda_hat = vec![est.field, est.hopping];
            let as_kernel = |e: Estimate, order| KernelEstimate {
                a: site,
                b: site + 2,
                order,
                re: e.value,
                im: 0.0,
                re_sd: e.sd,
                im_sd: 0.0,
            };
            report.kernel_hat = vec![as_kernel(est.k0, 0), as_kernel(est.k1, 1)];
            match mode_params_from_kernel(report.kernel_hat[0], report.kernel_hat[1]) {
                Ok(m) => {
                    report
                        .summary
                        .push(row("v".into(), Some(k0.abs().sqrt()), m.v, s));
                    report.summary.push(row(
                        "gamma".into(),
                        Some(spec.gamma[site + 1]),
                        m.gamma,
                        s,
                    ));
                    report.mode_params = Some(m);
                }
                Err(e) => report
                    .commentary
                    .push(format!("mode extraction refused: {e}")),
            }
            report.chain = Some(est);
        }
        Backend::Exact => {
            let model = exp.spin()?;
            let plan = data.plan.as_ref().expect("spin runs carry a plan");
            let lambda = recover_lambda(&plan.hamiltonian, &observations)?;
            for (t, e) in model.hamiltonian.iter().zip(&lambda) {
                report.summary.push(row(
                    format!("lambda[{}]", term_label(&t.pauli)),
                    Some(t.coeff),
                    *e,
                    s,
                ));
            }
            report.lambda_hat = lambda.clone();
            let system: Vec<(PauliString, f64)> = model
                .hamiltonian
                .iter()
                .zip(&lambda)
                .map(|(t, e)| (t.pauli.clone(), e.value))
                .collect();
            let couplings: Vec<PauliString> =
                model.couplings.iter().map(|c| c.pauli.clone()).collect();
            let problem = KernelProblem {
                plan,
                couplings: &couplings,
                system: &system,
                max_kernel_order: exp.config.max_kernel_order,
                smooth: model.kernel.is_smooth(),
                subtract_offsets: true,
            };
            let learned = learn_kernels(&problem, &observations);
            report
                .summary
                .extend(kernel_rows(&learned.estimates, Some(&model.kernel), s));
            report.kernel_hat = learned.estimates.clone();
            if let KernelSpec::Modes(modes) = &model.kernel {
                if modes.len() == 1 {
                    let pick = |order| {
                        learned
                            .estimates
                            .iter()
                            .find(|e| e.a == e.b && e.order == order)
                            .copied()
                    };
                    if let (Some(k0), Some(k1)) = (pick(0), pick(1)) {
                        match mode_params_from_kernel(k0, k1) {
                            Ok(m) => {
                                let mode = &modes[0];
                                report.summary.push(row(
                                    format!("v[{}]", k0.a),
                                    Some(mode.coupling(k0.a).norm()),
                                    m.v,
                                    s,
                                ));
                                report.summary.push(row(
                                    "gamma".into(),
                                    Some(mode.gamma),
                                    m.gamma,
                                    s,
                                ));
                                report.summary.push(row(
                                    "epsilon".into(),
                                    Some(mode.epsilon),
                                    m.epsilon,
                                    s,
                                ));
                                report.mode_params = Some(m);
                            }
                            Err(e) => report
                                .commentary
                                .push(format!("mode extraction refused: {e}")),
                        }
                    }
                }
            }
            if let Some(f) = learned.failure {
                return Err(Error::Unidentifiable(f));
            }
        }
        Backend::Ensemble => {
            let model = exp.spin()?;
            let plan = data.plan.as_ref().expect("spin runs carry a plan");
            let terms: Vec<PauliString> =
                model.hamiltonian.iter().map(|t| t.pauli.clone()).collect();
            let ens = learn_ensemble(plan, &terms, &observations)?;
            let truth = model.ensemble.as_ref().expect("checked");
            for pp in plan
                .pairs
                .iter()
                .flat_map(|p| [p.a, p.b])
                .collect::<std::collections::BTreeSet<_>>()
            {
                report.summary.push(row(
                    format!("lambda[{}]", term_label(&terms[pp])),
                    Some(truth.means[pp]),
                    ens.lambda[pp],
                    s,
                ));
            }
            for e in &ens.entries {
                let name = format!(
                    "Sigma[{},{}]",
                    term_label(&terms[e.a]),
                    term_label(&terms[e.b])
                );
                report
                    .summary
                    .push(row(name, Some(truth.covariance[e.a][e.b]), e.covariance, s));
            }
            report.lambda_hat = ens.lambda.clone();
            report.ensemble = Some(ens);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- run

/// Aggregate of one parameter over repetitions at one shot count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shots: u64,
    pub parameter: String,
    pub truth: Option<f64>,
    pub mean: f64,
    pub rms_error: Option<f64>,
    pub sd_empirical: f64,
    pub sd_reported: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// First repetition of every shot count, largest shot count first.
    pub reports: Vec<LearnReport>,
    pub sweep: Vec<SweepRow>,
    pub failures: Vec<String>,
}

/// Shot counts in execution order: exact means first, then descending.
pub fn shot_order(shots: &[u64]) -> Vec<u64> {
    let mut s = shots.to_vec();
    s.sort_by_key(|&x| if x == 0 { (0, 0) } else { (1, u64::MAX - x) });
    s.dedup();
    s
}

pub fn aggregate(shots: u64, reports: &[LearnReport]) -> Vec<SweepRow> {
    let mut by_name: BTreeMap<String, Vec<&ParameterRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        for p in &r.summary {
            if !by_name.contains_key(&p.parameter) {
                order.push(p.parameter.clone());
            }
            by_name.entry(p.parameter.clone()).or_default().push(p);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let rows = &by_name[&name];
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.estimate).sum::<f64>() / n;
            let var = if rows.len() > 1 {
                rows.iter()
                    .map(|r| (r.estimate - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            let truth = rows[0].truth;
            SweepRow {
                shots,
                parameter: name,
                truth,
                mean,
                rms_error: truth.map(|t| {
                    (rows.iter().map(|r| (r.estimate - t).powi(2)).sum::<f64>() / n).sqrt()
                }),
                sd_empirical: var.sqrt(),
                sd_reported: rows[0].error,
                repetitions: rows.len(),
            }
        })
        .collect()
}

/// Master seed of repetition `rep`; spreads repetitions so nearby base
/// seeds do not share streams.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Full pipeline over the shot sweep, without touching the filesystem.
pub fn run_experiment(exp: &Experiment) -> Result<(ExactData, RunOutcome)> {
    let data = simulate(exp)?;
    let mut reports = Vec::new();
    let mut sweep = Vec::new();
    let mut failures = Vec::new();
    for shots in shot_order(&exp.config.shots) {
        let reps = if shots == 0 {
            1
        } else {
            exp.config.repetitions
        };
        let mut batch = Vec::with_capacity(reps);
        for rep in 0..reps {
            let cfg = ShotConfig {
                shots,
                batches: exp.config.batches,
                master_seed: repetition_seed(exp.config.seed, rep),
            };
            let report = match sample_all(&data, &cfg) {
                Ok(traces) => learn(exp, &data, &traces, &cfg),
                Err(e) => LearnReport {
                    failure: Some(e.to_string()),
                    config_hash: exp.config_hash.clone(),
                    schema_version: REPORT_SCHEMA_VERSION,
                    ..Default::default()
                },
            };
            if let Some(f) = &report.failure {
                failures.push(format!("S = {shots}, repetition {rep}: {f}"));
            }
            batch.push(report);
        }
        sweep.extend(aggregate(shots, &batch));
        reports.push(batch.swap_remove(0));
    }
    Ok((
        data,
        RunOutcome {
            reports,
            sweep,
            failures,
        },
    ))
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow], config_hash: &str) -> Result<()> {
    writeln!(w, "{}", provenance_line(REPORT_SCHEMA_VERSION, config_hash))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "shots",
        "parameter",
        "truth",
        "mean",
        "rms_error",
        "sd_empirical",
        "sd_reported",
        "repetitions",
    ])?;
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        csv.write_record([
            r.shots.to_string(),
            r.parameter.clone(),
            opt(r.truth),
            r.mean.to_string(),
            opt(r.rms_error),
            r.sd_empirical.to_string(),
            r.sd_reported.to_string(),
            r.repetitions.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Run and write `traces_S*.csv`, `report_S*.json`, `summary_S*.csv` and
/// `sweep.csv`. Failures are collected; partial outputs are kept.
pub fn cmd_run(exp: &Experiment) -> Result<RunOutcome> {
    let (data, outcome) = run_experiment(exp)?;
    fs::create_dir_all(&exp.output_dir)?;
    let dir = &exp.output_dir;
    for report in &outcome.reports {
        let s = report.provenance.shots_per_time;
        fs::write(
            dir.join(format!("report_S{s}.json")),
            report.to_json()? + "\n",
        )?;
        report.write_summary_csv(fs::File::create(dir.join(format!("summary_S{s}.csv")))?)?;
        let cfg = ShotConfig {
            shots: s,
            batches: exp.config.batches,
            master_seed: exp.config.seed,
        };
        if let Ok(traces) = sample_all(&data, &cfg) {
            write_traces_csv(
                fs::File::create(dir.join(format!("traces_S{s}.csv")))?,
                &traces,
                REPORT_SCHEMA_VERSION,
                &exp.config_hash,
            )?;
        }
    }
    write_sweep_csv(
        fs::File::create(dir.join("sweep.csv"))?,
        &outcome.sweep,
        &exp.config_hash,
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------- report

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Read a sweep CSV (as written by [`write_sweep_csv`]).
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {:?} in sweep", &rec[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push(SweepRow {
            shots: rec[0]
                .parse()
                .map_err(|_| Error::Parse("bad shot count".into()))?,
            parameter: rec[1].to_string(),
            truth: opt(2)?,
            mean: num(3)?,
            rms_error: opt(4)?,
            sd_empirical: num(5)?,
            sd_reported: num(6)?,
            repetitions: rec[7]
                .parse()
                .map_err(|_| Error::Parse("bad repetition count".into()))?,
        });
    }
    Ok(out)
}

/// Per-parameter table of the sweep with the fitted error-vs-shots slope.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let rows = read_sweep_csv(&dir.join("sweep.csv"))?;
    let mut by: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in &rows {
        by.entry(&r.parameter).or_default().push(r);
    }
    let mut out = format!(
        "{:<28} {:>10} {:>12} {:>12} {:>12} {:>8}\n",
        "parameter", "truth", "estimate", "rms error", "shots", "slope"
    );
    for (name, rs) in by {
        let noisy: Vec<&&SweepRow> = rs.iter().filter(|r| r.shots > 0).collect();
        let x: Vec<f64> = noisy.iter().map(|r| r.shots as f64).collect();
        let y: Vec<f64> = noisy
            .iter()
            .map(|r| r.rms_error.unwrap_or(r.sd_empirical.max(r.sd_reported)))
            .collect();
        let slope = loglog_slope(&x, &y)
            .map(|s| format!("{s:.2}"))
            .unwrap_or_else(|| "-".into());
        let best = rs
            .iter()
            .max_by_key(|r| if r.shots == 0 { u64::MAX } else { r.shots })
            .unwrap();
        out.push_str(&format!(
            "{:<28} {:>10} {:>12.5} {:>12} {:>12} {:>8}\n",
            name,
            best.truth.map(|t| format!("{t:.4}")).unwrap_or_default(),
            best.mean,
            best.rms_error
                .map(|e| format!("{e:.3e}"))
                .unwrap_or_default(),
            if best.shots == 0 {
                "exact".to_string()
            } else {
                best.shots.to_string()
            },
            slope
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------- verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

/// Free-fermion covariance dynamics against the dense master equation on a
/// chain of 2 system and 2 bath modes, `t in [0, 0.1]`.
pub fn check_gaussian_vs_dense() -> Result<Check> {
    let spec = FermionChainSpec::chain(2, 0.2, 0.8, 1.0, 0.9);
    let gauss = build_majorana_model(&spec)?;
    let dense = fermion_chain_dense(&spec, DEFAULT_DIM_LIMIT)?;
    let times: Vec<f64> = (0..=10).map(|k| 0.01 * k as f64).collect();
    let mut worst: f64 = 0.0;
    for (a, b, c, d) in [
        (1, 2, 3, 2),
        (0, 1, 0, 1),
        (1, 3, 1, 3),
        (0, 4, 2, 5),
        (1, 6, 1, 6),
        (2, 3, 0, 1),
    ] {
        let g = gauss.observable_trace(a, b, c, d, &times)?;
        let e = dense.observable_trace(a, b, c, d, &times, crate::numerics::Tolerance::tight())?;
        worst = g
            .iter()
            .zip(&e)
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    Ok(Check::at_most(
        "gaussian vs dense master equation (max deviation)",
        worst,
        1e-6,
    ))
}

/// Two-qubit system with one pseudomode, used by the offset checks.
pub fn reference_instance() -> NoiseModel {
    let text = r#"
schema_version = 1
[spin]
n_qubits = 2
[[spin.hamiltonian]]
pauli = "Z0"
coeff = 0.7
[[spin.hamiltonian]]
pauli = "Z1"
coeff = -0.4
[[spin.hamiltonian]]
pauli = "X0 X1"
coeff = 0.3
[[spin.couplings]]
pauli = "X0"
[[spin.couplings]]
pauli = "Y1"
[spin.kernel]
modes = [{ couplings = [{ term = 0, re = 0.6 }, { term = 1, re = 0.3, im = 0.2 }], epsilon = 0.5, gamma = 0.8 }]
"#;
    ModelFile::parse(text)
        .expect("reference model parses")
        .spin
        .expect("spin model")
}

/// Offsets `f^(2)` and `f^(3)` (plus the lower Dyson orders they complete)
/// against finite differences of simulated traces; worst relative error.
pub fn check_offsets_vs_finite_differences() -> Result<Check> {
    let model = reference_instance();
    let joint = PseudomodeEmbedding::default().build(&model)?;
    let dyson = DysonModel {
        system: model
            .hamiltonian
            .iter()
            .map(|t| (t.pauli.clone(), t.coeff))
            .collect(),
        couplings: model.couplings.iter().map(|c| c.pauli.clone()).collect(),
        kernel: model.kernel.to_table(2),
    };
    let p = |s: &str| -> PauliString { s.parse().expect("valid Pauli") };
    let mut worst: f64 = 0.0;
    for (input, obs, w) in [
        (p("X0"), p("Y0"), WSpec::Identity),
        (p("Z0 X1"), p("Z0 Y1"), WSpec::Identity),
        (
            p("Y0"),
            p("X0 Z1"),
            WSpec::SinglePauli {
                site: 1,
                axis: crate::pauli::Axis::X,
            },
        ),
    ] {
        let fd = joint.finite_difference_derivatives(
            &ChannelQuery {
                prepared: input.clone(),
                observable: obs.clone(),
                w,
            },
            3,
            0.02,
        )?;
        let q = TraceQuery {
            prepared: input,
            observable: obs,
            w,
            sign: 1.0,
        };
        for m in [2u32, 3] {
            let lower: f64 = (1..=2)
                .map(|n| {
                    if m == 2 {
                        dyson_term(&dyson, &q, m, n, PieceSet::CouplingsOnly, true, None).re
                    } else {
                        dyson_term(&dyson, &q, m, n, PieceSet::All, true, None).re
                    }
                })
                .sum();
            let predicted = lower + offset_m(&dyson, &q, m)?;
            let got = fd[m as usize].value;
            worst = worst.max((predicted - got).abs() / got.abs().max(1e-3));
        }
    }
    Ok(Check::at_most(
        "offsets f2, f3 vs finite differences (relative)",
        worst,
        1e-4,
    ))
}

/// Exhaustive products of two-site Pauli strings against dense matrices.
pub fn check_pauli_algebra() -> Check {
    let region = Region::from_iter([0, 1]);
    let all = PauliString::all_on(&region);
    let mut worst: f64 = 0.0;
    for a in &all {
        for b in &all {
            let dense = a.to_dense(2) * b.to_dense(2);
            let ours = a.multiply(b).to_dense(2);
            worst = worst.max((dense - ours).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Check::at_most("two-site Pauli products vs dense matrices", worst, 1e-12)
}

pub fn cmd_verify() -> Result<Vec<Check>> {
    Ok(vec![
        check_gaussian_vs_dense()?,
        check_offsets_vs_finite_differences()?,
        check_pauli_algebra(),
    ])
}

/// Exit code of an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::InvalidModel(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shot_order_puts_exact_then_largest_first() {
        assert_eq!(
            shot_order(&[1000, 0, 1_000_000, 1000, 10_000]),
            vec![0, 1_000_000, 10_000, 1000]
        );
    }

    #[test]
    fn slope_of_inverse_square_root() {
        let x = [1e3, 1e4, 1e5, 1e6];
        let y: Vec<f64> = x.iter().map(|s: &f64| 3.0 / s.sqrt()).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn hash_depends_on_every_part() {
        assert_ne!(content_hash(&["a", "bc"]), content_hash(&["ab", "c"]));
        assert_eq!(content_hash(&["x"]).len(), 16);
    }

    #[test]
    fn reference_instance_is_valid() {
        assert!(validate(&reference_instance()).is_empty());
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        let dir = tempfile::tempdir().unwrap();
        let err = Experiment::from_text(
            "schema_version = 1\nbackend = \"exact\"\nmodel = \"missing.toml\"\n",
            dir.path(),
        )
        .unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let err = Experiment::from_text("schema_version = 9\n", dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }
}
