//! Experiment configuration: a flat `key = value` text format with dotted
//! section names, strict schema validation, and built-in reproduction
//! presets.
//!
//! Unknown keys are rejected with file/line diagnostics. Every value that
//! falls back to a default is logged; the preset values for the initial
//! state, horizon and signal levels are fixed choices of this tool, not
//! values taken from any external reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{MatrixKernel, ScalarKernel};
use crate::linalg::SymMatrix;
use crate::mean::MeanFn;
use crate::proxy::ProxyVariant;

/// A method the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    GroundTruth,
    Afs,
    Linearized,
    Independent,
    Proxy(ProxyVariant),
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            Self::GroundTruth => "ground_truth".into(),
            Self::Afs => "afs".into(),
            Self::Linearized => "linearized".into(),
            Self::Independent => "independent".into(),
            Self::Proxy(v) => format!("proxy_{}", v.tag()),
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "ground_truth" => Some(Self::GroundTruth),
            "afs" => Some(Self::Afs),
            "linearized" => Some(Self::Linearized),
            "independent" => Some(Self::Independent),
            _ => token
                .strip_prefix("proxy:")
                .and_then(ProxyVariant::from_tag)
                .map(Self::Proxy),
        }
    }

    /// Sampling methods produce trajectory batches; moment methods produce
    /// exact moment sequences.
    pub fn is_sampling(&self) -> bool {
        matches!(self, Self::GroundTruth | Self::Afs)
    }
}

/// How to build basis expansions for the approximate-function-sample method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Auto,
    Rff,
    Nystrom,
    LinearExact,
}

pub use crate::basis::ExpansionMode;

#[derive(Debug, Clone)]
pub struct BasisConfig {
    pub count: usize,
    pub kind: BasisKind,
    pub mode: ExpansionMode,
    /// Landmark sampling box for the Nystrom construction (uniform grid).
    pub nystrom_low: f64,
    pub nystrom_high: f64,
    pub nystrom_points: usize,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub origin: String,
    pub state_dim: usize,
    pub mean: MeanFn,
    pub kernel: MatrixKernel,
    pub noise_cov: SymMatrix,
    pub training_data: Option<PathBuf>,
    pub horizon_steps: usize,
    pub initial_state: DVector<f64>,
    pub methods: Vec<MethodSpec>,
    pub reference: MethodSpec,
    pub samples: usize,
    pub seed: u64,
    pub basis: BasisConfig,
    pub inputs_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub proxy_gain: f64,
    pub proxy_signal_std: f64,
    pub proxy_noise_std: f64,
    /// Resolved key/value pairs (defaults applied), echoed into artifacts.
    resolved: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Canonical echo of the resolved configuration, one sorted
    /// `key = value` line each.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolved.insert("seed".into(), seed.to_string());
    }

    pub fn override_out_dir(&mut self, dir: PathBuf) {
        self.resolved
            .insert("output.dir".into(), dir.display().to_string());
        self.out_dir = dir;
    }
}

struct KeyMap {
    origin: String,
    entries: BTreeMap<String, (usize, String)>,
    resolved: BTreeMap<String, String>,
}

impl KeyMap {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigInvalid {
                    location: format!("{origin}:{}", idx + 1),
                    message: format!("expected 'key = value', got '{line}'"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(Error::ConfigInvalid {
                    location: format!("{origin}:{}", idx + 1),
                    message: format!("empty value for '{key}'"),
                });
            }
            if entries.insert(key.clone(), (idx + 1, value)).is_some() {
                return Err(Error::ConfigInvalid {
                    location: format!("{origin}:{}", idx + 1),
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
            resolved: BTreeMap::new(),
        })
    }

    fn invalid(&self, key: &str, line: Option<usize>, message: impl Into<String>) -> Error {
        let location = match line {
            Some(l) => format!("{}:{} (key '{key}')", self.origin, l),
            None => format!("{} (key '{key}')", self.origin),
        };
        Error::ConfigInvalid {
            location,
            message: message.into(),
        }
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let v = self.entries.remove(key);
        if let Some((_, value)) = &v {
            self.resolved.insert(key.to_string(), value.clone());
        }
        v
    }

    fn take_or_default(&mut self, key: &str, default: &str) -> (Option<usize>, String) {
        match self.take(key) {
            Some((line, v)) => (Some(line), v),
            None => {
                log::info!("config {}: '{key}' not set, using default '{default}'", self.origin);
                self.resolved.insert(key.to_string(), default.to_string());
                (None, default.to_string())
            }
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        let (line, v) = self.take_or_default(key, &default.to_string());
        v.parse::<f64>()
            .map_err(|_| self.invalid(key, line, format!("expected a decimal number, got '{v}'")))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        let (line, v) = self.take_or_default(key, &default.to_string());
        v.parse::<usize>()
            .map_err(|_| self.invalid(key, line, format!("expected a nonnegative integer, got '{v}'")))
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        let (line, v) = self.take_or_default(key, &default.to_string());
        v.parse::<u64>()
            .map_err(|_| self.invalid(key, line, format!("expected an unsigned integer, got '{v}'")))
    }

    fn f64_required(&mut self, key: &str) -> Result<f64> {
        let (line, v) = self
            .take(key)
            .ok_or_else(|| self.invalid(key, None, "required key missing"))?;
        v.parse::<f64>()
            .map_err(|_| self.invalid(key, Some(line), format!("expected a decimal number, got '{v}'")))
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<(usize, Vec<f64>)>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => {
                let vals: std::result::Result<Vec<f64>, _> =
                    v.split(',').map(|c| c.trim().parse::<f64>()).collect();
                match vals {
                    Ok(vals) => Ok(Some((line, vals))),
                    Err(_) => Err(self.invalid(
                        key,
                        Some(line),
                        format!("expected comma-separated decimal numbers, got '{v}'"),
                    )),
                }
            }
        }
    }

    /// Errors on the first remaining (unknown) key.
    fn finish(self) -> Result<BTreeMap<String, String>> {
        if let Some((key, (line, _))) = self.entries.iter().next() {
            return Err(Error::ConfigInvalid {
                location: format!("{}:{}", self.origin, line),
                message: format!("unknown key '{key}'"),
            });
        }
        Ok(self.resolved)
    }
}

fn kernel_from_map(map: &mut KeyMap, prefix: &str) -> Result<ScalarKernel> {
    let kind_key = format!("{prefix}.kind");
    let (line, kind) = map
        .take(&kind_key)
        .ok_or_else(|| map.invalid(&kind_key, None, "required key missing"))?;
    match kind.as_str() {
        "se" => {
            let sf_key = format!("{prefix}.sigma_f");
            let ls_key = format!("{prefix}.lengthscale");
            let sf = map.f64_or(&sf_key, 1.0)?;
            let ls = map.f64_required(&ls_key)?;
            if !(ls > 0.0) {
                return Err(map.invalid(&ls_key, None, format!("must be positive, got {ls}")));
            }
            if sf < 0.0 {
                return Err(map.invalid(&sf_key, None, format!("must be nonnegative, got {sf}")));
            }
            ScalarKernel::squared_exponential(sf, ls)
        }
        "linear" => {
            let sf_key = format!("{prefix}.sigma_f");
            let sf = map.f64_or(&sf_key, 1.0)?;
            if sf < 0.0 {
                return Err(map.invalid(&sf_key, None, format!("must be nonnegative, got {sf}")));
            }
            ScalarKernel::linear(sf)
        }
        "product" => {
            let left = kernel_from_map(map, &format!("{prefix}.left"))?;
            let right = kernel_from_map(map, &format!("{prefix}.right"))?;
            Ok(ScalarKernel::product(left, right))
        }
        other => Err(map.invalid(
            &kind_key,
            Some(line),
            format!("unknown kernel kind '{other}' (expected se, linear or product)"),
        )),
    }
}

fn model_from_map(map: &mut KeyMap) -> Result<(usize, MeanFn, MatrixKernel, SymMatrix, Option<PathBuf>)> {
    let state_dim = map.usize_or("model.state_dim", 1)?;
    if state_dim == 0 {
        return Err(map.invalid("model.state_dim", None, "must be at least 1"));
    }

    let (_, mean_kind) = map.take_or_default("model.mean.kind", "zero");
    let mean = match mean_kind.as_str() {
        "zero" => MeanFn::zero(state_dim),
        "linear" => {
            let Some((line, gain)) = map.f64_list("model.mean.gain")? else {
                return Err(map.invalid("model.mean.gain", None, "required for a linear mean"));
            };
            if gain.is_empty() || gain.len() % state_dim != 0 {
                return Err(map.invalid(
                    "model.mean.gain",
                    Some(line),
                    format!(
                        "expected a row-major {state_dim} x d matrix ({} values given)",
                        gain.len()
                    ),
                ));
            }
            let cols = gain.len() / state_dim;
            MeanFn::linear(DMatrix::from_row_slice(state_dim, cols, &gain))
        }
        other => {
            return Err(map.invalid(
                "model.mean.kind",
                None,
                format!("unknown mean kind '{other}' (expected zero or linear)"),
            ))
        }
    };

    let scalar_kernel = kernel_from_map(map, "model.kernel")?;
    let (_, coupling) = map.take_or_default("model.kernel.coupling", "independent");
    let kernel = match coupling.as_str() {
        "independent" => {
            MatrixKernel::independent(vec![scalar_kernel; state_dim])?
        }
        "distance" => {
            let metric = match map.f64_list("model.kernel.metric")? {
                Some((line, m)) => {
                    if m.len() != state_dim {
                        return Err(map.invalid(
                            "model.kernel.metric",
                            Some(line),
                            format!("expected {state_dim} values, got {}", m.len()),
                        ));
                    }
                    m
                }
                None => {
                    log::info!(
                        "config {}: 'model.kernel.metric' not set, using default 0..{}",
                        map.origin,
                        state_dim - 1
                    );
                    (0..state_dim).map(|i| i as f64).collect()
                }
            };
            MatrixKernel::distance_coupled(scalar_kernel, metric)?
        }
        other => {
            return Err(map.invalid(
                "model.kernel.coupling",
                None,
                format!("unknown coupling '{other}' (expected independent or distance)"),
            ))
        }
    };

    let noise = match map.f64_list("model.noise.q")? {
        None => {
            log::info!("config {}: 'model.noise.q' not set, using default '1'", map.origin);
            map.resolved.insert("model.noise.q".into(), "1".into());
            SymMatrix::symmetrized(DMatrix::identity(state_dim, state_dim))
        }
        Some((line, vals)) => {
            if vals.len() == 1 {
                if vals[0] < 0.0 {
                    return Err(map.invalid("model.noise.q", Some(line), "must be nonnegative"));
                }
                SymMatrix::symmetrized(DMatrix::identity(state_dim, state_dim) * vals[0])
            } else if vals.len() == state_dim * state_dim {
                SymMatrix::new(DMatrix::from_row_slice(state_dim, state_dim, &vals)).map_err(
                    |e| map.invalid("model.noise.q", Some(line), format!("not symmetric: {e}")),
                )?
            } else {
                return Err(map.invalid(
                    "model.noise.q",
                    Some(line),
                    format!(
                        "expected a scalar or {} row-major values, got {}",
                        state_dim * state_dim,
                        vals.len()
                    ),
                ));
            }
        }
    };

    let training_data = map.take("model.data").map(|(line, v)| (line, PathBuf::from(v)));
    if let Some((line, path)) = &training_data {
        if !path.exists() {
            return Err(map.invalid(
                "model.data",
                Some(*line),
                format!("file not found: {}", path.display()),
            ));
        }
    }

    Ok((
        state_dim,
        mean,
        kernel,
        noise,
        training_data.map(|(_, p)| p),
    ))
}

fn parse_experiment(mut map: KeyMap) -> Result<ExperimentConfig> {
    let origin = map.origin.clone();
    let (state_dim, mean, kernel, noise_cov, training_data) = model_from_map(&mut map)?;

    let horizon_steps = map.usize_or("horizon.steps", 50)?;
    if horizon_steps == 0 {
        return Err(map.invalid("horizon.steps", None, "must be at least 1"));
    }
    let initial_state = match map.f64_list("horizon.x0")? {
        Some((line, vals)) => {
            if vals.len() != state_dim {
                return Err(map.invalid(
                    "horizon.x0",
                    Some(line),
                    format!("expected {state_dim} components, got {}", vals.len()),
                ));
            }
            DVector::from_row_slice(&vals)
        }
        None => {
            log::info!("config {origin}: 'horizon.x0' not set, using default '1' per component");
            map.resolved.insert(
                "horizon.x0".into(),
                vec!["1"; state_dim].join(","),
            );
            DVector::from_element(state_dim, 1.0)
        }
    };

    let (methods_line, methods_str) = map.take_or_default("methods", "ground_truth");
    let mut methods = Vec::new();
    for token in methods_str.split(',') {
        let token = token.trim();
        let m = MethodSpec::parse(token).ok_or_else(|| {
            map.invalid(
                "methods",
                methods_line,
                format!(
                    "unknown method '{token}' (expected ground_truth, afs, linearized, \
                     independent or proxy:1a|1b|2a|2b)"
                ),
            )
        })?;
        if methods.contains(&m) {
            return Err(map.invalid("methods", methods_line, format!("duplicate method '{token}'")));
        }
        methods.push(m);
    }
    if methods.iter().any(|m| matches!(m, MethodSpec::Proxy(_))) && state_dim != 1 {
        return Err(map.invalid(
            "methods",
            methods_line,
            "proxy references are scalar; they require model.state_dim = 1",
        ));
    }

    let reference = match map.take("reference") {
        Some((line, v)) => {
            let r = MethodSpec::parse(&v)
                .ok_or_else(|| map.invalid("reference", Some(line), format!("unknown method '{v}'")))?;
            if !methods.contains(&r) {
                return Err(map.invalid(
                    "reference",
                    Some(line),
                    format!("reference '{v}' is not among the requested methods"),
                ));
            }
            r
        }
        None => {
            let r = if methods.contains(&MethodSpec::GroundTruth) {
                MethodSpec::GroundTruth
            } else {
                methods[0]
            };
            log::info!("config {origin}: 'reference' not set, using '{}'", r.label());
            map.resolved.insert("reference".into(), r.label());
            r
        }
    };

    let samples = map.usize_or("samples", 20_000)?;
    if methods.iter().any(|m| m.is_sampling()) && samples < 2 {
        return Err(map.invalid(
            "samples",
            None,
            "at least 2 samples are required for empirical variances",
        ));
    }
    let seed = map.u64_or("seed", 0)?;

    let basis = {
        let count = map.usize_or("basis.count", 10)?;
        if count == 0 {
            return Err(map.invalid("basis.count", None, "must be at least 1"));
        }
        let (kind_line, kind_str) = map.take_or_default("basis.kind", "auto");
        let kind = match kind_str.as_str() {
            "auto" => BasisKind::Auto,
            "rff" => BasisKind::Rff,
            "nystrom" => BasisKind::Nystrom,
            "linear_exact" => BasisKind::LinearExact,
            other => {
                return Err(map.invalid(
                    "basis.kind",
                    kind_line,
                    format!("unknown basis kind '{other}'"),
                ))
            }
        };
        let (mode_line, mode_str) = map.take_or_default("basis.mode", "residual");
        let mode = match mode_str.as_str() {
            "residual" => ExpansionMode::Residual,
            "direct" => ExpansionMode::Direct,
            other => {
                return Err(map.invalid(
                    "basis.mode",
                    mode_line,
                    format!("unknown basis mode '{other}' (expected residual or direct)"),
                ))
            }
        };
        let nystrom_low = map.f64_or("basis.nystrom.low", -5.0)?;
        let nystrom_high = map.f64_or("basis.nystrom.high", 5.0)?;
        let nystrom_points = map.usize_or("basis.nystrom.points", 64)?;
        if methods.contains(&MethodSpec::Afs) {
            if !(nystrom_high > nystrom_low) {
                return Err(map.invalid(
                    "basis.nystrom.high",
                    None,
                    "landmark box must satisfy low < high",
                ));
            }
            if nystrom_points < count {
                return Err(map.invalid(
                    "basis.nystrom.points",
                    None,
                    "needs at least basis.count landmark points",
                ));
            }
        }
        BasisConfig {
            count,
            kind,
            mode,
            nystrom_low,
            nystrom_high,
            nystrom_points,
        }
    };

    let inputs_path = map.take("inputs").map(|(line, v)| (line, PathBuf::from(v)));
    if let Some((line, p)) = &inputs_path {
        if !p.exists() {
            return Err(map.invalid("inputs", Some(*line), format!("file not found: {}", p.display())));
        }
    }

    let (_, out_dir) = map.take_or_default("output.dir", "out");

    let proxy_gain = map.f64_or("proxy.gain", 0.95)?;
    let proxy_signal_std = map.f64_or("proxy.sigma_f", 1.0)?;
    let proxy_noise_std = map.f64_or("proxy.sigma_w", 1.0)?;
    if proxy_signal_std < 0.0 || proxy_noise_std < 0.0 {
        return Err(map.invalid("proxy.sigma_f", None, "standard deviations must be nonnegative"));
    }

    let resolved = map.finish()?;
    Ok(ExperimentConfig {
        origin,
        state_dim,
        mean,
        kernel,
        noise_cov,
        training_data,
        horizon_steps,
        initial_state,
        methods,
        reference,
        samples,
        seed,
        basis,
        inputs_path: inputs_path.map(|(_, p)| p),
        out_dir: PathBuf::from(out_dir),
        proxy_gain,
        proxy_signal_std,
        proxy_noise_std,
        resolved,
    })
}

/// Parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}

/// Parses config text; `origin` names the source in diagnostics.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    parse_experiment(KeyMap::parse(text, origin)?)
}

/// Parses a model-only config (only `model.*` keys allowed); used by
/// embedders that drive the engines directly.
pub fn parse_model_config_str(text: &str, origin: &str) -> Result<crate::gp::GpModel> {
    let mut map = KeyMap::parse(text, origin)?;
    let (state_dim, mean, kernel, noise, training_data) = model_from_map(&mut map)?;
    map.finish()?;
    let model = crate::gp::GpModel::new(mean, kernel, noise)?;
    match training_data {
        None => Ok(model),
        Some(path) => {
            let (xs, ys) = crate::io::read_training_csv(&path, state_dim)?;
            model.condition(xs, ys)
        }
    }
}

/// Built-in reproduction presets, expressed in the config format itself.
///
/// The four panels pair a kernel with its parametric reference: a large
/// SE lengthscale against the constant-offset system (1a), a small one
/// against additive noise (1b), a linear kernel against the uncertain-gain
/// system (2a), and a linear-times-SE product against multiplicative noise
/// (2b). Gains, x0, horizon and signal levels are this tool's fixed choices.
pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "fig2-1a" => Some(
            "# persistent random offset: SE kernel, large lengthscale\n\
             model.mean.kind = linear\n\
             model.mean.gain = 0.95\n\
             model.kernel.kind = se\n\
             model.kernel.sigma_f = 1\n\
             model.kernel.lengthscale = 10\n\
             model.noise.q = 1\n\
             horizon.steps = 50\n\
             horizon.x0 = 1\n\
             methods = ground_truth,afs,linearized,independent,proxy:1a\n\
             samples = 20000\n\
             basis.count = 10\n\
             proxy.sigma_f = 1\n\
             proxy.sigma_w = 1\n",
        ),
        "fig2-1b" => Some(
            "# i.i.d. additive noise: SE kernel, small lengthscale\n\
             model.mean.kind = linear\n\
             model.mean.gain = 0.95\n\
             model.kernel.kind = se\n\
             model.kernel.sigma_f = 1\n\
             model.kernel.lengthscale = 0.1\n\
             model.noise.q = 1\n\
             horizon.steps = 50\n\
             horizon.x0 = 1\n\
             methods = ground_truth,afs,linearized,independent,proxy:1b\n\
             samples = 20000\n\
             basis.count = 10\n\
             proxy.sigma_f = 1\n\
             proxy.sigma_w = 1\n",
        ),
        "fig2-2a" => Some(
            "# persistent uncertain gain: linear kernel\n\
             model.mean.kind = linear\n\
             model.mean.gain = 0.95\n\
             model.kernel.kind = linear\n\
             model.kernel.sigma_f = 0.05\n\
             model.noise.q = 1\n\
             horizon.steps = 50\n\
             horizon.x0 = 1\n\
             methods = ground_truth,afs,linearized,independent,proxy:2a\n\
             samples = 20000\n\
             basis.count = 10\n\
             proxy.sigma_f = 0.05\n\
             proxy.sigma_w = 1\n",
        ),
        "fig2-2b" => Some(
            "# i.i.d. multiplicative noise: linear times SE kernel\n\
             model.mean.kind = linear\n\
             model.mean.gain = 0.95\n\
             model.kernel.kind = product\n\
             model.kernel.left.kind = linear\n\
             model.kernel.left.sigma_f = 0.05\n\
             model.kernel.right.kind = se\n\
             model.kernel.right.sigma_f = 1\n\
             model.kernel.right.lengthscale = 0.1\n\
             model.noise.q = 0\n\
             horizon.steps = 50\n\
             horizon.x0 = 1\n\
             methods = ground_truth,afs,linearized,independent,proxy:2b\n\
             samples = 20000\n\
             basis.count = 10\n\
             proxy.sigma_f = 0.05\n\
             proxy.sigma_w = 0\n",
        ),
        _ => None,
    }
}

/// Expands a built-in preset into a config.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name).ok_or_else(|| Error::ConfigInvalid {
        location: format!("preset:{name}"),
        message: "unknown preset (available: fig2-1a, fig2-1b, fig2-2a, fig2-2b)".into(),
    })?;
    parse_config_str(text, &format!("preset:{name}"))
}
