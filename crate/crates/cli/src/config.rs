use std::path::{Path, PathBuf};

use klplate::energy::{LoadSpec, MaterialParams};
use klplate::expr::Expr;
use klplate::mesh::PlanarDomain;
use klplate::minimize::MinimizeOptions;
use klplate::rigidity::FlexSearchOptions;
use klplate::space::BoundaryConditionSet;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Task {
    Energy,
    Minimize,
    Rigidity,
    Identities,
    Counterexample,
    Blowup,
    ConvexWeight,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Energy => "energy",
            Task::Minimize => "minimize",
            Task::Rigidity => "rigidity",
            Task::Identities => "identities",
            Task::Counterexample => "counterexample",
            Task::Blowup => "blowup",
            Task::ConvexWeight => "convex_weight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub n1: usize,
    pub n2: usize,
}

/// Closed-form displacement `(u1, u2, u3)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub u: [Expr; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampedPair {
    pub f: Expr,
    pub g: Expr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentitiesConfig {
    /// Triple for the bracket integration-by-parts identity.
    pub triple: [Expr; 3],
    /// Fields vanishing on the boundary for the sign check.
    pub clamped: Option<ClampedPair>,
    /// Clamped field for the weighted Hessian identity.
    pub weighted: Option<Expr>,
}

impl Default for IdentitiesConfig {
    fn default() -> Self {
        let e = |s: &str| Expr::parse(s).expect("valid default");
        IdentitiesConfig { triple: [e("y1^3 - 2*y1*y2"), e("y1^2*y2 + y2^3"), e("1 + y1 - y2^2")], clamped: None, weighted: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Transverse profile `f(y1)` of the zero-strain field.
    pub profile: Expr,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { profile: Expr::parse("y1^2").expect("valid default") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlowupConfig {
    pub profile: Expr,
    pub t: Vec<f64>,
    /// Also run the minimizer under the constructed load.
    pub minimize: bool,
}

impl Default for BlowupConfig {
    fn default() -> Self {
        BlowupConfig { profile: ProfileConfig::default().profile, t: vec![1.0, 2.0, 4.0, 8.0], minimize: true }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexWeightConfig {
    /// Absolute boundary distance for the Hessian samples; a fixed fraction of the diameter if absent.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Overrides the seeds of the minimizer and the flex search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub domain: PlanarDomain,
    pub mesh: MeshConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<MaterialParams>,
    #[serde(default)]
    pub loads: LoadSpec,
    #[serde(default)]
    pub bcs: BoundaryConditionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    #[serde(default)]
    pub minimize: MinimizeOptions,
    #[serde(default)]
    pub flex: FlexSearchOptions,
    #[serde(default)]
    pub identities: IdentitiesConfig,
    #[serde(default)]
    pub counterexample: ProfileConfig,
    #[serde(default)]
    pub blowup: BlowupConfig,
    #[serde(default)]
    pub convex_weight: ConvexWeightConfig,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`. A manifest written by an
    /// earlier run is accepted too: its `config` entry is used.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let bad = |e: String| CliError::Validation(format!("config {}: {e}", path.display()));
        if path.extension().is_some_and(|x| x == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if let Some(c) = v.get_mut("config") {
                v = c.take();
            }
            serde_json::from_value(v).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    /// Applies the top-level seed and checks the fields the task needs.
    pub fn finish(&mut self) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            self.minimize.seed = s;
            self.flex.seed = s;
        }
        let missing = |field: &str| CliError::Validation(format!("missing field `{field}` required by task `{}`", self.task.name()));
        if matches!(self.task, Task::Energy | Task::Minimize | Task::Blowup) && self.material.is_none() {
            return Err(missing("material"));
        }
        if self.task == Task::Energy && self.field.is_none() {
            return Err(missing("field"));
        }
        if let Some(m) = &self.material {
            m.validate()?;
        }
        self.minimize.validate()?;
        if !(self.flex.tolerance > 0.0) {
            return Err(CliError::Validation("flex.tolerance must be positive".into()));
        }
        if self.convex_weight.margin.is_some_and(|m| !(m >= 0.0)) {
            return Err(CliError::Validation("convex_weight.margin must be nonnegative".into()));
        }
        if self.task == Task::Blowup && self.blowup.t.len() < 3 {
            return Err(CliError::Validation("blowup.t needs at least 3 samples".into()));
        }
        self.domain.validate()?;
        Ok(())
    }
}
