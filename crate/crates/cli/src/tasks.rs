use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use klplate::analysis::*;
use klplate::energy::{energy_gradient, total_energy, MaterialParams};
use klplate::mesh::Mesh;
use klplate::minimize::{minimize_energy, minimizing_sequence_diagnostics, MinimizeResult};
use klplate::rigidity::rigidity_verdict;
use klplate::space::{AdmissibleSpace, DisplacementField, ElementKind, FieldSpace, ScalarSpace};
use serde_json::{json, Value};

use crate::config::{RunConfig, Task};
use crate::CliError;

/// Task output: the report body and the CSV files written next to it.
pub struct TaskOutput {
    pub report: Value,
    pub files: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    mesh: Arc<Mesh>,
    files: Vec<String>,
}

impl Ctx<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn space(&self) -> FieldSpace {
        FieldSpace::new(self.mesh.clone())
    }

    fn admissible(&self) -> Result<AdmissibleSpace, CliError> {
        Ok(AdmissibleSpace::new(self.space(), &self.cfg.bcs)?)
    }

    fn material(&self) -> MaterialParams {
        self.cfg.material.expect("checked by RunConfig::finish")
    }

    fn write_field(&mut self, name: &str, space: &FieldSpace, u: &DisplacementField) -> Result<(), CliError> {
        let w = self.create(name)?;
        u.write_csv(space, w)?;
        Ok(())
    }
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<TaskOutput, CliError> {
    let mesh = Arc::new(Mesh::build(&cfg.domain, cfg.mesh.n1, cfg.mesh.n2)?);
    let mut ctx = Ctx { cfg, out, mesh, files: vec![] };
    let report = match cfg.task {
        Task::Energy => energy(&mut ctx)?,
        Task::Minimize => minimize(&mut ctx)?,
        Task::Rigidity => rigidity(&mut ctx)?,
        Task::Identities => identities(&mut ctx)?,
        Task::Counterexample => counterexample(&mut ctx)?,
        Task::Blowup => blowup(&mut ctx)?,
        Task::ConvexWeight => convex(&mut ctx)?,
    };
    Ok(TaskOutput { report, files: ctx.files })
}

fn energy(ctx: &mut Ctx) -> Result<Value, CliError> {
    let adm = ctx.admissible()?;
    let params = ctx.material();
    let [u1, u2, u3] = &ctx.cfg.field.as_ref().expect("checked by RunConfig::finish").u;
    let u = adm.space.interpolate(u1, u2, u3);
    let breakdown = total_energy(&adm, &u, &ctx.cfg.loads, &params)?;
    let gradient = energy_gradient(&adm, &u, &ctx.cfg.loads, &params)?;
    let ma = monge_ampere_residual(&adm.space, &u);
    ctx.write_field("field.csv", &adm.space, &u)?;
    Ok(json!({
        "energy": breakdown,
        "gradient_norm": gradient.norm(),
        "free_dofs": gradient.len(),
        "membrane_strain_norm": ma.strain_norm,
        "det_hessian_norm": ma.det_hessian_norm,
    }))
}

fn minimize_report(ctx: &mut Ctx, space: &FieldSpace, r: &MinimizeResult) -> Result<Value, CliError> {
    let mut w = ctx.create("trace.csv")?;
    r.trace.write_csv(&mut w)?;
    ctx.write_field("field.csv", space, &r.field)?;
    let runs: Vec<Value> = r
        .runs
        .iter()
        .map(|(e, t)| {
            let last = t.last();
            json!({
                "restart": t.restart,
                "status": t.status,
                "energy": e.total,
                "gradient_norm": last.map(|l| l.gradient_norm),
                "iterations": last.map(|l| l.iteration),
                "suspected_unbounded": t.suspected_unbounded,
                "diagnostics": minimizing_sequence_diagnostics(t).ok(),
            })
        })
        .collect();
    Ok(json!({
        "energy": r.energy,
        "status": r.trace.status,
        "best_restart": r.trace.restart,
        "suspected_unbounded": r.suspected_unbounded(),
        "ceiling": r.trace.ceiling,
        "constants": r.trace.constants,
        "diagnostics": minimizing_sequence_diagnostics(&r.trace)?,
        "runs": runs,
    }))
}

fn minimize(ctx: &mut Ctx) -> Result<Value, CliError> {
    let adm = ctx.admissible()?;
    let r = minimize_energy(&adm, &ctx.cfg.loads, &ctx.material(), None, &ctx.cfg.minimize)?;
    minimize_report(ctx, &adm.space, &r)
}

fn rigidity(ctx: &mut Ctx) -> Result<Value, CliError> {
    let adm = ctx.admissible()?;
    let r = rigidity_verdict(&adm, &ctx.cfg.flex)?;
    if let Some(w) = &r.nonlinear_flex {
        ctx.write_field("flex.csv", &adm.space, &w.field)?;
    }
    Ok(json!({
        "report": r,
        "flex_residual": r.nonlinear_flex.as_ref().map(|w| w.residual),
    }))
}

fn identities(ctx: &mut Ctx) -> Result<Value, CliError> {
    let s = ScalarSpace::new(ctx.mesh.clone(), ElementKind::Hermite);
    let id = &ctx.cfg.identities;
    let [u, v, w] = &id.triple;
    let forms = bracket_forms(&s, &s.interpolate(u), &s.interpolate(v), &s.interpolate(w))?;
    let residual = forms.residual();
    let mut report = json!({ "bracket": { "forms": forms, "residual": residual } });
    if let Some(c) = &id.clamped {
        report["clamped"] = serde_json::to_value(clamped_bracket_check(&s, &s.interpolate(&c.f), &s.interpolate(&c.g))?)?;
    }
    if let Some(f) = &id.weighted {
        let wi = weighted_hessian_identity(&s, &s.interpolate(f))?;
        report["weighted"] = json!({ "lhs": wi.lhs, "rhs": wi.rhs, "relative_residual": wi.relative_residual() });
    }
    if let Some(field) = &ctx.cfg.field {
        let fs = ctx.space();
        let u = fs.interpolate(&field.u[0], &field.u[1], &field.u[2]);
        report["monge_ampere"] = serde_json::to_value(monge_ampere_residual(&fs, &u))?;
    }
    Ok(report)
}

fn counterexample(ctx: &mut Ctx) -> Result<Value, CliError> {
    let fs = ctx.space();
    let u = counterexample_field(&fs, &ctx.cfg.counterexample.profile)?;
    let ma = monge_ampere_residual(&fs, &u);
    ctx.write_field("field.csv", &fs, &u)?;
    Ok(json!({
        "profile": ctx.cfg.counterexample.profile,
        "strain_norm": ma.strain_norm,
        "det_hessian_norm": ma.det_hessian_norm,
    }))
}

fn blowup(ctx: &mut Ctx) -> Result<Value, CliError> {
    let adm = ctx.admissible()?;
    let params = ctx.material();
    let cfg = &ctx.cfg.blowup;
    let w = counterexample_field(&adm.space, &cfg.profile)?;
    let family = blowup_family(&adm, &w, &params, &cfg.t)?;
    let run_minimizer = cfg.minimize;
    let mut wr = csv::Writer::from_writer(ctx.create("samples.csv")?);
    wr.write_record(["t", "J"])?;
    for (t, j) in &family.samples {
        wr.write_record([t.to_string(), j.to_string()])?;
    }
    wr.flush()?;
    let (degree, coefficient) = family.leading();
    let mut report = json!({
        "profile": cfg.profile,
        "c": family.c,
        "bending_norm_sq": family.bending_norm_sq,
        "tangential_norm_sq": family.tangential_norm_sq,
        "fit": family.fit,
        "fit_residual": family.fit_residual,
        "leading_degree": degree,
        "leading_coefficient": coefficient,
        "expected_leading": family.expected_leading,
        "samples": family.samples,
    });
    if run_minimizer {
        let r = minimize_energy(&adm, &family.load, &params, None, &ctx.cfg.minimize)?;
        report["minimize"] = minimize_report(ctx, &adm.space, &r)?;
    }
    Ok(report)
}

fn convex(ctx: &mut Ctx) -> Result<Value, CliError> {
    let cw = match ctx.cfg.convex_weight.margin {
        Some(m) => convex_weight_with_margin(ctx.mesh.clone(), m)?,
        None => convex_weight(ctx.mesh.clone())?,
    };
    let center = ctx.mesh.nodes.iter().fold([0.0, 0.0], |c, p| [c[0] + p[0], c[1] + p[1]]);
    let n = ctx.mesh.nodes.len() as f64;
    let centroid = [center[0] / n, center[1] / n];
    let mut wr = csv::Writer::from_writer(ctx.create("weight.csv")?);
    wr.write_record(["node", "y1", "y2", "f", "w"])?;
    for (k, p) in ctx.mesh.nodes.iter().enumerate() {
        let vd = cw.space.value_dof(k);
        wr.write_record([k.to_string(), p[0].to_string(), p[1].to_string(), cw.nodal[k].to_string(), cw.w[vd].to_string()])?;
    }
    wr.flush()?;
    Ok(json!({
        "weight": cw,
        "node_centroid": centroid,
        "f_near_centroid": cw.nodal_value_near(centroid),
    }))
}
