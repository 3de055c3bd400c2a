use serde::{Deserialize, Serialize};

use super::gradient::{locate_neuron, locate_row, RowConfig};
use super::layer::locate_layer;
use super::modules::locate_module;
use super::report::ImportanceReport;
use super::{Granularity, GranularityMask, LocateError};
use crate::corpus::PromptCase;
use crate::model::{MiniTransformer, ModuleKind, ParameterAddress};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocateConfig {
    pub module_top_n: usize,
    /// Module to locate rows in. By default the selected module that writes
    /// into the residual stream (o_proj or fc_out), else the top-scoring one.
    pub row_module: Option<ModuleKind>,
    pub row: RowConfig,
    pub neuron_top_k: usize,
}

impl Default for LocateConfig {
    fn default() -> Self {
        LocateConfig {
            module_top_n: 2,
            row_module: None,
            row: RowConfig::default(),
            neuron_top_k: 10,
        }
    }
}

/// Reports of the stages run so far, in pipeline order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocateReports {
    pub layer: Option<ImportanceReport>,
    pub module: Option<ImportanceReport>,
    pub row: Option<ImportanceReport>,
    pub neuron: Option<ImportanceReport>,
}

impl LocateReports {
    pub fn get(&self, level: Granularity) -> Option<&ImportanceReport> {
        match level {
            Granularity::Full => None,
            Granularity::Layer => self.layer.as_ref(),
            Granularity::Module => self.module.as_ref(),
            Granularity::Row => self.row.as_ref(),
            Granularity::Neuron => self.neuron.as_ref(),
        }
    }

    fn require(&self, level: Granularity, for_level: Granularity) -> Result<&ImportanceReport, LocateError> {
        self.get(level).ok_or_else(|| {
            LocateError::Pipeline(format!(
                "{for_level} locating needs the {level} stage, which has not run"
            ))
        })
    }
}

/// Picks the module whose rows are located.
pub fn row_module(report: &ImportanceReport, preferred: Option<ModuleKind>) -> Result<ParameterAddress, LocateError> {
    if report.level != Granularity::Module || report.selected.is_empty() {
        return Err(LocateError::Pipeline("row locating needs a module report with a selection".into()));
    }
    if let Some(kind) = preferred {
        return report
            .selected
            .iter()
            .find(|a| a.module == Some(kind))
            .copied()
            .ok_or_else(|| LocateError::Contract(format!("{kind} is not among the selected modules")));
    }
    let score = |a: &&ParameterAddress| report.scores.get(*a).copied().unwrap_or(0.0);
    let writers: Vec<&ParameterAddress> = report
        .selected
        .iter()
        .filter(|a| matches!(a.module, Some(ModuleKind::OProj | ModuleKind::FcOut)))
        .collect();
    let pool = if writers.is_empty() {
        report.selected.iter().collect()
    } else {
        writers
    };
    Ok(*pool
        .into_iter()
        .max_by(|a, b| score(a).total_cmp(&score(b)).then(b.cmp(a)))
        .expect("nonempty pool"))
}

/// Runs every stage needed for `level` that `reports` lacks. Stages already
/// present are reused as they are.
pub fn locate(
    model: &MiniTransformer,
    cases: &[PromptCase],
    probe_set: &str,
    level: Granularity,
    cfg: &LocateConfig,
    mut reports: LocateReports,
) -> Result<LocateReports, LocateError> {
    let depth = |g: Granularity| Granularity::ALL.iter().position(|&x| x == g).expect("known level");
    let want = depth(level);
    if want >= depth(Granularity::Layer) && reports.layer.is_none() {
        reports.layer = Some(locate_layer(model, cases, probe_set)?);
    }
    if want >= depth(Granularity::Module) && reports.module.is_none() {
        let layer = reports.require(Granularity::Layer, Granularity::Module)?.selected[0].layer;
        reports.module = Some(locate_module(model, cases, layer, cfg.module_top_n, probe_set)?);
    }
    if want >= depth(Granularity::Row) && reports.row.is_none() {
        let module = row_module(reports.require(Granularity::Module, Granularity::Row)?, cfg.row_module)?;
        reports.row = Some(locate_row(model, cases, module, &cfg.row, probe_set)?);
    }
    if want >= depth(Granularity::Neuron) && reports.neuron.is_none() {
        let rows = reports.require(Granularity::Row, Granularity::Neuron)?;
        reports.neuron = Some(locate_neuron(model, cases, rows, None, cfg.neuron_top_k, probe_set)?);
    }
    Ok(reports)
}

/// Wraps the selection of the `level` report into a mask, after checking
/// that every upstream stage is present and that the selections nest.
pub fn build_mask(level: Granularity, reports: &LocateReports) -> Result<GranularityMask, LocateError> {
    if level == Granularity::Full {
        return Ok(GranularityMask::full());
    }
    let mut parent: Option<GranularityMask> = None;
    for g in Granularity::ALL.into_iter().skip(1) {
        let r = reports.require(g, level)?;
        if r.level != g {
            return Err(LocateError::Pipeline(format!("the {g} slot holds a {} report", r.level)));
        }
        let mask = GranularityMask::new(g, r.selected.iter().copied())?;
        if let Some(p) = &parent {
            mask.check_nested_in(p)?;
        }
        if g == level {
            let mut mask = mask;
            mask.provenance = Some(r.hash());
            return Ok(mask);
        }
        parent = Some(mask);
    }
    unreachable!("level is one of the located granularities")
}
