//! Calibration statistics: static min/max over convolution weights and
//! running min/max over recorded post-softmax activations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::error::{Error, Result};
use crate::package::{ModelPackage, PATH_SEP, SITE_SUFFIX};
use crate::quant::check_post_softmax;
use crate::tensor::min_max;

/// How convolution weight ranges are shared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One range per conv weight tensor.
    #[default]
    PerModule,
    /// One range shared by every listed conv under the same parent.
    PerGroup,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerModule => "per-module",
            Granularity::PerGroup => "per-group",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-module" => Ok(Granularity::PerModule),
            "per-group" => Ok(Granularity::PerGroup),
            other => Err(Error::InvalidConfig(format!(
                "unknown granularity {other:?}, expected per-module or per-group"
            ))),
        }
    }
}

pub type Bounds = BTreeMap<String, (f32, f32)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibStats {
    pub weight_bounds: Bounds,
    pub activation_bounds: Bounds,
    pub n_samples: usize,
}

fn parent_of(path: &str) -> &str {
    path.rsplit_once(PATH_SEP).map_or("", |(p, _)| p)
}

/// Min/max of every conv weight named in the partition's CNN list.
///
/// Entries without a weight tensor are skipped.
pub fn calibrate_weights(
    pkg: &ModelPackage,
    part: &BlockPartition,
    granularity: Granularity,
) -> Result<Bounds> {
    let mut bounds = Bounds::new();
    for path in &part.cnn {
        let node = pkg
            .node(path)
            .ok_or_else(|| Error::PathNotFound(path.clone()))?;
        if !node.tensors.contains_key("weight") {
            continue;
        }
        let w = pkg
            .tensor(path, "weight")
            .map_err(|e| e.at(path.as_str()))?;
        let mm = min_max(&w).map_err(|e| e.at(path.as_str()))?;
        bounds.insert(path.clone(), mm);
    }
    if granularity == Granularity::PerGroup {
        let mut groups: BTreeMap<&str, (f32, f32)> = BTreeMap::new();
        for (path, &(lo, hi)) in &bounds {
            let g = groups.entry(parent_of(path)).or_insert((lo, hi));
            g.0 = g.0.min(lo);
            g.1 = g.1.max(hi);
        }
        let shared: Bounds = bounds
            .keys()
            .map(|p| (p.clone(), groups[parent_of(p)]))
            .collect();
        return Ok(shared);
    }
    Ok(bounds)
}

/// Strips the site suffix, yielding the softmax node path.
pub fn site_node_path(site: &str) -> Option<&str> {
    site.strip_suffix(SITE_SUFFIX).filter(|p| !p.is_empty())
}

/// Running min/max per trace site across every recorded sample.
pub fn calibrate_activations(
    traces: &crate::package::TracePackage,
    part: &BlockPartition,
) -> Result<Bounds> {
    if traces.is_empty() {
        return Err(Error::NoSites);
    }
    let mut bounds = Bounds::new();
    for site in traces.site_ids() {
        let node_path = site_node_path(site).ok_or_else(|| Error::InvalidSite {
            site: site.into(),
            reason: format!("missing {SITE_SUFFIX:?} suffix"),
        })?;
        if !part.under_transformer(node_path) {
            return Err(Error::UnpartitionedSite(site.into()));
        }
        let mut running: Option<(f32, f32)> = None;
        for sample in traces.samples(site)? {
            check_post_softmax(sample.data()).map_err(|e| e.at(site))?;
            let (lo, hi) = min_max(&sample).map_err(|e| e.at(site))?;
            running = Some(match running {
                None => (lo, hi),
                Some((a, b)) => (a.min(lo), b.max(hi)),
            });
        }
        if let Some(mm) = running {
            bounds.insert(site.to_string(), mm);
        }
    }
    Ok(bounds)
}

pub fn calibrate(
    pkg: &ModelPackage,
    traces: &crate::package::TracePackage,
    part: &BlockPartition,
    granularity: Granularity,
) -> Result<CalibStats> {
    Ok(CalibStats {
        weight_bounds: calibrate_weights(pkg, part, granularity)?,
        activation_bounds: calibrate_activations(traces, part)?,
        n_samples: traces.n_samples(),
    })
}
