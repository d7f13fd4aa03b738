//! Phase orchestration: deploy, reorder, remap, and report.

use rayon::prelude::*;

use crate::aging::{inject_aging, remap_schedule, AgedProfile};
use crate::cell::{CellConfig, Codebook};
use crate::config::RunConfig;
use crate::deploy::{schedule_layer, Layer, NetworkModel};
use crate::error::{Error, Result};
use crate::reorder::column_reorder;
use crate::report::{LayerAudit, LayerRow, Phases, RemapSummary, Report, ToolInfo, Totals};
use crate::write::{simulate_schedule, SimOptions};

/// Where the aged state of the PTCs comes from when remapping.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AgingSource {
    /// Use `endurance` from the config.
    #[default]
    FromConfig,
    /// One profile shared by every PTC.
    Profile(AgedProfile),
    /// Wires worn to this many toggles by a first deployment become stuck.
    Endurance(u64),
}

fn layer_error(layer: &Layer, e: Error) -> Error {
    match e {
        e @ (Error::BadLayer { .. } | Error::LengthMismatch { .. } | Error::NonFiniteWeight { .. }) => e,
        other => Error::BadLayer {
            layer: layer.name.clone(),
            reason: other.to_string(),
        },
    }
}

fn run_layer(
    config: &RunConfig,
    cfg: &CellConfig,
    layer: &Layer,
    phases: Phases,
    aging: &AgingSource,
) -> Result<(LayerRow, LayerAudit)> {
    let k = config.ptc_size;
    let opts = SimOptions {
        energy: config.energy,
        policy: config.wire_policy,
    };
    let mut schedule = schedule_layer(layer, k, config.assignment)?;
    if phases.reorder {
        schedule = column_reorder(&schedule)?.into_schedule();
    }
    let mut remap = None;
    let run = if phases.remap {
        let profiles: Vec<AgedProfile> = match aging {
            AgingSource::Profile(p) => {
                if p.k() != k {
                    return Err(Error::BadProfile(format!(
                        "profile is {0}x{0} but the PTC size is {k}",
                        p.k()
                    )));
                }
                p.validate(cfg)?;
                vec![p.clone(); schedule.ptcs.len()]
            }
            AgingSource::Endurance(e) => age_by_deployment(cfg, &schedule, &opts, *e)?,
            AgingSource::FromConfig => match config.endurance {
                Some(e) => age_by_deployment(cfg, &schedule, &opts, e)?,
                None => {
                    return Err(Error::InvalidConfig(
                        "remap needs an aging profile or an endurance".into(),
                    ))
                }
            },
        };
        schedule = remap_schedule(cfg, &schedule, &profiles, config.md_form)?;
        let orders = schedule.row_orders.as_deref().unwrap_or_default();
        remap = Some(RemapSummary {
            identity_md: orders.iter().map(|o| o.identity_cost).sum(),
            remapped_md: orders.iter().map(|o| o.cost).sum(),
            stuck_wires: profiles
                .iter()
                .flat_map(|p| p.cells())
                .map(|&(a, b)| u64::from(a) + u64::from(b))
                .sum(),
        });
        simulate_schedule(cfg, &schedule, &opts, Some(&profiles))?
    } else {
        simulate_schedule(cfg, &schedule, &opts, None)?
    };
    let mut row = LayerRow::from_stats(&layer.name, &run.stats);
    row.remap = remap;
    let audit = LayerAudit {
        layer: layer.name.clone(),
        cell_permutations: schedule.cell_perms.map(|p| p.ptcs),
        row_orders: schedule.row_orders,
    };
    Ok((row, audit))
}

/// Runs the schedule once on fresh PTCs and reads off which wires wore out.
fn age_by_deployment(
    cfg: &CellConfig,
    schedule: &crate::deploy::LayerSchedule,
    opts: &SimOptions,
    endurance: u64,
) -> Result<Vec<AgedProfile>> {
    let mut first = simulate_schedule(cfg, schedule, opts, None)?;
    first
        .ptcs
        .iter_mut()
        .map(|p| inject_aging(p, endurance))
        .collect()
}

/// Executes the phases enabled in `config` (overridden by `phases`, if
/// given) on every layer and collects a report.
pub fn run_pipeline(
    config: &RunConfig,
    model: &NetworkModel,
    phases: Option<Phases>,
    aging: &AgingSource,
) -> Result<Report> {
    config.validate()?;
    let phases = phases.unwrap_or(Phases {
        reorder: config.reorder,
        remap: config.remap,
    });
    if phases.remap && !phases.reorder {
        return Err(Error::InvalidConfig(
            "remap works on reordered (sorted) block groups; enable reorder".into(),
        ));
    }
    if phases.remap && *aging == AgingSource::FromConfig && config.endurance.is_none() {
        return Err(Error::InvalidConfig(
            "remap needs an aging profile or an endurance".into(),
        ));
    }
    let cfg = config.cell()?;
    let results = model
        .layers
        .par_iter()
        .map(|layer| run_layer(config, &cfg, layer, phases, aging).map_err(|e| layer_error(layer, e)))
        .collect::<Result<Vec<_>>>()?;
    let (layers, audit): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Report {
        tool: ToolInfo::default(),
        model: model.name.clone(),
        config: config.clone(),
        phases,
        totals: Totals::from_rows(&layers),
        layers,
        audit,
    })
}

/// Every weight snapped onto the codebook of `cfg`.
pub fn quantize_model(model: &NetworkModel, cfg: &CellConfig) -> Result<(NetworkModel, Codebook)> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let weights = l
                .weights
                .iter()
                .map(|&w| Ok(cfg.quantize(w)?.0))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| layer_error(l, e))?;
            Ok(Layer {
                weights,
                ..l.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        NetworkModel {
            name: model.name.clone(),
            layers,
        },
        cfg.build_codebook(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::LayerShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |name: &str, rows: usize, cols: usize| Layer {
            name: name.into(),
            shape: LayerShape::Dense { rows, cols },
            weights: (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        NetworkModel {
            name: "rand".into(),
            layers: vec![layer("a", 8, 24), layer("b", 5, 12)],
        }
    }

    fn config() -> RunConfig {
        RunConfig {
            bit_width: 3,
            ptc_size: 4,
            ..RunConfig::with_base_c(0.7)
        }
    }

    #[test]
    fn reorder_never_adds_writes() {
        let m = random_model(1);
        let off = run_pipeline(&config(), &m, Some(Phases::default()), &AgingSource::FromConfig).unwrap();
        let on = run_pipeline(
            &config(),
            &m,
            Some(Phases {
                reorder: true,
                remap: false,
            }),
            &AgingSource::FromConfig,
        )
        .unwrap();
        assert!(on.totals.total_writes <= off.totals.total_writes);
        for (a, b) in on.layers.iter().zip(&off.layers) {
            assert!(a.total_writes <= b.total_writes);
        }
        assert_eq!(on.totals.total_writes, on.layers.iter().map(|l| l.total_writes).sum::<u64>());
    }

    #[test]
    fn empty_model() {
        let r = run_pipeline(
            &config(),
            &NetworkModel::default(),
            None,
            &AgingSource::FromConfig,
        )
        .unwrap();
        assert!(r.layers.is_empty());
        assert_eq!(r.totals, Totals::default());
    }

    #[test]
    fn fresh_profile_changes_nothing() {
        let m = random_model(2);
        let phases = Phases {
            reorder: true,
            remap: true,
        };
        let plain = run_pipeline(
            &config(),
            &m,
            Some(Phases {
                reorder: true,
                remap: false,
            }),
            &AgingSource::FromConfig,
        )
        .unwrap();
        let fresh =
            run_pipeline(&config(), &m, Some(phases), &AgingSource::Profile(AgedProfile::fresh(4))).unwrap();
        assert_eq!(fresh.totals, plain.totals);
        for l in &fresh.layers {
            let s = l.remap.unwrap();
            assert_eq!((s.identity_md, s.remapped_md, s.stuck_wires), (0.0, 0.0, 0));
        }
        assert!(matches!(
            run_pipeline(&config(), &m, Some(phases), &AgingSource::FromConfig),
            Err(Error::InvalidConfig(_))
        ));
        let aged = run_pipeline(&config(), &m, Some(phases), &AgingSource::Endurance(1)).unwrap();
        for l in &aged.layers {
            let s = l.remap.unwrap();
            assert!(s.remapped_md <= s.identity_md);
            assert!(s.stuck_wires > 0);
        }
    }

    #[test]
    fn quantized_model_is_on_codebook() {
        let cfg = CellConfig::new(3, 0.7).unwrap();
        let (q, book) = quantize_model(&random_model(3), &cfg).unwrap();
        let weights: Vec<f64> = book.weights().collect();
        for l in &q.layers {
            assert!(l.weights.iter().all(|w| weights.contains(w)));
        }
    }
}
